import numpy as np
import pytest

from orthopeft import autodiff as ad
from orthopeft.backbone import BackboneConfig
from orthopeft.data import GeneratorConfig, generate
from orthopeft.model import ModelConfig, MultiTaskModel


def tiny_backbone(**kw):
    cfg = dict(image_size=8, patch_size=4, channels=3, embed_dim=16, depth=2, heads=2,
               mlp_ratio=2.0, final_stage_blocks=2)
    cfg.update(kw)
    return BackboneConfig(**cfg)


def tiny_model(peft_kind="adapter", seed=0, dtype=np.float64, rank=4, **kw):
    with ad.precision(dtype):
        cfg = ModelConfig(backbone=tiny_backbone(**kw), peft_kind=peft_kind, rank=rank)
        return MultiTaskModel(cfg, seed=seed)


@pytest.fixture
def f64():
    with ad.precision(np.float64):
        yield


@pytest.fixture(scope="session")
def small_dataset():
    return generate(GeneratorConfig(n_samples=64, seed=11))


def tiny_train_config(**kw):
    """Seconds-long training setup on 16x16 images."""
    from orthopeft.training import TrainConfig

    d = dict(epochs=3, warmup_steps=20, batch_size=8, lr=3e-3, plateau_patience=1,
             backbone=tiny_backbone(image_size=16, depth=3, final_stage_blocks=2).to_dict())
    d.update(kw)
    return TrainConfig(**d)


@pytest.fixture(scope="session")
def train_dataset():
    return generate(GeneratorConfig(n_samples=80, image_size=16, seed=5))
