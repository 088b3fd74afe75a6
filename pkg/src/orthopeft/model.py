"""Backbone + per-task PEFT + heads + uncertainty weights as one trainable unit."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import NUM_CLASSES, TASKS
from . import autodiff as ad
from .backbone import Backbone, BackboneConfig
from .heads import TaskHead
from .objective import UncertaintyWeights
from .peft import LORA_TARGETS, build_registry


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    peft_kind: str = "adapter"
    rank: int = 8
    lora_targets: tuple = LORA_TARGETS
    lora_alpha: float | None = None
    tasks: tuple = TASKS
    num_classes: tuple = NUM_CLASSES
    dropout_p: float = 0.5
    clamp: tuple = (-3.0, 3.0)

    def to_dict(self):
        d = asdict(self)
        d["lora_targets"] = list(self.lora_targets)
        d["tasks"] = list(self.tasks)
        d["num_classes"] = list(self.num_classes)
        d["clamp"] = list(self.clamp)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["backbone"] = BackboneConfig(**d.get("backbone", {}))
        for key in ("lora_targets", "tasks", "num_classes", "clamp"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


class MultiTaskModel:
    """Separate seeded streams for backbone init and PEFT/head init keep the
    backbone identical across PEFT kinds, and PEFT init independent of lambda."""

    def __init__(self, cfg=None, seed=0):
        self.cfg = cfg = cfg or ModelConfig()
        base = np.random.SeedSequence(seed)
        bb_seq, peft_seq, head_seq = base.spawn(3)
        self.backbone = Backbone(cfg.backbone, np.random.default_rng(bb_seq))
        d = cfg.backbone.embed_dim
        self.peft = build_registry(
            cfg.peft_kind, cfg.tasks, cfg.backbone.insertion_layers, d, cfg.rank,
            np.random.default_rng(peft_seq), lora_targets=cfg.lora_targets,
            lora_alpha=cfg.lora_alpha,
        )
        head_rng = np.random.default_rng(head_seq)
        self.heads = {
            t: TaskHead(t, d, c, head_rng, cfg.dropout_p)
            for t, c in zip(cfg.tasks, cfg.num_classes)
        }
        self.uncertainty = UncertaintyWeights(len(cfg.tasks), cfg.clamp)

    @property
    def tasks(self):
        return self.cfg.tasks

    def named_parameters(self):
        yield from self.backbone.named_parameters()
        yield from self.peft.named_parameters()
        for t in self.tasks:
            yield from self.heads[t].named_parameters()
        yield from self.uncertainty.named_parameters()

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.trainable]

    def parameter_counts(self):
        total = sum(p.size for p in self.parameters())
        trainable = sum(p.size for p in self.trainable_parameters())
        return {"total": total, "trainable": trainable, "fraction": trainable / total}

    def uses_stem(self):
        """True when the first final-stage block is task-independent (no LoRA there)."""
        return self.peft.layer_kind(self.backbone.trunk_depth) != "lora"

    def forward(self, images, training=False, rng=None, trunk=None, stem=None):
        """Per-task logits; the trunk is computed once and shared by all branches.

        ``trunk`` or ``stem`` may be supplied precomputed (e.g. from a cache).
        """
        if trunk is None and stem is None:
            trunk = self.backbone.forward_trunk(images)
        branches = self.backbone.forward_branches(trunk, self.tasks, self.peft, stem)
        return [self.heads[t](x, training, rng) for t, x in zip(self.tasks, branches)]

    def predict(self, images, batch_size=64):
        """Argmax predictions per task, eval mode, no graph."""
        preds = [[] for _ in self.tasks]
        with ad.no_grad():
            for i in range(0, len(images), batch_size):
                logits = self.forward(images[i:i + batch_size])
                for k, z in enumerate(logits):
                    preds[k].append(np.argmax(z.data, axis=1))
        return [np.concatenate(p) for p in preds]


def load_model(path):
    """Rebuild a MultiTaskModel from a checkpoint; returns (model, meta)."""
    from .checkpoint import load_checkpoint, restore_parameters
    from .errors import FormatError

    meta, params = load_checkpoint(path)
    if "model" not in meta:
        raise FormatError(f"{path}: checkpoint has no model config")
    dtype = next(iter(params.values()))[0].dtype if params else np.float32
    with ad.precision(dtype.type):
        model = MultiTaskModel(ModelConfig.from_dict(meta["model"]),
                               seed=meta.get("train", {}).get("seed", 0))
    restore_parameters(model.named_parameters(), params)
    return model, meta
