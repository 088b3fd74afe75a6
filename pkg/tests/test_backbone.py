import numpy as np
import pytest

from orthopeft import NUM_CLASSES, TASKS
from orthopeft import autodiff as ad
from orthopeft.autodiff import Tensor, grad_check
from orthopeft.backbone import Backbone, BackboneConfig, warmup_pretrain
from orthopeft.errors import ConfigurationError, InputError
from orthopeft.heads import TaskHead
from orthopeft.model import MultiTaskModel
from orthopeft.objective import ObjectiveConfig, mtl_loss, ortho_loss, task_losses, total_loss
from orthopeft.optim import AdamW

from conftest import tiny_backbone, tiny_model


def images(n, size=8, seed=0):
    return np.random.default_rng(seed).random((n, size, size, 3))


# -- backbone ---------------------------------------------------------------------------------

def test_default_token_count():
    assert BackboneConfig().num_tokens == 64
    assert BackboneConfig().insertion_layers == [6, 7]


def test_config_validation():
    with pytest.raises(ConfigurationError):
        BackboneConfig(image_size=30)
    with pytest.raises(ConfigurationError):
        BackboneConfig(embed_dim=30, heads=4)
    with pytest.raises(ConfigurationError):
        BackboneConfig(final_stage_blocks=9)


def test_zero_image_is_finite(f64):
    bb = Backbone(tiny_backbone(final_stage_blocks=1), np.random.default_rng(0))
    out = bb.forward_trunk(np.zeros((2, 8, 8, 3)))
    assert out.shape == (2, 4, 16) and np.all(np.isfinite(out.data))


def test_batch_equivariance(f64):
    bb = Backbone(tiny_backbone(final_stage_blocks=1), np.random.default_rng(0))
    x = images(4)
    perm = [2, 0, 3, 1]
    np.testing.assert_allclose(bb(x[perm]).data, bb(x).data[perm], rtol=1e-12, atol=1e-14)


def test_wrong_image_shape():
    bb = Backbone(tiny_backbone(), np.random.default_rng(0))
    with pytest.raises(InputError):
        bb.forward_trunk(np.zeros((2, 9, 9, 3)))


@pytest.mark.parametrize("kind", ["adapter", "lora"])
def test_fresh_peft_is_bit_identical(kind):
    model = tiny_model(kind)
    x = images(3)
    trunk = model.backbone.forward_trunk(x)
    plain = model.backbone.forward_task_branch(trunk).data
    for t, out in zip(TASKS, model.backbone.forward_branches(trunk, TASKS, model.peft)):
        assert np.array_equal(out.data, plain), t


def test_fresh_adapters_float32_close():
    model = tiny_model("adapter", dtype=np.float32)
    with ad.precision(np.float32):
        trunk = model.backbone.forward_trunk(images(3).astype(np.float32))
        plain = model.backbone.forward_task_branch(trunk).data
        outs = model.backbone.forward_branches(trunk, TASKS, model.peft)
    for out in outs:
        assert np.max(np.abs(out.data - plain)) <= 1e-6


def _perturb(model, task, rng):
    for name, p in model.peft.named_parameters():
        if name.startswith(f"peft.{task}."):
            p.data += rng.standard_normal(p.shape) * 0.3


@pytest.mark.parametrize("kind", ["adapter", "lora"])
def test_task_isolation_forward(kind):
    model = tiny_model(kind)
    x = images(2)
    trunk = model.backbone.forward_trunk(x)
    before = [o.data.copy() for o in model.backbone.forward_branches(trunk, TASKS, model.peft)]
    _perturb(model, "steatosis", np.random.default_rng(0))
    after = [o.data for o in model.backbone.forward_branches(trunk, TASKS, model.peft)]
    assert not np.allclose(before[0], after[0])
    assert np.array_equal(before[1], after[1]) and np.array_equal(before[2], after[2])


def test_identical_adapters_identical_branches():
    model = tiny_model("adapter")
    rng = np.random.default_rng(1)
    for layer in model.peft.layers:
        src = model.peft.adapter("steatosis", layer)
        src.up.data[...] = rng.standard_normal(src.up.shape)
        dst = model.peft.adapter("ballooning", layer)
        for a, b in zip(src.parameters(), dst.parameters()):
            b.data[...] = a.data
    trunk = model.backbone.forward_trunk(images(2))
    outs = model.backbone.forward_branches(trunk, TASKS, model.peft)
    assert np.array_equal(outs[0].data, outs[1].data)
    assert not np.array_equal(outs[0].data, outs[2].data)


@pytest.mark.parametrize("kind", ["adapter", "lora"])
def test_task_isolation_gradients(kind):
    model = tiny_model(kind)
    _perturb(model, "steatosis", np.random.default_rng(0))
    _perturb(model, "ballooning", np.random.default_rng(1))
    model.backbone.set_frozen(True)
    logits = model.forward(images(2))
    ad.softmax_cross_entropy(logits[0], np.array([0, 1])).backward()
    for name, p in model.peft.named_parameters():
        if name.startswith("peft.steatosis."):
            assert p.grad is not None and np.any(p.grad != 0), name
        else:
            assert p.grad is None or not np.any(p.grad), name


def test_stem_matches_full_branch():
    model = tiny_model("adapter")
    _perturb(model, "inflammation", np.random.default_rng(2))
    trunk = model.backbone.forward_trunk(images(2))
    stem = model.backbone.forward_stem(trunk)
    a = model.backbone.forward_branches(trunk, TASKS, model.peft)
    b = model.backbone.forward_branches(None, TASKS, model.peft, stem=stem)
    for x, y in zip(a, b):
        assert np.array_equal(x.data, y.data)
    lora = tiny_model("lora")
    with pytest.raises(ConfigurationError):
        lora.backbone.forward_branches(trunk, TASKS, lora.peft, stem=stem)


# -- freezing ---------------------------------------------------------------------------------

def test_freeze_then_step_leaves_backbone_bitwise():
    model = tiny_model()
    model.backbone.set_frozen(True)
    before = {n: p.data.copy() for n, p in model.backbone.named_parameters()}
    opt = AdamW(model.parameters(), lr=0.1)
    for p in model.backbone.parameters():
        p.grad = np.ones_like(p.data)     # stray gradients must be ignored
    logits = model.forward(images(2))
    loss = mtl_loss(task_losses(logits, [np.array([0, 1])] * 3, ObjectiveConfig()), model.uncertainty)
    loss.backward()
    opt.step()
    for n, p in model.backbone.named_parameters():
        assert np.array_equal(p.data, before[n]), n


def test_trainable_set_is_peft_heads_uncertainty():
    model = MultiTaskModel()
    model.backbone.set_frozen(True)
    names = {n for n, p in model.named_parameters() if p.trainable}
    expected = {n for n, _ in model.peft.named_parameters()}
    for h in model.heads.values():
        expected |= {n for n, _ in h.named_parameters()}
    expected.add("uncertainty.log_var")
    assert names == expected


def test_default_trainable_fraction_below_five_percent():
    model = MultiTaskModel()
    model.backbone.set_frozen(True)
    counts = model.parameter_counts()
    assert counts["fraction"] < 0.05
    assert counts["trainable"] == (sum(p.size for p in model.peft.parameters())
                                   + sum(p.size for h in model.heads.values() for p in h.parameters())
                                   + 3)


def test_frozen_trunk_constant_across_steps():
    model = tiny_model(final_stage_blocks=1, depth=3)
    model.backbone.set_frozen(True)
    x = images(2)
    ref = model.backbone.forward_trunk(x).data.copy()
    opt = AdamW(model.trainable_parameters(), lr=0.05)
    for _ in range(3):
        opt.zero_grad()
        logits = model.forward(x, training=True, rng=np.random.default_rng(0))
        lt = task_losses(logits, [np.array([0, 1])] * 3, ObjectiveConfig())
        total_loss(mtl_loss(lt, model.uncertainty), ortho_loss(model.peft), 0.1).backward()
        opt.step()
    assert np.array_equal(model.backbone.forward_trunk(x).data, ref)


# -- warmup -----------------------------------------------------------------------------------

def _batches(seed):
    rng = np.random.default_rng(seed)
    fixed = images(8, seed=seed)
    labels = [rng.integers(0, c, 8) for c in NUM_CLASSES]
    while True:
        yield fixed, labels


def test_warmup_zero_steps_is_noop():
    bb = Backbone(tiny_backbone(), np.random.default_rng(0))
    before = [p.data.copy() for p in bb.parameters()]
    assert warmup_pretrain(bb, _batches(0), 0, NUM_CLASSES) == []
    assert all(np.array_equal(a, p.data) for a, p in zip(before, bb.parameters()))


def test_warmup_reduces_loss_and_is_deterministic():
    def run():
        bb = Backbone(tiny_backbone(), np.random.default_rng(0))
        losses = bb.warmup_pretrain(_batches(1), 200, NUM_CLASSES, lr=3e-3, seed=5)
        return bb, losses

    a, la = run()
    b, lb = run()
    assert la[-1] < la[0]
    assert la == lb
    for p, q in zip(a.parameters(), b.parameters()):
        assert np.array_equal(p.data, q.data)


def test_warmup_needs_unfrozen():
    bb = Backbone(tiny_backbone(), np.random.default_rng(0))
    bb.set_frozen(True)
    with pytest.raises(ConfigurationError):
        warmup_pretrain(bb, _batches(0), 1, NUM_CLASSES)


# -- heads ------------------------------------------------------------------------------------

def test_head_eval_is_deterministic():
    head = TaskHead("steatosis", 16, 4, np.random.default_rng(0))
    x = Tensor(images(2).reshape(2, -1, 16)[:, :4])
    assert np.array_equal(head(x).data, head(x).data)
    y1 = head(x, training=True, rng=np.random.default_rng(1)).data
    y2 = head(x, training=True, rng=np.random.default_rng(2)).data
    assert not np.array_equal(y1, y2)


def test_zero_classifier_gives_uniform():
    head = TaskHead("ballooning", 16, 3, np.random.default_rng(0))
    head.classifier.weight.data[...] = 0
    head.classifier.bias.data[...] = 0
    z = head(Tensor(np.random.default_rng(0).random((2, 4, 16))))
    assert np.array_equal(z.data, np.zeros((2, 3)))
    np.testing.assert_allclose(ad.softmax(z).data, 1 / 3)


def test_head_grad_check(f64):
    rng = np.random.default_rng(3)
    head = TaskHead("inflammation", 6, 4, rng)
    x = ad.Parameter(rng.standard_normal((2, 5, 6)))
    y = np.array([1, 3])
    f = lambda: ad.softmax_cross_entropy(head(x, True, np.random.default_rng(0)), y)
    assert grad_check(f, [x] + head.parameters(), step=1e-5) < 1e-5


def test_head_width_mismatch():
    head = TaskHead("steatosis", 16, 4, np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        head(Tensor(np.zeros((1, 4, 8))))


def test_no_cross_task_fusion_at_heads():
    model = tiny_model()
    x = images(2)
    before = [z.data.copy() for z in model.forward(x)]
    for p in model.heads["ballooning"].parameters():
        p.data += 1.0
    after = [z.data for z in model.forward(x)]
    assert np.array_equal(before[0], after[0]) and np.array_equal(before[2], after[2])
    assert not np.array_equal(before[1], after[1])


# -- composed objective -----------------------------------------------------------------------

def _well_conditioned(model, rng):
    """Re-draw every parameter at unit scale so no gradient sits near round-off."""
    for name, p in model.named_parameters():
        if p.data.ndim == 2:
            p.data[...] = rng.standard_normal(p.shape) / np.sqrt(p.shape[0])
        else:
            p.data[...] = 0.5 * rng.standard_normal(p.shape) + (1.0 if name.endswith("gain") else 0.0)


@pytest.mark.parametrize("kind", ["adapter", "lora"])
def test_full_objective_grad_check(kind):
    model = tiny_model(kind)
    rng = np.random.default_rng(0)
    _well_conditioned(model, rng)
    model.uncertainty.log_var.data[...] = [0.3, -0.2, 0.1]
    x = images(2)
    labels = [rng.integers(0, c, 2) for c in NUM_CLASSES]
    cfg = ObjectiveConfig(lam=0.1)

    def f():
        logits = model.forward(x, training=True, rng=np.random.default_rng(7))
        lm = mtl_loss(task_losses(logits, labels, cfg), model.uncertainty)
        return total_loss(lm, ortho_loss(model.peft), cfg.lam)

    # key biases have an exactly zero gradient; the floor keeps round-off there from
    # dominating the relative error
    assert grad_check(f, model.parameters(), step=1e-5, floor=1e-6) < 1e-4
