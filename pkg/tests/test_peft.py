import numpy as np
import pytest

from orthopeft import TASKS
from orthopeft import autodiff as ad
from orthopeft.autodiff import Parameter, Tensor, grad_check
from orthopeft.errors import ConfigurationError
from orthopeft.peft import (
    AdapterModule, LoRAModule, adapter_forward, build_registry, collect_subspaces, lora_forward,
)


@pytest.fixture(autouse=True)
def _f64(f64):
    yield


def test_adapter_zero_up_is_identity():
    rng = np.random.default_rng(0)
    m = AdapterModule("steatosis", 0, 16, 4, rng)
    x = Tensor(rng.standard_normal((2, 5, 16)))
    assert np.array_equal(adapter_forward(x, m).data, x.data)


def test_adapter_hand_example():
    # down picks channel 0, up writes into channel 1; a 1-wide LayerNorm would zero
    # everything, so bypass it with a gain of 0 and a bias carrying the value.
    m = AdapterModule("steatosis", 0, 2, 1, np.random.default_rng(0))
    m.down.data[...] = [[1.0], [0.0]]
    m.norm_gain.data[...] = 0.0
    m.norm_bias.data[...] = 1.0
    m.up.data[...] = [[0.0, 1.0]]
    out = adapter_forward(Tensor([[1.0, 0.0]]), m).data
    gelu1 = float(ad.gelu(Tensor(1.0)).data)
    np.testing.assert_allclose(out, [[1.0, gelu1]])


def test_adapter_grad_check():
    rng = np.random.default_rng(1)
    m = AdapterModule("ballooning", 3, 6, 2, rng)
    m.up.data[...] = rng.standard_normal(m.up.shape)
    x = Parameter(rng.standard_normal((2, 3, 6)))
    w = Tensor(rng.standard_normal((2, 3, 6)))
    f = lambda: ad.sum_(ad.mul(adapter_forward(x, m), w))
    assert grad_check(f, [x] + m.parameters(), step=1e-5) < 1e-5


def test_lora_zero_b_is_identity():
    rng = np.random.default_rng(2)
    m = LoRAModule("steatosis", 0, "q", 8, 2, rng)
    W = Parameter(rng.standard_normal((8, 8)))
    x = Tensor(rng.standard_normal((3, 8)))
    assert np.array_equal(lora_forward(x, W, m).data, ad.matmul(x, W).data)


def test_lora_grad_check():
    rng = np.random.default_rng(3)
    m = LoRAModule("steatosis", 0, "v", 6, 2, rng, alpha=4.0)
    m.B.data[...] = rng.standard_normal(m.B.shape)
    W, b = Parameter(rng.standard_normal((6, 6))), Parameter(rng.standard_normal(6))
    x = Parameter(rng.standard_normal((2, 4, 6)))
    w = Tensor(rng.standard_normal((2, 4, 6)))
    f = lambda: ad.sum_(ad.mul(lora_forward(x, W, m, b), w))
    assert grad_check(f, [x, W, b, m.A, m.B], step=1e-5) < 1e-5


@pytest.mark.parametrize("seed", range(10))
def test_lora_update_rank_at_most_r(seed):
    rng = np.random.default_rng(seed)
    r = int(rng.integers(1, 6))
    m = LoRAModule("inflammation", 0, "k", 16, r, rng, alpha=2.0)
    m.B.data[...] = rng.standard_normal(m.B.shape)
    s = np.linalg.svd(m.delta(), compute_uv=False)
    assert int((s > 1e-6 * s[0]).sum()) <= r


def test_lora_scale_default_is_one():
    assert LoRAModule("steatosis", 0, "q", 8, 4, np.random.default_rng(0)).scale == 1.0
    assert LoRAModule("steatosis", 0, "q", 8, 4, np.random.default_rng(0), alpha=2.0).scale == 0.5


def test_rank_must_be_below_width():
    with pytest.raises(ConfigurationError):
        AdapterModule("steatosis", 0, 4, 4, np.random.default_rng(0))


def test_collect_subspaces_order_and_aliasing():
    reg = build_registry("adapter", TASKS, [6, 7], 16, 4, np.random.default_rng(0))
    calls = [collect_subspaces(reg, layer) for layer in reg.layers]
    assert len(calls) == 2 and all(len(c) == 3 for c in calls)
    assert [t for t, _ in calls[0]] == list(TASKS)
    assert [t for t, _ in collect_subspaces(reg, 6)] == list(TASKS)
    a = calls[0][0][1]
    a.data[0, 0] = 123.0
    assert reg.adapter("steatosis", 6).down.data[0, 0] == 123.0


def test_lora_subspaces_need_target():
    reg = build_registry("lora", TASKS, [1], 16, 4, np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        collect_subspaces(reg, 1)
    mats = collect_subspaces(reg, 1, "k")
    assert all(a is reg.lora(t, 1)["k"].A for t, a in mats)


@pytest.mark.parametrize("d,r,k", [(64, 8, 2), (16, 4, 1), (32, 2, 3)])
def test_per_task_parameter_counts(d, r, k):
    layers = list(range(k))
    reg = build_registry("adapter", TASKS, layers, d, r, np.random.default_rng(0))
    for t in TASKS:
        assert reg.task_parameter_count(t) == k * (d * r + 2 * r + r * d)
    reg = build_registry("lora", TASKS, layers, d, r, np.random.default_rng(0))
    for t in TASKS:
        assert reg.task_parameter_count(t) == k * 3 * (d * r + r * d)
    reg = build_registry("lora", TASKS, layers, d, r, np.random.default_rng(0), lora_targets=("k",))
    assert reg.task_parameter_count("steatosis") == k * (d * r + r * d)


def test_sites():
    reg = build_registry("adapter", TASKS, [6, 7], 16, 4, np.random.default_rng(0))
    assert reg.sites() == [(6, None), (7, None)]
    reg = build_registry("lora", TASKS, [6, 7], 16, 4, np.random.default_rng(0))
    assert reg.sites() == [(6, "q"), (6, "k"), (6, "v"), (7, "q"), (7, "k"), (7, "v")]


def test_unknown_kind_and_target():
    with pytest.raises(ConfigurationError):
        build_registry("prefix", TASKS, [0], 16, 4, np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        build_registry("lora", TASKS, [0], 16, 4, np.random.default_rng(0), lora_targets=("o",))
