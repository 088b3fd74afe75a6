import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from orthopeft import NUM_CLASSES, TASKS
from orthopeft import autodiff as ad
from orthopeft.autodiff import Parameter, Tensor
from orthopeft.errors import ConfigurationError, InputError
from orthopeft.objective import (
    LAMBDA_SWEEP, ObjectiveConfig, UncertaintyWeights, mtl_loss, ortho_loss, task_losses,
    total_loss,
)
from orthopeft.optim import AdamW
from orthopeft.peft import AdapterModule, PEFTRegistry, build_registry

from conftest import tiny_model


@pytest.fixture(autouse=True)
def _f64(f64):
    yield


def registry_from(mats, tasks=None):
    """One adapter per (task, layer) whose down-projection is given."""
    tasks = tasks or [f"t{i}" for i in range(len(mats[0]))]
    reg = PEFTRegistry(tasks)
    rng = np.random.default_rng(0)
    for layer, per_task in enumerate(mats):
        for t, a in zip(tasks, per_task):
            a = np.asarray(a, dtype=float)
            m = AdapterModule(t, layer, a.shape[0], a.shape[1], rng)
            m.down.data = a.copy()
            reg.add(m)
    return reg


# -- task losses -----------------------------------------------------------------------------

def test_uniform_logits_give_log_class_counts():
    logits = [Tensor(np.zeros((5, c))) for c in NUM_CLASSES]
    labels = [np.zeros(5, dtype=int)] * 3
    lt = task_losses(logits, labels, ObjectiveConfig(task_weights=(1.0, 1.0, 1.0))).data
    np.testing.assert_allclose(lt, np.log([4, 3, 4]))
    lt = task_losses(logits, labels, ObjectiveConfig()).data
    np.testing.assert_allclose(lt, np.log([4, 3, 4]) * [1.0, 1.2, 1.1])


def test_focal_gamma_zero_equals_ce_path():
    rng = np.random.default_rng(0)
    logits = [Tensor(rng.standard_normal((6, c))) for c in NUM_CLASSES]
    labels = [rng.integers(0, c, 6) for c in NUM_CLASSES]
    ce = task_losses(logits, labels, ObjectiveConfig()).data
    fl = task_losses(logits, labels, ObjectiveConfig(loss_kind="focal", focal_gamma=0.0)).data
    np.testing.assert_allclose(fl, ce, rtol=1e-12)


def test_task_losses_input_errors():
    z = [Tensor(np.zeros((2, 4)))] * 3
    with pytest.raises(InputError):
        task_losses(z, [np.zeros(2, dtype=int)] * 2, ObjectiveConfig())
    with pytest.raises(InputError):
        task_losses(z, [np.zeros(2, dtype=int)] * 2 + [np.zeros(3, dtype=int)], ObjectiveConfig())


# -- uncertainty weighting ----------------------------------------------------------------------

def test_mtl_examples():
    u = UncertaintyWeights(3)
    assert float(mtl_loss(Tensor([1.0, 1.0, 1.0]), u).data) == pytest.approx(1.5)
    s = Parameter(np.array([0.0, np.log(2.0)]))
    val = float(mtl_loss(Tensor([2.0, 4.0]), s).data)
    assert val == pytest.approx(2 + 0.5 * np.log(2.0))
    assert val == pytest.approx(2.3466, abs=1e-4)


def test_log_var_converges_to_closed_form():
    L = Tensor([2.0, 0.5, 1.0])
    u = UncertaintyWeights(3)
    opt = AdamW(u.parameters(), lr=0.05, weight_decay=0.0)
    for _ in range(2000):
        opt.zero_grad()
        mtl_loss(L, u).backward()
        opt.step()
        u.apply_clamp()
    np.testing.assert_allclose(u.sigma_sq, L.data, rtol=1e-2)


def test_clamp_holds():
    u = UncertaintyWeights(2, clamp=(-1.0, 1.0))
    u.log_var.data[...] = [5.0, -5.0]
    u.apply_clamp()
    assert u.log_var.data.tolist() == [1.0, -1.0]


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.05, 5.0), min_size=3, max_size=3),
       st.lists(st.floats(-3.0, 3.0), min_size=3, max_size=3))
def test_mtl_invariant_to_task_order(losses, log_var):
    base = float(mtl_loss(Tensor(losses), Parameter(np.array(log_var))).data)
    for perm in itertools.permutations(range(3)):
        v = float(mtl_loss(Tensor(np.array(losses)[list(perm)]),
                           Parameter(np.array(log_var)[list(perm)])).data)
        assert v == pytest.approx(base, rel=1e-12)


# -- orthogonality -------------------------------------------------------------------------------

def test_ortho_zero_for_orthogonal_columns():
    a1, a2 = [[1.0], [0.0]], [[0.0], [1.0]]
    assert float(ortho_loss(registry_from([[a1, a2]])).data) == 0.0


def test_ortho_identical_subspaces():
    a = [[1.0], [0.0]]
    assert float(ortho_loss(registry_from([[a, a]])).data) == pytest.approx(2.0)


def test_ortho_homogeneity():
    rng = np.random.default_rng(0)
    mats = [rng.standard_normal((5, 2)) for _ in range(3)]
    reg = registry_from([mats])

    def pair(i, j):
        return np.linalg.norm(mats[i].T @ mats[j]) ** 2

    before = float(ortho_loss(reg).data)
    reg.adapter("t0", 0).down.data *= 2
    after = float(ortho_loss(reg).data)
    with_a1 = 2 * (pair(0, 1) + pair(0, 2))
    np.testing.assert_allclose(after, before + 3 * with_a1, rtol=1e-12)


def test_ortho_matches_pair_sum_oracle():
    rng = np.random.default_rng(4)
    mats = [[rng.standard_normal((6, 2)) for _ in range(3)] for _ in range(2)]
    ref = sum(np.sum((a.T @ b) ** 2) for layer in mats
              for i, a in enumerate(layer) for j, b in enumerate(layer) if i != j)
    assert float(ortho_loss(registry_from(mats)).data) == pytest.approx(ref, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_ortho_nonnegative_and_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    mats = [[rng.standard_normal((6, 2)) for _ in range(3)] for _ in range(2)]
    base = float(ortho_loss(registry_from(mats)).data)
    assert base >= 0
    perm = [[layer[i] for i in (2, 0, 1)] for layer in mats]
    assert float(ortho_loss(registry_from(perm)).data) == pytest.approx(base, rel=1e-12)


def test_ortho_lora_sums_per_target():
    reg = build_registry("lora", TASKS, [0], 8, 2, np.random.default_rng(0))
    ref = 0.0
    for tgt in ("q", "k", "v"):
        As = [reg.lora(t, 0)[tgt].A.data for t in TASKS]
        ref += sum(np.sum((a.T @ b) ** 2) for i, a in enumerate(As) for j, b in enumerate(As) if i != j)
    assert float(ortho_loss(reg).data) == pytest.approx(ref, rel=1e-12)


def test_ortho_descent_reaches_zero():
    reg = build_registry("adapter", TASKS, [0, 1], 64, 8, np.random.default_rng(0))
    params = [m.down for m in reg.modules.values()]
    opt = AdamW(params, lr=1e-2, weight_decay=0.0)
    for step in range(2000):
        opt.zero_grad()
        loss = ortho_loss(reg)
        if float(loss.data) < 1e-6:
            break
        loss.backward()
        opt.step()
    assert float(ortho_loss(reg).data) < 1e-6


# -- total ----------------------------------------------------------------------------------------

def test_total_lambda_zero_is_mtl():
    m = Tensor(1.25)
    assert total_loss(m, Tensor(7.0), 0.0) is m
    assert float(total_loss(m, Tensor(2.0), 0.1).data) == pytest.approx(1.45)
    with pytest.raises(ConfigurationError):
        total_loss(m, Tensor(2.0), -1.0)
    assert LAMBDA_SWEEP == (0.0, 0.01, 0.1, 1.0)


def _losses(model, x, labels, cfg, lam):
    logits = model.forward(x)
    lm = mtl_loss(task_losses(logits, labels, cfg), model.uncertainty)
    return total_loss(lm, ortho_loss(model.peft), lam)


def test_total_grad_wrt_subspaces_is_lambda_times_ortho_grad_when_heads_detached():
    # zero-initialized adapters: the task losses do not depend on the down-projections,
    # so the only gradient they receive is the orthogonality term's
    model = tiny_model()
    rng = np.random.default_rng(0)
    x = rng.random((2, 8, 8, 3))
    labels = [rng.integers(0, c, 2) for c in NUM_CLASSES]
    downs = [m.down for m in model.peft.modules.values()]
    lam = 0.1
    _losses(model, x, labels, ObjectiveConfig(lam=lam), lam).backward()
    got = [d.grad.copy() for d in downs]
    for d in downs:
        d.grad = None
    ortho_loss(model.peft).backward()
    for g, d in zip(got, downs):
        np.testing.assert_allclose(g, lam * d.grad, rtol=1e-12)
    numeric = ad.numeric_grad(lambda: _losses(model, x, labels, ObjectiveConfig(lam=lam), lam),
                              downs[0], step=1e-6)
    np.testing.assert_allclose(got[0], numeric, rtol=1e-5, atol=1e-9)


def test_scaling_sanity_lambda_zero_unit_variance():
    model = tiny_model()
    rng = np.random.default_rng(1)
    x = rng.random((2, 8, 8, 3))
    labels = [rng.integers(0, c, 2) for c in NUM_CLASSES]
    cfg = ObjectiveConfig(lam=0.0)
    head_w = model.heads["steatosis"].classifier.weight
    _losses(model, x, labels, cfg, 0.0).backward()
    got = head_w.grad.copy()
    head_w.grad = None
    lt = task_losses(model.forward(x), labels, cfg)
    ad.scale(ad.sum_(lt), 0.5).backward()
    np.testing.assert_allclose(got, head_w.grad, rtol=1e-12)


def test_objective_config_validation():
    with pytest.raises(ConfigurationError):
        ObjectiveConfig(lam=-0.1)
    with pytest.raises(ConfigurationError):
        ObjectiveConfig(task_weights=(1.0, 0.0, 1.0))
    with pytest.raises(ConfigurationError):
        ObjectiveConfig(loss_kind="hinge")
