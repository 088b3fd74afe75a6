import numpy as np
import pytest

from orthopeft.autodiff import Parameter
from orthopeft.errors import NumericError
from orthopeft.optim import AdamW, PlateauScheduler, default_decay_filter, plateau_lr_series


@pytest.fixture(autouse=True)
def _f64(f64):
    yield


def adamw_oracle(x, grads, lr, wd, b1=0.9, b2=0.999, eps=1e-8, decay=True):
    """Scalar-by-scalar AdamW recurrence written out longhand."""
    x = np.array(x, dtype=float)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        if decay:
            x = x * (1 - lr * wd)
        x = x - lr * mh / (np.sqrt(vh) + eps)
    return x


def test_adamw_matches_recurrence():
    rng = np.random.default_rng(0)
    w = Parameter(rng.standard_normal((3, 2)))
    b = Parameter(rng.standard_normal(2))
    w0, b0 = w.data.copy(), b.data.copy()
    gw = [rng.standard_normal((3, 2)) for _ in range(3)]
    gb = [rng.standard_normal(2) for _ in range(3)]
    opt = AdamW([w, b], lr=0.01, weight_decay=0.1)
    for k in range(3):
        w.grad, b.grad = gw[k].copy(), gb[k].copy()
        opt.step()
    np.testing.assert_allclose(w.data, adamw_oracle(w0, gw, 0.01, 0.1), rtol=1e-13)
    # biases are exempt from decay
    np.testing.assert_allclose(b.data, adamw_oracle(b0, gb, 0.01, 0.1, decay=False), rtol=1e-13)


def test_first_step_moves_by_lr():
    p = Parameter(np.array([1.0, -2.0]))
    p.grad = np.array([0.3, -5.0])
    AdamW([p], lr=0.1, weight_decay=0.0).step()
    np.testing.assert_allclose(p.data, [0.9, -1.9], rtol=1e-7)


def test_no_grad_and_frozen_are_untouched():
    a = Parameter(np.ones((2, 2)))
    b = Parameter(np.ones((2, 2)))
    b.trainable = False
    b.grad = np.ones((2, 2))
    opt = AdamW([a, b], lr=0.5, weight_decay=0.5)
    opt.step()
    assert np.array_equal(a.data, np.ones((2, 2)))     # no gradient, no decay either
    assert np.array_equal(b.data, np.ones((2, 2)))


def test_non_finite_gradient_raises():
    p = Parameter(np.zeros(2), "w")
    p.grad = np.array([np.nan, 0.0])
    with pytest.raises(NumericError, match="'w'"):
        AdamW([p]).step()
    assert np.array_equal(p.data, np.zeros(2))


def test_decay_filter():
    assert default_decay_filter(Parameter(np.zeros((2, 2))))
    assert not default_decay_filter(Parameter(np.zeros(2)))


# -- plateau schedule -------------------------------------------------------------------

def test_flat_series_decays_0_3_then_0_09():
    lrs = plateau_lr_series([0.5] * 12, 1.0, factor=0.3, patience=5)
    # value 0 improves on nothing; values 1..5 are the five bad epochs
    assert lrs[:5] == [1.0] * 5
    assert lrs[5] == pytest.approx(0.3)
    assert lrs[6:10] == [pytest.approx(0.3)] * 4
    assert lrs[10] == pytest.approx(0.09)


def test_improving_series_never_decays():
    assert plateau_lr_series(np.linspace(0, 1, 30), 1.0, patience=2) == [1.0] * 30


def test_min_delta_and_mode_min():
    # improvements smaller than min_delta do not reset the counter
    lrs = plateau_lr_series([0.5, 0.50005, 0.5001], 1.0, patience=2, min_delta=1e-3)
    assert lrs[-1] == pytest.approx(0.3)
    lrs = plateau_lr_series([3.0, 2.0, 1.0, 1.0, 1.0], 1.0, patience=2, mode="min")
    assert lrs == [1.0, 1.0, 1.0, 1.0, pytest.approx(0.3)]


def test_cooldown_and_min_lr():
    s = PlateauScheduler(1.0, factor=0.5, patience=1, cooldown=2, min_lr=0.2)
    lrs = [s.step(0.0) for _ in range(8)]
    assert lrs[1] == 0.5
    assert lrs[2] == lrs[3] == 0.5         # cooling down
    assert min(lrs) == 0.2 and s.state_dict()["lr"] == 0.2


def test_bad_factor():
    with pytest.raises(ValueError):
        PlateauScheduler(1.0, factor=1.0)
