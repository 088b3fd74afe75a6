"""AdamW and a reduce-on-plateau learning-rate schedule."""
from __future__ import annotations

import numpy as np

from .errors import NumericError


def default_decay_filter(param):
    """Decay matrices only; biases, norm gains and log-variances are exempt."""
    return param.data.ndim >= 2


class AdamW:
    """Adam with decoupled weight decay: p <- p*(1 - lr*wd) - lr * m_hat / (sqrt(v_hat) + eps)."""

    def __init__(self, params, lr=8e-5, weight_decay=0.01, betas=(0.9, 0.999), eps=1e-8,
                 decay_filter=default_decay_filter):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.decay_filter = decay_filter
        self.t = 0
        self.state = {}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p in self.params:
            if p.trainable and p.grad is not None and not np.isfinite(p.grad).all():
                raise NumericError(f"non-finite gradient in parameter {p.name!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p in self.params:
            if not p.trainable or p.grad is None:
                continue
            g = p.grad
            st = self.state.get(id(p))
            if st is None:
                st = self.state[id(p)] = (np.zeros_like(p.data), np.zeros_like(p.data))
            m, v = st
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay and self.decay_filter(p):
                p.data *= p.data.dtype.type(1.0 - self.lr * self.weight_decay)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= (self.lr * update).astype(p.data.dtype, copy=False)


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement.

    ``mode="max"``: a value improves when it exceeds the best seen by more
    than ``min_delta``. The first value always counts as an improvement, so a
    flat series of ``patience + 1`` values triggers exactly one decay.
    """

    def __init__(self, lr, factor=0.3, patience=5, min_delta=1e-4, cooldown=0, mode="max",
                 min_lr=0.0):
        if not 0.0 < factor < 1.0:
            raise ValueError("plateau factor must lie in (0, 1)")
        if mode not in ("max", "min"):
            raise ValueError("mode must be 'max' or 'min'")
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_delta = min_delta
        self.cooldown = cooldown
        self.mode = mode
        self.min_lr = min_lr
        self.best = None
        self.num_bad = 0
        self.cooldown_left = 0
        self.num_decays = 0

    def _improved(self, value):
        if self.best is None:
            return True
        if self.mode == "max":
            return value > self.best + self.min_delta
        return value < self.best - self.min_delta

    def step(self, value):
        if self._improved(value):
            self.best = value
            self.num_bad = 0
        else:
            self.num_bad += 1
        if self.cooldown_left > 0:
            self.cooldown_left -= 1
            self.num_bad = 0
        if self.num_bad >= self.patience:
            self.lr = max(self.lr * self.factor, self.min_lr)
            self.num_decays += 1
            self.num_bad = 0
            self.cooldown_left = self.cooldown
        return self.lr

    def state_dict(self):
        return {k: getattr(self, k) for k in ("lr", "best", "num_bad", "cooldown_left", "num_decays")}


def plateau_lr_series(values, lr0, **kwargs):
    """Learning rate after each value of ``values``."""
    sched = PlateauScheduler(lr0, **kwargs)
    return [sched.step(v) for v in values]
