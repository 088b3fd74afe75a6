"""Loss terms: per-task classification, uncertainty weighting, orthogonality, total."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .errors import ConfigurationError, InputError
from .peft import collect_subspaces

DEFAULT_TASK_WEIGHTS = (1.0, 1.2, 1.1)
LAMBDA_SWEEP = (0.0, 0.01, 0.1, 1.0)


@dataclass
class ObjectiveConfig:
    lam: float = 0.1
    task_weights: tuple = DEFAULT_TASK_WEIGHTS
    loss_kind: str = "ce"          # "ce" or "focal"
    focal_gamma: float = 2.0
    clamp: tuple = (-3.0, 3.0)

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigurationError("lambda must be >= 0")
        if any(w <= 0 for w in self.task_weights):
            raise ConfigurationError("task weights must be positive")
        if self.loss_kind not in ("ce", "focal"):
            raise ConfigurationError(f"unknown loss kind {self.loss_kind!r}")
        if self.clamp[0] >= self.clamp[1]:
            raise ConfigurationError("clamp range must be increasing")


class UncertaintyWeights:
    """Learnable log sigma_t^2 per task, kept inside [clamp_lo, clamp_hi]."""

    def __init__(self, num_tasks, clamp=(-3.0, 3.0)):
        self.log_var = Parameter(np.zeros(num_tasks), "uncertainty.log_var")
        self.clamp_lo, self.clamp_hi = clamp

    def named_parameters(self):
        yield self.log_var.name, self.log_var

    def parameters(self):
        return [self.log_var]

    def apply_clamp(self):
        np.clip(self.log_var.data, self.clamp_lo, self.clamp_hi, out=self.log_var.data)

    @property
    def sigma_sq(self):
        return np.exp(self.log_var.data)


def task_losses(logits, labels, cfg):
    """Vector (T,) of w_t * mean classification loss of task t."""
    if len(labels) != len(logits):
        raise InputError(f"got {len(logits)} logits tensors but {len(labels)} label vectors")
    if len(cfg.task_weights) != len(logits):
        raise ConfigurationError("task_weights length differs from the number of tasks")
    batch = {z.shape[0] for z in logits} | {len(np.atleast_1d(y)) for y in labels}
    if len(batch) != 1:
        raise InputError("inconsistent batch size across tasks")
    out = []
    for z, y, w in zip(logits, labels, cfg.task_weights):
        if y is None:
            raise InputError("missing labels for a task")
        if cfg.loss_kind == "focal":
            loss = ad.focal_loss(z, y, cfg.focal_gamma)
        else:
            loss = ad.softmax_cross_entropy(z, y)
        out.append(ad.scale(loss, w) if w != 1.0 else loss)
    return ad.stack(out)


def mtl_loss(losses, u):
    """sum_t L_t / (2 sigma_t^2) + 0.5 log sigma_t^2, with s_t = log sigma_t^2 learnable."""
    s = u.log_var if isinstance(u, UncertaintyWeights) else u
    if losses.shape != s.shape:
        raise InputError(f"loss vector {losses.shape} vs log-variance {s.shape}")
    precision = ad.exp(ad.ops.neg(s))
    return ad.scale(ad.sum_(ad.add(ad.mul(precision, losses), s)), 0.5)


def ortho_loss(registry):
    """Sum over insertion sites and ordered task pairs i != j of ||A_i^T A_j||_F^2."""
    terms = []
    for layer, target in registry.sites():
        mats = [a for _, a in collect_subspaces(registry, layer, target)]
        for i, ai in enumerate(mats):
            ai_t = ad.transpose(ai)
            for j, aj in enumerate(mats):
                if i != j:
                    terms.append(ad.frobenius_sq(ad.matmul(ai_t, aj)))
    if not terms:
        return ad.Tensor(0.0)
    return ad.sum_(ad.stack(terms))


def total_loss(l_mtl, l_ortho, lam):
    if lam < 0:
        raise ConfigurationError("lambda must be >= 0")
    if lam == 0:
        return l_mtl
    return ad.add(l_mtl, ad.scale(l_ortho, lam))
