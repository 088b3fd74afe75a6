"""Parameter containers shared by the backbone, PEFT modules and heads."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter


def trunc_normal(rng, shape, std, bound=2.0):
    """Normal(0, std) samples redrawn until they fall within +-bound*std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


class Module:
    """Walks attributes to enumerate parameters; names are set at construction."""

    def named_parameters(self):
        seen = set()
        for value in vars(self).values():
            for p in _iter_params(value):
                if id(p) not in seen:
                    seen.add(id(p))
                    yield p.name, p

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self, trainable=None):
        return sum(p.size for p in self.parameters() if trainable is None or p.trainable == trainable)


def _iter_params(value):
    if isinstance(value, Parameter):
        yield value
    elif isinstance(value, Module):
        for _, p in value.named_parameters():
            yield p
    elif isinstance(value, (list, tuple)):
        for v in value:
            yield from _iter_params(v)
    elif isinstance(value, dict):
        for k in sorted(value, key=str):
            yield from _iter_params(value[k])


class Linear(Module):
    def __init__(self, name, d_in, d_out, rng, bias=True, std=0.02):
        self.weight = Parameter(trunc_normal(rng, (d_in, d_out), std), f"{name}.weight")
        self.bias = Parameter(np.zeros(d_out), f"{name}.bias") if bias else None

    def __call__(self, x):
        return ad.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, name, dim, eps=1e-5):
        self.gain = Parameter(np.ones(dim), f"{name}.gain")
        self.bias = Parameter(np.zeros(dim), f"{name}.bias")
        self.eps = eps

    def __call__(self, x):
        return ad.layer_norm(x, self.gain, self.bias, self.eps)
