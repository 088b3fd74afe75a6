"""Per-task bottleneck adapters and LoRA modules.

Both kinds expose a ``d x r`` matrix (adapter ``down``, LoRA ``A``) whose
columns span the task's feature subspace; the orthogonality penalty acts on
these matrices.
"""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .errors import ConfigurationError
from .layers import Module, trunc_normal

LORA_TARGETS = ("q", "k", "v")


class AdapterModule(Module):
    """x + up(GELU(LayerNorm(x @ down))), with ``up`` zero at construction."""

    kind = "adapter"

    def __init__(self, task, layer, d, r, rng, eps=1e-5):
        if not 0 < r < d:
            raise ConfigurationError(f"adapter width r={r} must satisfy 0 < r < d={d}")
        name = f"peft.{task}.{layer}"
        self.task, self.layer, self.d, self.r, self.eps = task, layer, d, r, eps
        self.down = Parameter(trunc_normal(rng, (d, r), 1.0 / np.sqrt(d)), f"{name}.down")
        self.norm_gain = Parameter(np.ones(r), f"{name}.norm_gain")
        self.norm_bias = Parameter(np.zeros(r), f"{name}.norm_bias")
        self.up = Parameter(np.zeros((r, d)), f"{name}.up")

    @property
    def subspace(self):
        return self.down

    def taps(self, x):
        """Intermediate tensors at the down-projection, normalization and up-projection."""
        if x.shape[-1] != self.d:
            raise ConfigurationError(f"adapter expects width {self.d}, got {x.shape[-1]}")
        down = ad.matmul(x, self.down)
        norm = ad.layer_norm(down, self.norm_gain, self.norm_bias, self.eps)
        up = ad.matmul(ad.gelu(norm), self.up)
        return down, norm, up

    def __call__(self, x):
        return adapter_forward(x, self)


def adapter_forward(x, m):
    _, _, up = m.taps(x)
    return ad.add(x, up)


class LoRAModule(Module):
    """Low-rank update scale * A @ B for one frozen projection; ``B`` starts at zero."""

    kind = "lora"

    def __init__(self, task, layer, target, d, r, rng, alpha=None, d_out=None):
        d_out = d if d_out is None else d_out
        if not 0 < r < d:
            raise ConfigurationError(f"LoRA rank r={r} must satisfy 0 < r < d={d}")
        name = f"peft.{task}.{layer}.{target}"
        self.task, self.layer, self.target, self.d, self.r = task, layer, target, d, r
        self.A = Parameter(trunc_normal(rng, (d, r), 1.0 / np.sqrt(d)), f"{name}.A")
        self.B = Parameter(np.zeros((r, d_out)), f"{name}.B")
        self.scale = (r if alpha is None else alpha) / r

    @property
    def subspace(self):
        return self.A

    def delta(self):
        return self.scale * (self.A.data @ self.B.data)


def lora_forward(x, W, m, bias=None):
    """x @ W + scale * (x @ A) @ B (+ bias)."""
    if x.shape[-1] != W.shape[0] or W.shape[0] != m.A.shape[0] or W.shape[1] != m.B.shape[1]:
        raise ConfigurationError(
            f"LoRA shapes do not conform: x{x.shape}, W{W.shape}, A{m.A.shape}, B{m.B.shape}")
    base = ad.matmul(x, W)
    low = ad.matmul(ad.matmul(x, m.A), m.B)
    if m.scale != 1.0:
        low = ad.scale(low, m.scale)
    y = ad.add(base, low)
    return y if bias is None else ad.add(y, bias)


class PEFTRegistry(Module):
    """All per-task PEFT modules, keyed by (task, layer[, target])."""

    def __init__(self, tasks):
        self.tasks = tuple(tasks)
        self.modules = OrderedDict()

    def add(self, module):
        if module.task not in self.tasks:
            raise ConfigurationError(f"unknown task {module.task!r}")
        key = (module.task, module.layer) + ((module.target,) if module.kind == "lora" else ())
        self.modules[key] = module
        return module

    def named_parameters(self):
        for key in sorted(self.modules, key=str):
            yield from self.modules[key].named_parameters()

    @property
    def layers(self):
        return sorted({k[1] for k in self.modules})

    @property
    def kind(self):
        kinds = {m.kind for m in self.modules.values()}
        return kinds.pop() if len(kinds) == 1 else None

    def layer_kind(self, layer):
        kinds = {m.kind for k, m in self.modules.items() if k[1] == layer}
        if len(kinds) > 1:
            raise ConfigurationError(f"mixed PEFT kinds at layer {layer}")
        return kinds.pop() if kinds else None

    def adapter(self, task, layer):
        return self.modules.get((task, layer))

    def lora(self, task, layer):
        """Mapping target -> LoRAModule for one task and layer (possibly empty)."""
        return {k[2]: m for k, m in self.modules.items()
                if k[0] == task and k[1] == layer and len(k) == 3}

    def has_task(self, task):
        return any(k[0] == task for k in self.modules)

    def sites(self):
        """Insertion sites the orthogonality penalty sums over: (layer, target or None)."""
        out = []
        for layer in self.layers:
            if self.layer_kind(layer) == "adapter":
                out.append((layer, None))
            else:
                targets = sorted({k[2] for k in self.modules if k[1] == layer and len(k) == 3},
                                 key=LORA_TARGETS.index)
                out.extend((layer, t) for t in targets)
        return out

    def task_parameter_count(self, task):
        return sum(p.size for k, m in self.modules.items() if k[0] == task for p in m.parameters())


def collect_subspaces(registry, layer, target=None):
    """[(task, A_t)] for one insertion site, in the registry's task order.

    The matrices are the live parameters, not copies.
    """
    kind = registry.layer_kind(layer)
    out = []
    for task in registry.tasks:
        if kind == "adapter":
            m = registry.adapter(task, layer)
        elif kind == "lora":
            mods = registry.lora(task, layer)
            if target is None:
                if len(mods) != 1:
                    raise ConfigurationError(
                        f"layer {layer} has LoRA targets {sorted(mods)}; pass target=")
                target = next(iter(mods))
            m = mods.get(target)
        else:
            m = None
        if m is None:
            raise ConfigurationError(f"task {task!r} has no PEFT module at layer {layer}")
        out.append((task, m.subspace))
    return out


def build_registry(kind, tasks, layers, d, r, rng, lora_targets=LORA_TARGETS, lora_alpha=None):
    """One module per (task, layer) for adapters, per (task, layer, target) for LoRA."""
    reg = PEFTRegistry(tasks)
    for task in tasks:
        for layer in layers:
            if kind == "adapter":
                reg.add(AdapterModule(task, layer, d, r, rng))
            elif kind == "lora":
                for t in lora_targets:
                    if t not in LORA_TARGETS:
                        raise ConfigurationError(f"unknown LoRA target {t!r}")
                    reg.add(LoRAModule(task, layer, t, d, r, rng, alpha=lora_alpha))
            else:
                raise ConfigurationError(f"unknown PEFT kind {kind!r}")
    return reg
