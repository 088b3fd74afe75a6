"""Independent per-task classification heads."""
from __future__ import annotations

from . import autodiff as ad
from .errors import ConfigurationError
from .layers import LayerNorm, Linear, Module


class TaskHead(Module):
    """mean-pool -> LayerNorm -> Linear+GELU -> dropout -> Linear to class logits."""

    def __init__(self, task, d, num_classes, rng, dropout_p=0.5):
        self.task = task
        self.d = d
        self.num_classes = num_classes
        self.dropout_p = dropout_p
        self.norm = LayerNorm(f"heads.{task}.norm", d)
        self.fc = Linear(f"heads.{task}.fc", d, d, rng)
        self.classifier = Linear(f"heads.{task}.classifier", d, num_classes, rng)

    def __call__(self, tokens, training=False, rng=None):
        return head_forward(tokens, self, training, rng)


def head_forward(tokens, head, training=False, rng=None):
    """Logits (B, C) from a (B, N, d) token grid; dropout only when ``training``."""
    if tokens.shape[-1] != head.d:
        raise ConfigurationError(f"head {head.task!r} expects width {head.d}, got {tokens.shape[-1]}")
    pooled = ad.mean(tokens, axis=1)
    h = ad.gelu(head.fc(head.norm(pooled)))
    h = ad.dropout(h, head.dropout_p, training, rng)
    return head.classifier(h)
