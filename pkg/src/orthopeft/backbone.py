"""Small pre-norm vision transformer used as the frozen shared backbone.

The last ``final_stage_blocks`` blocks form the final stage, where per-task
PEFT modules are inserted. Everything before it is the shared trunk.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .errors import ConfigurationError, InputError
from .layers import LayerNorm, Linear, Module, trunc_normal
from .peft import lora_forward


@dataclass
class BackboneConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    embed_dim: int = 64
    depth: int = 8
    heads: int = 4
    mlp_ratio: float = 4.0
    final_stage_blocks: int = 2

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigurationError("image_size must be divisible by patch_size")
        if self.embed_dim % self.heads:
            raise ConfigurationError("embed_dim must be divisible by heads")
        if not 0 < self.final_stage_blocks <= self.depth:
            raise ConfigurationError("need 0 < final_stage_blocks <= depth")

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def num_tokens(self):
        return self.grid ** 2

    @property
    def insertion_layers(self):
        return list(range(self.depth - self.final_stage_blocks, self.depth))

    def to_dict(self):
        return asdict(self)


class EncoderBlock(Module):
    """x + Attn(LN(x)), then x + MLP(LN(x)); an adapter acts on the MLP output."""

    def __init__(self, name, d, heads, mlp_ratio, rng):
        hidden = int(round(d * mlp_ratio))
        self.heads = heads
        self.norm1 = LayerNorm(f"{name}.norm1", d)
        self.q = Linear(f"{name}.attn.q", d, d, rng)
        self.k = Linear(f"{name}.attn.k", d, d, rng)
        self.v = Linear(f"{name}.attn.v", d, d, rng)
        self.proj = Linear(f"{name}.attn.proj", d, d, rng)
        self.norm2 = LayerNorm(f"{name}.norm2", d)
        self.fc1 = Linear(f"{name}.mlp.fc1", d, hidden, rng)
        self.fc2 = Linear(f"{name}.mlp.fc2", hidden, d, rng)

    def _project(self, h, lin, lora):
        if lora is None:
            return lin(h)
        return lora_forward(h, lin.weight, lora, lin.bias)

    def attention(self, h, lora=None):
        lora = lora or {}
        b, n, d = h.shape
        dh = d // self.heads

        def split(t):
            return ad.transpose(ad.reshape(t, (b, n, self.heads, dh)), (0, 2, 1, 3))

        q = split(self._project(h, self.q, lora.get("q")))
        k = split(self._project(h, self.k, lora.get("k")))
        v = split(self._project(h, self.v, lora.get("v")))
        scores = ad.scale(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / np.sqrt(dh))
        out = ad.matmul(ad.softmax(scores), v)
        out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (b, n, d))
        return self.proj(out)

    def mlp(self, h):
        return self.fc2(ad.gelu(self.fc1(h)))

    def pre_adapter(self, x, lora=None):
        x = ad.add(x, self.attention(self.norm1(x), lora))
        return x, self.mlp(self.norm2(x))

    @staticmethod
    def post_adapter(x, m, adapter=None):
        if adapter is not None:
            m = adapter(m)
        return ad.add(x, m)

    def __call__(self, x, adapter=None, lora=None):
        x, m = self.pre_adapter(x, lora)
        return self.post_adapter(x, m, adapter)


class Backbone(Module):
    def __init__(self, cfg, rng):
        self.cfg = cfg
        d = cfg.embed_dim
        patch_dim = cfg.patch_size ** 2 * cfg.channels
        self.patch_embed = Linear("backbone.patch_embed", patch_dim, d, rng)
        self.pos_embed = Parameter(trunc_normal(rng, (cfg.num_tokens, d), 0.02), "backbone.pos_embed")
        self.blocks = [
            EncoderBlock(f"backbone.blocks.{i}", d, cfg.heads, cfg.mlp_ratio, rng)
            for i in range(cfg.depth)
        ]

    @property
    def trunk_depth(self):
        return self.cfg.depth - self.cfg.final_stage_blocks

    def embed(self, images):
        cfg = self.cfg
        if images.ndim != 4 or images.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
            raise InputError(
                f"expected images of shape (B, {cfg.image_size}, {cfg.image_size}, {cfg.channels}),"
                f" got {images.shape}")
        x = ad.patchify(images, cfg.patch_size)
        return ad.add(self.patch_embed(x), self.pos_embed)

    def forward_trunk(self, images):
        """Shared tokens (B, N, d) before the first PEFT insertion point."""
        if not isinstance(images, ad.Tensor):
            images = ad.Tensor(images, dtype=self.pos_embed.dtype)
        x = self.embed(images)
        for block in self.blocks[: self.trunk_depth]:
            x = block(x)
        return x

    def _branch_modules(self, peft, task, i):
        adapter = lora = None
        if peft is None:
            return adapter, lora
        kind = peft.layer_kind(i)
        if kind == "adapter":
            adapter = peft.adapter(task, i)
            if adapter is None:
                raise ConfigurationError(f"task {task!r} has no adapter at layer {i}")
        elif kind == "lora":
            lora = peft.lora(task, i)
            if not lora:
                raise ConfigurationError(f"task {task!r} has no LoRA modules at layer {i}")
        return adapter, lora

    def forward_task_branch(self, trunk_out, task=None, peft=None):
        """Final-stage blocks with ``task``'s adapters (after each MLP) or LoRA (in Q/K/V).

        ``peft=None`` runs the plain final stage.
        """
        return self.forward_branches(trunk_out, [task], peft)[0]

    def forward_stem(self, trunk_out):
        """Task-independent part of the first final-stage block: (residual, MLP output).

        Only valid when that block carries adapters (or no PEFT), not LoRA.
        """
        return self.blocks[self.trunk_depth].pre_adapter(trunk_out)

    def forward_branches(self, trunk_out, tasks, peft=None, stem=None):
        """``forward_task_branch`` for several tasks sharing one trunk output.

        When the first final-stage block carries adapters, its attention and
        MLP do not depend on the task and are computed once, or taken from
        ``stem`` (see ``forward_stem``) when given; ``trunk_out`` is then unused.
        """
        if peft is not None:
            for task in tasks:
                if not peft.has_task(task):
                    raise ConfigurationError(f"PEFT registry has no modules for task {task!r}")
        first = self.trunk_depth
        block = self.blocks[first]
        mods = [self._branch_modules(peft, t, first) for t in tasks]
        if all(lora is None for _, lora in mods):
            x_mid, m = block.pre_adapter(trunk_out) if stem is None else stem
            outs = [block.post_adapter(x_mid, m, adapter) for adapter, _ in mods]
        elif stem is not None:
            raise ConfigurationError("a precomputed stem cannot be used with LoRA in the first block")
        else:
            outs = [block(trunk_out, adapter=a, lora=l) for a, l in mods]
        for i in range(first + 1, self.cfg.depth):
            outs = [self.blocks[i](x, *self._branch_modules(peft, t, i))
                    for x, t in zip(outs, tasks)]
        return outs

    def __call__(self, images):
        return self.forward_task_branch(self.forward_trunk(images))

    def set_frozen(self, frozen):
        for p in self.parameters():
            p.trainable = not frozen

    def warmup_pretrain(self, batches, steps, num_classes, lr=1e-3, seed=0):
        return warmup_pretrain(self, batches, steps, num_classes, lr, seed)


def warmup_pretrain(backbone, batches, steps, num_classes, lr=1e-3, seed=0):
    """Briefly train an unfrozen backbone on the mean per-task cross-entropy.

    A temporary shared linear head maps pooled tokens to the concatenated
    logits of all tasks and is discarded afterwards. ``batches`` yields
    ``(images, [labels_t ...])``. Returns the per-step losses.
    """
    from .optim import AdamW

    if steps <= 0:
        return []
    if not all(p.trainable for p in backbone.parameters()):
        raise ConfigurationError("warmup_pretrain needs an unfrozen backbone")
    head = Linear("warmup.head", backbone.cfg.embed_dim, sum(num_classes),
                  np.random.default_rng(seed))
    opt = AdamW(backbone.parameters() + head.parameters(), lr=lr, weight_decay=0.0)
    bounds = np.cumsum((0,) + tuple(num_classes))
    losses = []
    for step, (images, labels) in enumerate(batches):
        if step >= steps:
            break
        opt.zero_grad()
        logits = head(ad.mean(backbone(images), axis=1))
        terms = [
            ad.softmax_cross_entropy(
                ad.index(logits, (slice(None), slice(bounds[t], bounds[t + 1]))), labels[t])
            for t in range(len(num_classes))
        ]
        loss = ad.scale(ad.sum_(ad.stack(terms)), 1.0 / len(terms))
        loss.backward()
        opt.step()
        losses.append(float(loss.data))
    return losses
