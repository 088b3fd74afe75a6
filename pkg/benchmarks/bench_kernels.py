"""Compiled vs numpy row kernels, and one training step on the default model.

    python3 benchmarks/bench_kernels.py [--repeat 50] [--dtype float32]
"""
import argparse
import timeit

import numpy as np

from orthopeft import _kernels as K
from orthopeft import autodiff as ad


def kernel_cases(dtype, rng):
    # shapes seen in training: batch 16 x 64 tokens, width 64 (norms) / 256 (MLP) / 64 keys
    rows = 16 * 64
    x64 = rng.standard_normal((rows, 64)).astype(dtype)
    x256 = rng.standard_normal((rows, 256)).astype(dtype)
    att = rng.standard_normal((rows * 4, 64)).astype(dtype)
    gain, bias = np.ones(64, dtype), np.zeros(64, dtype)
    _, xhat, rstd = K._pykernels.layer_norm_fwd(x64, gain, bias, 1e-6)
    y = K._pykernels.softmax_fwd(att)
    return {
        "gelu_fwd": lambda: K.gelu_fwd(x256),
        "gelu_bwd": lambda: K.gelu_bwd(x256, x256),
        "layer_norm_fwd": lambda: K.layer_norm_fwd(x64, gain, bias, 1e-6),
        "layer_norm_bwd": lambda: K.layer_norm_bwd(x64, xhat, rstd, gain),
        "softmax_fwd": lambda: K.softmax_fwd(att),
        "softmax_bwd": lambda: K.softmax_bwd(y, att),
    }


def train_step_case(dtype, rng):
    from orthopeft import NUM_CLASSES
    from orthopeft.model import MultiTaskModel
    from orthopeft.objective import ObjectiveConfig, mtl_loss, ortho_loss, task_losses, total_loss

    with ad.precision(dtype):
        model = MultiTaskModel()
    model.backbone.set_frozen(True)
    images = rng.random((16, 32, 32, 3)).astype(dtype)
    labels = [rng.integers(0, c, 16) for c in NUM_CLASSES]
    cfg = ObjectiveConfig()

    def step():
        logits = model.forward(images, training=True, rng=np.random.default_rng(0))
        lm = mtl_loss(task_losses(logits, labels, cfg), model.uncertainty)
        total_loss(lm, ortho_loss(model.peft), 0.1).backward()
    return step


def best_of(fn, repeat):
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    args = ap.parse_args()
    dtype = np.dtype(args.dtype).type
    backends = K.available_backends()
    if "compiled" not in backends:
        print("compiled kernels not built; only the numpy backend is timed")
    rng = np.random.default_rng(0)
    results = {}
    for b in backends:
        K.use_backend(b)
        cases = kernel_cases(dtype, rng)
        cases["train_step (batch 16)"] = train_step_case(dtype, rng)
        for name, fn in cases.items():
            reps = max(3, args.repeat // 10) if name.startswith("train") else args.repeat
            results.setdefault(name, {})[b] = best_of(fn, reps)
    K.use_backend(backends[-1])
    print(f"{'case':24s}" + "".join(f"{b:>14s}" for b in backends) + ("   speedup" if len(backends) > 1 else ""))
    for name, r in results.items():
        line = f"{name:24s}" + "".join(f"{1e3 * r[b]:12.3f}ms" for b in backends)
        if len(backends) > 1:
            line += f"   {r['python'] / r['compiled']:6.2f}x"
        print(line)


if __name__ == "__main__":
    main()
