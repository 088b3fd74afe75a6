"""Accuracy, adapter activation heatmaps, netpbm image I/O and run reports."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import TASKS
from . import autodiff as ad
from .data import correlation_matrix
from .errors import ConfigurationError, FormatError, InputError

TAPS = ("down", "norm", "up")


def accuracy(logits, labels):
    """Fraction of rows whose argmax equals the label; ties go to the lowest class."""
    z = np.asarray(getattr(logits, "data", logits))
    y = np.asarray(labels)
    if z.ndim != 2 or z.shape[0] == 0:
        raise InputError("accuracy needs a non-empty (batch, classes) logit array")
    if y.shape != (z.shape[0],):
        raise InputError(f"labels shape {y.shape} does not match batch {z.shape[0]}")
    return float(np.mean(np.argmax(z, axis=1) == y))   # np.argmax returns the first maximum


# -- activation maps ---------------------------------------------------------------------

@dataclass
class ActivationMap:
    task: str
    tap: str
    grid: np.ndarray          # (g, g) in [0, 1]
    upsampled: np.ndarray     # (H, W) in [0, 1]
    degenerate: bool = False


def normalize_map(raw):
    """Min-max scale to [0, 1]; a constant map becomes zeros. Returns (map, degenerate)."""
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = raw.min(), raw.max()
    if not hi > lo:
        return np.zeros_like(raw), True
    return (raw - lo) / (hi - lo), False


def upsample(grid, shape, mode="bilinear"):
    """Resize a 2-D map to ``shape`` with pixel-centre alignment and edge clamping."""
    if mode not in ("bilinear", "nearest"):
        raise ConfigurationError(f"unknown upsampling mode {mode!r}")
    zoom = (shape[0] / grid.shape[0], shape[1] / grid.shape[1])
    out = ndimage.zoom(grid, zoom, order=1 if mode == "bilinear" else 0,
                       mode="nearest", grid_mode=True)
    return np.clip(out, 0.0, 1.0)


def token_map(tokens, grid_size):
    """L2 norm over channels per token, laid out on the patch grid."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.shape[0] != grid_size * grid_size:
        raise InputError(f"{tokens.shape[0]} tokens do not form a {grid_size}x{grid_size} grid")
    return np.sqrt((tokens ** 2).sum(axis=-1)).reshape(grid_size, grid_size)


def adapter_taps(model, image, task):
    """Down/norm/up tap tensors of ``task``'s adapter at the last insertion layer.

    Returns ``{tap: (N, channels) array}`` for a single (H, W, C) image.
    """
    if task not in model.tasks:
        raise ConfigurationError(f"model has no task {task!r}")
    bb = model.backbone
    last = bb.cfg.depth - 1
    adapter = model.peft.adapter(task, last) if model.peft.layer_kind(last) == "adapter" else None
    if adapter is None:
        raise ConfigurationError(f"no adapter taps for task {task!r} at layer {last}")
    image = np.asarray(image)
    if image.ndim != 3:
        raise InputError(f"expected one (H, W, C) image, got shape {image.shape}")
    with ad.no_grad():
        x = bb.forward_trunk(image[None])
        for i in range(bb.trunk_depth, last):
            x = bb.blocks[i](x, *bb._branch_modules(model.peft, task, i))
        _, m = bb.blocks[last].pre_adapter(x)
        outs = adapter.taps(m)
    return {tap: t.data[0] for tap, t in zip(TAPS, outs)}


def activation_maps(image, task, model, mode="bilinear"):
    """One ActivationMap per tap for ``task`` on a single image."""
    taps = adapter_taps(model, image, task)
    g = model.backbone.cfg.grid
    shape = np.asarray(image).shape[:2]
    maps = []
    for tap in TAPS:
        grid, degenerate = normalize_map(token_map(taps[tap], g))
        maps.append(ActivationMap(task, tap, grid, upsample(grid, shape, mode), degenerate))
    return maps


# -- netpbm ------------------------------------------------------------------------------

# Colormap: piecewise linear black -> red -> yellow -> white at v = 0, 1/3, 2/3, 1.
COLORMAP_STOPS = np.array([[0, 0, 0], [255, 0, 0], [255, 255, 0], [255, 255, 255]], dtype=np.float64)


def to_bytes(values):
    """[0, 1] floats to 0-255 integers by rounding."""
    return np.clip(np.round(np.asarray(values) * 255.0), 0, 255).astype(np.uint8)


def colormap(values):
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0) * 3.0
    i = np.minimum(v.astype(int), 2)
    frac = (v - i)[..., None]
    rgb = COLORMAP_STOPS[i] * (1 - frac) + COLORMAP_STOPS[i + 1] * frac
    return np.clip(np.round(rgb), 0, 255).astype(np.uint8)


def write_pgm(path, img):
    """Binary 8-bit graymap (P5) from a 2-D uint8 array."""
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim != 2:
        raise InputError("PGM needs a 2-D array")
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        fh.write(img.tobytes())


def write_ppm(path, img):
    """Binary 8-bit pixmap (P6) from an (H, W, 3) uint8 array."""
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InputError("PPM needs an (H, W, 3) array")
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        fh.write(img.tobytes())


def read_netpbm(path):
    """Read a binary P5/P6 file with maxval 255; returns a uint8 array."""
    with open(path, "rb") as fh:
        data = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.find(b"\n", pos) + 1
            if pos == 0:
                break
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        if end == pos:
            break
        fields.append(data[pos:end])
        pos = end
    if len(fields) < 4 or fields[0] not in (b"P5", b"P6"):
        raise FormatError(f"{path}: not a binary PGM/PPM file")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported")
    ch = 1 if fields[0] == b"P5" else 3
    body = data[pos + 1:]
    if len(body) < w * h * ch:
        raise FormatError(f"{path}: pixel data truncated")
    arr = np.frombuffer(body, dtype=np.uint8, count=w * h * ch)
    return arr.reshape(h, w) if ch == 1 else arr.reshape(h, w, 3)


def save_maps(maps, out_dir, prefix=""):
    """Write each map as ``{prefix}{task}_{tap}.pgm`` and a colormapped ``.ppm``."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for m in maps:
        stem = os.path.join(out_dir, f"{prefix}{m.task}_{m.tap}")
        write_pgm(stem + ".pgm", to_bytes(m.upsampled))
        write_ppm(stem + ".ppm", colormap(m.upsampled))
        paths += [stem + ".pgm", stem + ".ppm"]
    return paths


# -- report ------------------------------------------------------------------------------

def _fmt(v):
    return "" if v is None else f"{v:.4f}"


def correlations(dataset):
    out = {}
    for kind in ("pearson", "spearman"):
        c = correlation_matrix(dataset.labels, kind)
        out[kind] = [[round(float(x), 6) for x in row] for row in c]
    out["tasks"] = list(TASKS)
    target = (dataset.config or {}).get("target_corr")
    if target is not None:
        out["target"] = [[float(x) for x in r] for r in target]
    out["n"] = len(dataset)
    return out


def emit_report(records, out_dir, dataset=None, model=None, image_index=0):
    """Write ablation.csv/json, correlations.json, heatmaps/ and summary.md.

    ``dataset`` supplies the label correlations and the heatmap image;
    ``model`` (a trained MultiTaskModel with adapters) supplies the heatmaps.
    Output depends only on the inputs, so repeated calls are byte-identical.
    """
    from .training import aggregate, write_table

    records = list(records)
    if not records:
        raise InputError("emit_report needs at least one run record")
    os.makedirs(out_dir, exist_ok=True)
    rows = sorted(aggregate(records), key=lambda r: (r["peft"], r["lambda"]))
    write_table(rows, out_dir)

    lines = ["# Multi-task PEFT report", "", "## Ablation (mean best validation accuracy over seeds)", "",
             "| lambda | peft | " + " | ".join(TASKS) + " | seeds | status |",
             "|---|---|" + "---|" * len(TASKS) + "---|---|"]
    for r in rows:
        accs = " | ".join(_fmt(r[f"seed_mean_acc_{t}"]) for t in TASKS)
        lines.append(f"| {r['lambda']:g} | {r['peft']} | {accs} | {r['n_seeds']} | {r['status']} |")
    ok = [r for r in records if r.status == "ok" and r.total_params]
    if ok:
        r = ok[0]
        lines += ["", "## Parameter efficiency", "",
                  f"trainable {r.trainable_params} of {r.total_params} "
                  f"({100.0 * r.trainable_params / r.total_params:.2f}%)"]

    if dataset is not None:
        corr = correlations(dataset)
        with open(os.path.join(out_dir, "correlations.json"), "w") as fh:
            json.dump(corr, fh, indent=1, sort_keys=True)
        lines += ["", f"## Label correlations (n={corr['n']})", ""]
        for kind in ("pearson", "spearman"):
            lines += [f"{kind}:", "", "| | " + " | ".join(TASKS) + " |",
                      "|---|" + "---|" * len(TASKS)]
            for t, row in zip(TASKS, corr[kind]):
                lines.append(f"| {t} | " + " | ".join(f"{x:.3f}" for x in row) + " |")
            lines.append("")

    if model is not None and dataset is not None:
        image = dataset.images[image_index]
        hdir = os.path.join(out_dir, "heatmaps")
        os.makedirs(hdir, exist_ok=True)
        if lines[-1]:
            lines.append("")
        lines += [f"## Adapter activation maps (image {image_index})", ""]
        write_ppm(os.path.join(hdir, "input.ppm"), to_bytes(image))
        for task in model.tasks:
            maps = activation_maps(image, task, model)
            save_maps(maps, hdir)
            for m in maps:
                flag = " (degenerate)" if m.degenerate else ""
                lines.append(f"- {task}/{m.tap}: heatmaps/{task}_{m.tap}.ppm{flag}")
    with open(os.path.join(out_dir, "summary.md"), "w") as fh:
        fh.write("\n".join(lines).rstrip("\n") + "\n")
    return rows
