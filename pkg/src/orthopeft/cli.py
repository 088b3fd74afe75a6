"""Command line entry point: gen-data, train, sweep, eval, viz, report.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys

import numpy as np

from . import TASKS


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _str_list(text):
    return [v.strip() for v in text.split(",") if v.strip()]


# flag name -> TrainConfig field
OVERRIDES = {
    "seed": "seed", "lam": "lam", "peft": "peft_kind", "epochs": "epochs", "lr": "lr",
    "rank": "rank", "batch_size": "batch_size", "augment": "augment", "loss": "loss_kind",
    "warmup_steps": "warmup_steps", "precision": "precision",
}


def _add_train_flags(p, sweep=False):
    p.add_argument("--dataset", required=True, help="directory written by gen-data")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON training config or a run.json from an earlier run")
    p.add_argument("--seed", type=int)
    if not sweep:
        p.add_argument("--lambda", dest="lam", type=float, help="orthogonality weight")
        p.add_argument("--peft", choices=("adapter", "lora"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--rank", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--augment", choices=("flip", "dihedral", "none"))
    p.add_argument("--loss", choices=("ce", "focal"))
    p.add_argument("--warmup-steps", type=int)
    p.add_argument("--precision", choices=("float32", "float64"))


def build_parser():
    parser = _Parser(prog="orthopeft", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate the synthetic multi-task dataset")
    p.add_argument("--n", type=int, default=3000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--corr", type=float, default=0.6, help="target off-diagonal label correlation")
    p.add_argument("--image-size", type=int, default=32)

    p = sub.add_parser("train", help="train one configuration")
    _add_train_flags(p)

    p = sub.add_parser("sweep", help="lambda x peft x seed grid with an ablation table")
    _add_train_flags(p, sweep=True)
    p.add_argument("--lambda", dest="lambdas", type=_float_list, default=[0.0, 0.01, 0.1, 1.0])
    p.add_argument("--peft", dest="pefts", type=_str_list, default=["adapter"])
    p.add_argument("--seeds", type=int, default=3, help="runs per config, seeds base..base+n-1")
    p.add_argument("--jobs", type=int, default=1, help="parallel runs (1 keeps runs deterministic)")

    p = sub.add_parser("eval", help="per-task accuracy of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", choices=("val", "all"), default="val")
    p.add_argument("--out", help="also write the result as JSON here")

    p = sub.add_parser("viz", help="adapter activation heatmaps for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True, help="dataset index, or a .npy/.ppm image file")
    p.add_argument("--task", required=True, choices=TASKS + ("all",))
    p.add_argument("--out", required=True)
    p.add_argument("--dataset", help="needed when --image is an index")
    p.add_argument("--nearest", action="store_true", help="nearest-neighbour upsampling")

    p = sub.add_parser("report", help="ablation table, correlations, heatmaps and summary")
    p.add_argument("--runs", required=True, help="directory searched for run.json files")
    p.add_argument("--out", required=True)
    p.add_argument("--dataset", help="adds label correlations and heatmaps")
    return parser


def resolve_config(args):
    """JSON config (if any) with explicit flags taking precedence."""
    from .training import TrainConfig

    d = {}
    if args.config:
        with open(args.config) as fh:
            d = json.load(fh)
        if "config" in d and isinstance(d["config"], dict):   # a run.json
            d = d["config"]
    for flag, key in OVERRIDES.items():
        v = getattr(args, flag, None)
        if v is not None:
            d[key] = v
    return TrainConfig.from_dict(d)


# -- commands ----------------------------------------------------------------------------

def cmd_gen_data(args):
    from .data import GeneratorConfig, default_corr, generate, save_dataset

    cfg = GeneratorConfig(n_samples=args.n, image_size=args.image_size,
                          target_corr=default_corr(args.corr), seed=args.seed)
    ds = generate(cfg)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples to {args.out}")


def cmd_train(args):
    from .data import load_dataset
    from .training import train

    cfg = resolve_config(args)
    rec = train(cfg, load_dataset(args.dataset), args.out)
    acc = ", ".join(f"{t} {v:.4f}" for t, v in rec.best_val_acc.items())
    print(f"best epoch {rec.best_epoch}: {acc}")


def cmd_sweep(args):
    from .data import load_dataset
    from .evaluation import emit_report
    from .training import TrainConfig, run_dir, run_matrix, sweep_configs

    base = resolve_config(args)
    ds = load_dataset(args.dataset)
    cfgs = sweep_configs(base, args.lambdas, args.pefts)
    seeds = [base.seed + k for k in range(args.seeds)]
    records, rows = run_matrix(cfgs, seeds, args.out, ds, jobs=args.jobs)
    found = [(run_dir(args.out, TrainConfig.from_dict(r.config)), r) for r in records]
    model = _heatmap_model(found)
    emit_report(records, args.out, ds, model)
    for row in rows:
        accs = " ".join(f"{row[f'seed_mean_acc_{t}'] or float('nan'):.4f}" for t in TASKS)
        print(f"lambda={row['lambda']:g} peft={row['peft']} {accs} {row['status']}")
    if any(r.status != "ok" for r in records):
        raise RuntimeError("some sweep runs failed; see ablation.csv")


def _split(ds, meta, which):
    from .training import split_indices

    if which == "all":
        return np.arange(len(ds))
    train_cfg = meta.get("train", {})
    _, val = split_indices(len(ds), train_cfg.get("seed", 0), train_cfg.get("val_fraction", 0.2))
    return val


def cmd_eval(args):
    from . import autodiff as ad
    from .data import load_dataset
    from .evaluation import accuracy
    from .model import load_model

    model, meta = load_model(args.ckpt)
    ds = load_dataset(args.dataset)
    idx = _split(ds, meta, args.split)
    logits = [[] for _ in model.tasks]
    with ad.no_grad():
        for s in range(0, len(idx), 200):
            for k, z in enumerate(model.forward(ds.images[idx[s:s + 200]])):
                logits[k].append(z.data)
    result = {"n": int(len(idx)), "split": args.split, "accuracy": {}}
    for k, t in enumerate(model.tasks):
        result["accuracy"][t] = accuracy(np.concatenate(logits[k]), ds.labels[idx, TASKS.index(t)])
    text = json.dumps(result, indent=1, sort_keys=True)
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")


def _load_image(spec, dataset_path):
    from .data import load_dataset
    from .errors import InputError
    from .evaluation import read_netpbm

    if spec.lstrip("-").isdigit():
        if not dataset_path:
            raise UsageError("viz: --dataset is required when --image is an index")
        ds = load_dataset(dataset_path)
        i = int(spec)
        if not 0 <= i < len(ds):
            raise InputError(f"image index {i} out of range for {len(ds)} samples")
        return ds.images[i]
    if spec.endswith(".npy"):
        return np.load(spec).astype(np.float32)
    img = read_netpbm(spec)
    if img.ndim != 3:
        raise InputError("viz needs a colour (P6) image")
    return img.astype(np.float32) / 255.0


def cmd_viz(args):
    from .evaluation import activation_maps, save_maps
    from .model import load_model

    model, _ = load_model(args.ckpt)
    image = _load_image(args.image, args.dataset)
    tasks = model.tasks if args.task == "all" else (args.task,)
    mode = "nearest" if args.nearest else "bilinear"
    for t in tasks:
        maps = activation_maps(image, t, model, mode)
        for path in save_maps(maps, args.out):
            print(path)
        for m in maps:
            if m.degenerate:
                print(f"note: {t}/{m.tap} map is constant (degenerate)", file=sys.stderr)


def load_records(runs_dir):
    from .training import RunRecord

    paths = sorted(glob.glob(os.path.join(runs_dir, "**", "run.json"), recursive=True))
    records = []
    for p in paths:
        with open(p) as fh:
            d = json.load(fh)
        records.append((os.path.dirname(p), RunRecord(**d)))
    return records


def _heatmap_model(found):
    """Model from the first adapter run with lambda > 0 (else any adapter run) that has a checkpoint."""
    from .model import load_model

    ok = [(d, r) for d, r in found if r.status == "ok" and r.config.get("peft_kind") == "adapter"
          and os.path.exists(os.path.join(d, "ckpt.bin"))]
    ok.sort(key=lambda dr: dr[1].config.get("lam", 0) <= 0)
    return load_model(os.path.join(ok[0][0], "ckpt.bin"))[0] if ok else None


def cmd_report(args):
    from .data import load_dataset
    from .errors import InputError
    from .evaluation import emit_report

    found = load_records(args.runs)
    if not found:
        raise InputError(f"no run.json files under {args.runs}")
    ds = load_dataset(args.dataset) if args.dataset else None
    model = _heatmap_model(found) if ds is not None else None
    rows = emit_report([r for _, r in found], args.out, ds, model)
    print(f"{len(rows)} configurations, {len(found)} runs -> {args.out}")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "sweep": cmd_sweep,
            "eval": cmd_eval, "viz": cmd_viz, "report": cmd_report}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (ValueError, ArithmeticError, OSError, RuntimeError, KeyError) as exc:
        print(f"orthopeft {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
