"""Training protocol: warmup, freeze, joint PEFT/head/uncertainty optimization,
plateau schedule, best-by-validation checkpointing, and seeded sweeps."""
from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import NUM_CLASSES, TASKS
from . import autodiff as ad
from .backbone import BackboneConfig
from .checkpoint import save_checkpoint
from .data import apply_flips, augment_8fold, draw_flips
from .errors import ConfigurationError, NumericError
from .model import ModelConfig, MultiTaskModel
from .objective import (
    DEFAULT_TASK_WEIGHTS, LAMBDA_SWEEP, ObjectiveConfig, mtl_loss, ortho_loss, task_losses,
    total_loss,
)
from .optim import AdamW, PlateauScheduler

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 8e-5
    weight_decay: float = 0.01
    batch_size: int = 16
    epochs: int = 40
    plateau_factor: float = 0.3
    plateau_patience: int = 5
    plateau_min_delta: float = 1e-4
    plateau_cooldown: int = 0
    seed: int = 0
    seeds: int = 3
    lam: float = 0.1
    peft_kind: str = "adapter"
    rank: int = 8
    lora_targets: tuple = ("q", "k", "v")
    tasks: tuple = TASKS
    task_weights: tuple = DEFAULT_TASK_WEIGHTS
    loss_kind: str = "ce"
    focal_gamma: float = 2.0
    clamp: tuple = (-3.0, 3.0)
    dropout_p: float = 0.5
    augment: str = "flip"           # "flip", "dihedral" or "none"
    val_fraction: float = 0.2
    warmup_steps: int = 1200
    warmup_lr: float = 1e-3
    precision: str = "float32"
    backbone: dict = field(default_factory=lambda: BackboneConfig().to_dict())

    def __post_init__(self):
        for key in ("lora_targets", "tasks", "task_weights", "clamp"):
            setattr(self, key, tuple(getattr(self, key)))
        if isinstance(self.backbone, BackboneConfig):
            self.backbone = self.backbone.to_dict()
        self.validate()

    def validate(self):
        if self.lr <= 0 or self.batch_size <= 0 or self.epochs < 0 or self.seeds <= 0:
            raise ConfigurationError("lr, batch_size, seeds must be positive and epochs >= 0")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ConfigurationError("plateau_factor must lie in (0, 1)")
        if self.weight_decay < 0 or self.lam < 0:
            raise ConfigurationError("weight_decay and lambda must be >= 0")
        if self.peft_kind not in ("adapter", "lora"):
            raise ConfigurationError(f"unknown peft_kind {self.peft_kind!r}")
        unknown = [t for t in self.tasks if t not in TASKS]
        if unknown or not self.tasks:
            raise ConfigurationError(f"unknown tasks {unknown}")
        if len(self.task_weights) != len(self.tasks):
            raise ConfigurationError("task_weights must have one entry per task")
        if self.augment not in ("flip", "dihedral", "none"):
            raise ConfigurationError(f"unknown augment mode {self.augment!r}")
        if self.precision not in ("float32", "float64"):
            raise ConfigurationError("precision must be float32 or float64")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigurationError("val_fraction must lie in (0, 1)")

    def to_dict(self):
        d = asdict(self)
        for key in ("lora_targets", "tasks", "task_weights", "clamp"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigurationError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)

    def model_config(self):
        return ModelConfig(
            backbone=BackboneConfig(**self.backbone), peft_kind=self.peft_kind, rank=self.rank,
            lora_targets=self.lora_targets, tasks=self.tasks,
            num_classes=tuple(NUM_CLASSES[TASKS.index(t)] for t in self.tasks),
            dropout_p=self.dropout_p, clamp=self.clamp,
        )

    def objective_config(self):
        return ObjectiveConfig(lam=self.lam, task_weights=self.task_weights,
                               loss_kind=self.loss_kind, focal_gamma=self.focal_gamma,
                               clamp=self.clamp)

    def backbone_key(self):
        """Settings that fully determine the warmed-up frozen backbone."""
        return json.dumps({
            "seed": self.seed, "backbone": self.backbone, "warmup_steps": self.warmup_steps,
            "warmup_lr": self.warmup_lr, "batch_size": self.batch_size, "tasks": list(self.tasks),
            "val_fraction": self.val_fraction, "precision": self.precision,
        }, sort_keys=True)


TASK_COLUMNS = [f"loss_{t}" for t in TASKS]
METRIC_COLUMNS = (["epoch", "lr"] + TASK_COLUMNS + ["loss_mtl", "loss_ortho", "loss_total"]
                  + [f"val_acc_{t}" for t in TASKS] + ["val_acc_mean"]
                  + [f"log_var_{t}" for t in TASKS])


@dataclass
class RunRecord:
    config: dict
    seed: int
    epochs: list = field(default_factory=list)     # one dict per epoch, keys METRIC_COLUMNS
    best_epoch: int = 0
    best_val_acc: dict = field(default_factory=dict)
    trainable_params: int = 0
    total_params: int = 0
    status: str = "ok"

    def to_dict(self):
        return asdict(self)

    def metrics_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in self.epochs:
            w.writerow(["" if row.get(c) is None else repr(row[c]) if isinstance(row[c], float)
                        else row[c] for c in METRIC_COLUMNS])
        return buf.getvalue()


# -- pieces --------------------------------------------------------------------------

def split_indices(n, seed, val_fraction=0.2):
    """Seeded 80/20 shuffle split, done before any augmentation."""
    perm = np.random.default_rng(np.random.SeedSequence([seed, 0x5B117])).permutation(n)
    n_val = max(1, int(round(n * val_fraction)))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def optimizer_step(opt, model):
    """One AdamW update of the trainable parameters, then the log-variance clamp."""
    opt.step()
    model.uncertainty.apply_clamp()


def accuracy(logits, labels):
    from .evaluation import accuracy as _acc
    return _acc(logits, labels)


class TrunkCache:
    """Frozen-trunk features keyed by (sample index, augmentation code).

    ``stem`` additionally caches the task-independent half of the first
    final-stage block, usable when that block carries adapters.
    """

    def __init__(self, backbone, images):
        self.backbone = backbone
        self.images = images
        self.store = {}
        self.stems = {}

    def get(self, idx, codes=None):
        codes = [0] * len(idx) if codes is None else codes
        missing = [(i, c) for i, c in zip(idx, codes) if (int(i), c) not in self.store]
        if missing:
            imgs = np.stack([_augment_image(self.images[i], c) for i, c in missing])
            with ad.no_grad():
                feats = self.backbone.forward_trunk(imgs).data
            for (i, c), f in zip(missing, feats):
                self.store[(int(i), c)] = f
        return ad.Tensor(np.stack([self.store[(int(i), c)] for i, c in zip(idx, codes)]),
                         dtype=self.backbone.pos_embed.dtype)

    def stem(self, idx, codes=None):
        codes = [0] * len(idx) if codes is None else codes
        keys = [(int(i), c) for i, c in zip(idx, codes)]
        missing = [k for k in keys if k not in self.stems]
        if missing:
            trunk = self.get([i for i, _ in missing], [c for _, c in missing])
            with ad.no_grad():
                x_mid, m = self.backbone.forward_stem(trunk)
            for k, a, b in zip(missing, x_mid.data, m.data):
                self.stems[k] = (a, b)
        dtype = self.backbone.pos_embed.dtype
        return tuple(ad.Tensor(np.stack([self.stems[k][j] for k in keys]), dtype=dtype)
                     for j in (0, 1))

    def inputs(self, model, idx, codes=None):
        """Keyword arguments for ``model.forward``: a cached stem when possible."""
        if model.uses_stem():
            return {"stem": self.stem(idx, codes)}
        return {"trunk": self.get(idx, codes)}


def _augment_image(img, code):
    """code 0-3: flips (bit0 horizontal, bit1 vertical); 4-11: dihedral element code-4."""
    if code < 4:
        return apply_flips(img, bool(code & 1), bool(code & 2))
    from .data import MultiTaskSample
    return augment_8fold(MultiTaskSample(img, (0, 0, 0)))[code - 4].image


def _draw_codes(rng, n, mode):
    if mode == "flip":
        out = []
        for _ in range(n):
            h, v = draw_flips(rng)
            out.append(int(h) | (int(v) << 1))
        return out
    if mode == "dihedral":
        return [4 + int(c) for c in rng.integers(0, 8, n)]
    return [0] * n


class _Streams:
    """Independent deterministic RNG streams for one run."""

    def __init__(self, seed):
        ss = np.random.SeedSequence([seed, 0xA11CE])
        warm, shuffle, flips, dropout, head = ss.spawn(5)
        self.warmup = np.random.default_rng(warm)
        self.shuffle = np.random.default_rng(shuffle)
        self.flips = np.random.default_rng(flips)
        self.dropout = np.random.default_rng(dropout)
        self.warmup_head_seed = int(head.generate_state(1)[0])


def _label_columns(cfg, labels):
    return [labels[:, TASKS.index(t)] for t in cfg.tasks]


def prepare_backbone(cfg, dataset, model=None):
    """Warm up (optionally) and freeze the backbone; returns (state, TrunkCache).

    ``state`` holds the frozen backbone arrays so runs that share
    ``cfg.backbone_key()`` can skip the warmup and reuse the trunk cache.
    """
    dtype = np.float32 if cfg.precision == "float32" else np.float64
    with ad.precision(dtype):
        model = model or MultiTaskModel(cfg.model_config(), seed=cfg.seed)
    bb = model.backbone
    train_idx, _ = split_indices(len(dataset), cfg.seed, cfg.val_fraction)
    streams = _Streams(cfg.seed)
    labels = _label_columns(cfg, dataset.labels)
    if cfg.warmup_steps > 0:
        bb.set_frozen(False)

        def batches():
            while True:
                perm = streams.warmup.permutation(train_idx)
                for s in range(0, len(perm) - cfg.batch_size + 1, cfg.batch_size):
                    b = perm[s:s + cfg.batch_size]
                    yield (ad.Tensor(dataset.images[b], dtype=dtype), [y[b] for y in labels])

        nc = [NUM_CLASSES[TASKS.index(t)] for t in cfg.tasks]
        losses = bb.warmup_pretrain(batches(), cfg.warmup_steps, nc, cfg.warmup_lr,
                                    streams.warmup_head_seed)
        log.info("warmup: loss %.4f -> %.4f over %d steps", losses[0], losses[-1], len(losses))
    bb.set_frozen(True)
    state = {name: p.data.copy() for name, p in bb.named_parameters()}
    return state, TrunkCache(bb, dataset.images)


def _evaluate(model, cache, idx, labels, batch=200):
    preds = [[] for _ in model.tasks]
    with ad.no_grad():
        for s in range(0, len(idx), batch):
            b = idx[s:s + batch]
            logits = model.forward(None, **cache.inputs(model, b))
            for k, z in enumerate(logits):
                preds[k].append(np.argmax(z.data, axis=1))
    return [float(np.mean(np.concatenate(p) == y[idx])) for p, y in zip(preds, labels)]


def _epoch0_losses(model, cache, idx, labels, ocfg, batch=200):
    """Eval-mode loss terms over ``idx`` before any update."""
    sums = np.zeros(len(model.tasks) + 3)
    with ad.no_grad():
        for s in range(0, len(idx), batch):
            b = idx[s:s + batch]
            logits = model.forward(None, **cache.inputs(model, b))
            lt = task_losses(logits, [y[b] for y in labels], ocfg)
            lm = mtl_loss(lt, model.uncertainty)
            lo = ortho_loss(model.peft)
            lt_tot = total_loss(lm, lo, ocfg.lam)
            sums += len(b) * np.concatenate([lt.data, [lm.data, lo.data, lt_tot.data]])
    return sums / len(idx)


def _row(epoch, lr, tasks, terms, val_acc, log_var):
    row = {"epoch": epoch, "lr": float(lr)}
    for k, t in enumerate(tasks):
        row[f"loss_{t}"] = float(terms[k])
        row[f"val_acc_{t}"] = float(val_acc[k])
        row[f"log_var_{t}"] = float(log_var[k])
    nt = len(tasks)
    row["loss_mtl"], row["loss_ortho"], row["loss_total"] = (float(v) for v in terms[nt:nt + 3])
    row["val_acc_mean"] = float(np.mean(val_acc))
    return row


def write_run_outputs(record, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "metrics.csv"), "w") as fh:
        fh.write(record.metrics_csv())
    with open(os.path.join(out_dir, "run.json"), "w") as fh:
        json.dump(record.to_dict(), fh, indent=1, sort_keys=True)


# -- train -------------------------------------------------------------------------------

def train(cfg, dataset, out_dir=None, shared=None, debug=False):
    """Run one (config, seed) training; returns a RunRecord.

    ``shared`` is an optional ``(state, cache)`` from ``prepare_backbone`` with
    the same ``backbone_key``; results are identical with or without it.
    """
    cfg.validate()
    dtype = np.float32 if cfg.precision == "float32" else np.float64
    with ad.precision(dtype):
        model = MultiTaskModel(cfg.model_config(), seed=cfg.seed)
    if shared is None:
        state, cache = prepare_backbone(cfg, dataset, model)
    else:
        state, cache = shared
        for name, p in model.backbone.named_parameters():
            p.data[...] = state[name]
        model.backbone.set_frozen(True)
    frozen_ref = {name: p.data.copy() for name, p in model.backbone.named_parameters()}

    ocfg = cfg.objective_config()
    labels = _label_columns(cfg, dataset.labels)
    train_idx, val_idx = split_indices(len(dataset), cfg.seed, cfg.val_fraction)
    streams = _Streams(cfg.seed)
    params = model.trainable_parameters()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = PlateauScheduler(cfg.lr, cfg.plateau_factor, cfg.plateau_patience,
                             cfg.plateau_min_delta, cfg.plateau_cooldown)
    counts = model.parameter_counts()
    record = RunRecord(config=cfg.to_dict(), seed=cfg.seed,
                       trainable_params=counts["trainable"], total_params=counts["total"])
    meta = {"model": model.cfg.to_dict(), "train": cfg.to_dict()}
    ckpt_path = os.path.join(out_dir, "ckpt.bin") if out_dir else None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    terms0 = _epoch0_losses(model, cache, train_idx, labels, ocfg)
    val_acc = _evaluate(model, cache, val_idx, labels)
    record.epochs.append(_row(0, opt.lr, model.tasks, terms0, val_acc, model.uncertainty.log_var.data))
    best = np.mean(val_acc)
    record.best_epoch, record.best_val_acc = 0, dict(zip(model.tasks, val_acc))
    if ckpt_path:
        save_checkpoint(ckpt_path, model.named_parameters(), dict(meta, epoch=0))

    nt = len(model.tasks)
    for epoch in range(1, cfg.epochs + 1):
        perm = streams.shuffle.permutation(train_idx)
        sums = np.zeros(nt + 3)
        seen = 0
        for s in range(0, len(perm), cfg.batch_size):
            b = perm[s:s + cfg.batch_size]
            codes = _draw_codes(streams.flips, len(b), cfg.augment)
            feats = cache.inputs(model, b, codes)
            opt.zero_grad()
            logits = model.forward(None, training=True, rng=streams.dropout, **feats)
            lt = task_losses(logits, [y[b] for y in labels], ocfg)
            lm = mtl_loss(lt, model.uncertainty)
            lo = ortho_loss(model.peft)
            loss = total_loss(lm, lo, cfg.lam)
            if not np.isfinite(loss.data):
                if out_dir:
                    record.status = f"aborted: non-finite loss at epoch {epoch}"
                    write_run_outputs(record, out_dir)
                raise NumericError(f"non-finite loss at epoch {epoch}, batch starting {s}")
            loss.backward()
            optimizer_step(opt, model)
            if debug:
                lv = model.uncertainty.log_var.data
                assert lv.min() >= cfg.clamp[0] and lv.max() <= cfg.clamp[1]
            sums += len(b) * np.concatenate([lt.data, [lm.data, lo.data, loss.data]])
            seen += len(b)
        val_acc = _evaluate(model, cache, val_idx, labels)
        row = _row(epoch, opt.lr, model.tasks, sums / seen, val_acc, model.uncertainty.log_var.data)
        record.epochs.append(row)
        metric = float(np.mean(val_acc))
        if metric > best:
            best = metric
            record.best_epoch, record.best_val_acc = epoch, dict(zip(model.tasks, val_acc))
            if ckpt_path:
                save_checkpoint(ckpt_path, model.named_parameters(), dict(meta, epoch=epoch))
        opt.lr = sched.step(metric)
        log.info("epoch %d lr %.2e loss %.4f ortho %.4g val %s", epoch, row["lr"],
                 row["loss_total"], row["loss_ortho"], np.round(val_acc, 4))

    for name, p in model.backbone.named_parameters():
        if not np.array_equal(p.data, frozen_ref[name]):
            raise AssertionError(f"frozen backbone parameter {name} changed")
    if out_dir:
        write_run_outputs(record, out_dir)
    record.model = model
    return record


# -- sweeps ------------------------------------------------------------------------------

def run_dir(root, cfg):
    return os.path.join(root, f"{cfg.peft_kind}_lam{cfg.lam:g}_seed{cfg.seed}")


def _train_job(args):
    cfg_dict, dataset, out_dir = args
    rec = train(TrainConfig.from_dict(cfg_dict), dataset, out_dir)
    rec.model = None
    return rec


def aggregate(records):
    """One row per distinct (lambda, peft) config: mean best-val accuracy across seeds."""
    groups = {}
    for r in records:
        key = (r.config["lam"], r.config["peft_kind"])
        groups.setdefault(key, []).append(r)
    rows = []
    for (lam, peft), recs in groups.items():
        ok = [r for r in recs if r.status == "ok"]
        row = {"lambda": lam, "peft": peft, "n_seeds": len(ok),
               "status": "ok" if len(ok) == len(recs) else "failed"}
        for t in TASKS:
            vals = [r.best_val_acc[t] for r in ok if t in r.best_val_acc]
            row[f"seed_mean_acc_{t}"] = float(np.mean(vals)) if vals else None
        rows.append(row)
    return rows


def run_matrix(cfgs, seeds, out_dir=None, dataset=None, jobs=1):
    """Train every config for every seed; returns (records, aggregate rows).

    A failing run is recorded with ``status`` set and its table row marked
    failed; other runs proceed. With ``jobs == 1`` runs that share a seed
    reuse one warmed-up backbone and trunk cache.
    """
    runs = []
    for seed in seeds:
        for c in cfgs:
            d = c.to_dict()
            d["seed"] = int(seed)
            runs.append(TrainConfig.from_dict(d))
    records = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            futures = [ex.submit(_train_job, (r.to_dict(), dataset,
                                              run_dir(out_dir, r) if out_dir else None))
                       for r in runs]
            for r, fut in zip(runs, futures):
                try:
                    records.append(fut.result())
                except Exception as exc:  # noqa: BLE001 - recorded, sweep continues
                    records.append(RunRecord(config=r.to_dict(), seed=r.seed,
                                             status=f"failed: {exc}"))
    else:
        shared = {}
        for r in runs:
            key = r.backbone_key()
            try:
                if key not in shared:
                    shared.clear()
                    shared[key] = prepare_backbone(r, dataset)
                rec = train(r, dataset, run_dir(out_dir, r) if out_dir else None,
                            shared=shared[key])
                rec.model = None
            except Exception as exc:  # noqa: BLE001 - recorded, sweep continues
                log.exception("run failed: lam=%s peft=%s seed=%s", r.lam, r.peft_kind, r.seed)
                rec = RunRecord(config=r.to_dict(), seed=r.seed, status=f"failed: {exc}")
            records.append(rec)
    rows = aggregate(records)
    if out_dir:
        write_table(rows, out_dir)
    return records, rows


ABLATION_COLUMNS = ["lambda", "peft"] + [f"seed_mean_acc_{t}" for t in TASKS] + ["n_seeds", "status"]


def write_table(rows, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "ablation.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, ABLATION_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if row.get(k) is None else row[k]) for k in ABLATION_COLUMNS})
    with open(os.path.join(out_dir, "ablation.json"), "w") as fh:
        json.dump(rows, fh, indent=1, sort_keys=True)


def sweep_configs(base, lambdas=LAMBDA_SWEEP, pefts=("adapter",)):
    out = []
    for peft in pefts:
        for lam in lambdas:
            d = base.to_dict()
            d["lam"], d["peft_kind"] = float(lam), peft
            out.append(TrainConfig.from_dict(d))
    return out
