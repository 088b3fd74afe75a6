"""Synthetic correlated three-task histology-like images.

Each sample carries three ordinal grades:

* steatosis 0-3 from the fraction of area covered by white vacuoles
  (<5 %, 5-33 %, 34-66 %, >66 %),
* ballooning 0-2 from the number of large pale cells (none / few / numerous),
* inflammation 0-3 from the number of dark cell clusters (0, 1, 2-4, >4).

Per-task latent normals are correlated through a Gaussian copula whose latent
correlation is calibrated so the *grade* Pearson correlation hits
``target_corr``. Every sample is rendered from its own seed, derived from the
dataset seed with a splitmix64 step, so generation is order-independent.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize, stats

from . import NUM_CLASSES, TASKS
from .errors import ConfigurationError, FormatError, InputError

SCHEMA_VERSION = 1

STEATOSIS_BANDS = ((0.0, 0.045), (0.05, 0.33), (0.34, 0.66), (0.67, 0.85))
BALLOONING_COUNTS = ((0, 0), (1, 2), (3, 5))
INFLAMMATION_COUNTS = ((0, 0), (1, 1), (2, 4), (5, 7))

DEFAULT_PRIORS = (
    (0.35, 0.30, 0.20, 0.15),
    (0.50, 0.30, 0.20),
    (0.30, 0.35, 0.25, 0.10),
)

BACKGROUND = np.array([0.90, 0.66, 0.78])
VACUOLE = np.array([1.0, 1.0, 1.0])
BALLOON = np.array([0.78, 0.74, 0.97])
BALLOON_NUCLEUS = np.array([0.45, 0.30, 0.60])
INFLAMMATORY = np.array([0.28, 0.10, 0.42])

_MASK64 = (1 << 64) - 1


def splitmix64(x):
    """One splitmix64 output for state ``x`` (64-bit integer arithmetic)."""
    z = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def sample_seed(seed, index):
    return splitmix64(((int(seed) & _MASK64) * 0x9E3779B97F4A7C15 + int(index)) & _MASK64)


# -- grade definitions ------------------------------------------------------------

def steatosis_grade(coverage):
    if coverage < 0.05:
        return 0
    if coverage <= 0.33:
        return 1
    if coverage <= 0.66:
        return 2
    return 3


def ballooning_grade(count):
    return 0 if count == 0 else (1 if count <= 2 else 2)


def inflammation_grade(foci):
    if foci == 0:
        return 0
    if foci < 2:
        return 1
    return 2 if foci <= 4 else 3


# -- configuration -----------------------------------------------------------------

def default_corr(off_diagonal=0.6):
    c = np.full((3, 3), off_diagonal)
    np.fill_diagonal(c, 1.0)
    return c.tolist()


@dataclass
class GeneratorConfig:
    n_samples: int = 3000
    image_size: int = 32
    target_corr: list = field(default_factory=default_corr)
    priors: tuple = DEFAULT_PRIORS
    noise: float = 0.03
    seed: int = 0

    def validate(self):
        c = np.asarray(self.target_corr, dtype=float)
        if c.shape != (3, 3) or not np.allclose(c, c.T) or not np.allclose(np.diag(c), 1.0):
            raise ConfigurationError("target_corr must be a symmetric 3x3 matrix with unit diagonal")
        if np.linalg.eigvalsh(c).min() < -1e-10:
            raise ConfigurationError("target_corr is not positive semi-definite")
        if np.abs(c).max() > 1.0:
            raise ConfigurationError("correlations must lie in [-1, 1]")
        if len(self.priors) != 3:
            raise ConfigurationError("need class priors for three tasks")
        for p, k in zip(self.priors, NUM_CLASSES):
            if len(p) != k or min(p) <= 0 or abs(sum(p) - 1.0) > 1e-9:
                raise ConfigurationError(f"priors {p} must be {k} positive values summing to 1")
        if self.n_samples < 1 or self.image_size < 8:
            raise ConfigurationError("need n_samples >= 1 and image_size >= 8")

    def to_dict(self):
        d = asdict(self)
        d["target_corr"] = np.asarray(self.target_corr, dtype=float).tolist()
        d["priors"] = [list(p) for p in self.priors]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "priors" in d:
            d["priors"] = tuple(tuple(p) for p in d["priors"])
        return cls(**d)


# -- latent calibration --------------------------------------------------------------

def _cuts(priors):
    return stats.norm.ppf(np.cumsum(priors)[:-1])


def ordinal_pearson(rho, cuts_a, cuts_b):
    """Pearson correlation of two ordinal variables obtained by thresholding a
    standard bivariate normal with correlation ``rho`` at the given cut points."""
    pa = stats.norm.sf(cuts_a)
    pb = stats.norm.sf(cuts_b)
    ea, eb = pa.sum(), pb.sum()
    va = sum(stats.norm.sf(max(x, y)) for x in cuts_a for y in cuts_a) - ea ** 2
    vb = sum(stats.norm.sf(max(x, y)) for x in cuts_b for y in cuts_b) - eb ** 2
    mvn = stats.multivariate_normal(mean=[0.0, 0.0], cov=[[1.0, rho], [rho, 1.0]])
    cov = 0.0
    for i, x in enumerate(cuts_a):
        for j, y in enumerate(cuts_b):
            # P(X > x, Y > y) = Phi2(-x, -y)
            cov += mvn.cdf([-x, -y]) - pa[i] * pb[j]
    return cov / np.sqrt(va * vb)


def latent_correlation(target_corr, priors):
    """Copula correlation whose thresholded grades have Pearson matrix ``target_corr``."""
    target = np.asarray(target_corr, dtype=float)
    cuts = [_cuts(p) for p in priors]
    latent = np.eye(3)
    for a in range(3):
        for b in range(a + 1, 3):
            t = target[a, b]
            if t == 0.0:
                continue
            lo, hi = -0.9999, 0.9999
            f = lambda r: ordinal_pearson(r, cuts[a], cuts[b]) - t  # noqa: E731
            if f(lo) > 0 or f(hi) < 0:
                raise ConfigurationError(
                    f"grade correlation {t} between tasks {a} and {b} is not attainable")
            latent[a, b] = latent[b, a] = optimize.brentq(f, lo, hi, xtol=1e-6)
    if np.linalg.eigvalsh(latent).min() <= 1e-9:
        raise ConfigurationError("target correlation requires a non-positive-definite latent matrix")
    return latent


# -- samples ----------------------------------------------------------------------------

@dataclass
class MultiTaskSample:
    image: np.ndarray        # (H, W, 3) float32 in [0, 1]
    labels: tuple            # (steatosis, ballooning, inflammation)
    severity: float = 0.0


def _band_value(u, priors, grade, bands):
    cum = np.concatenate([[0.0], np.cumsum(priors)])
    frac = (u - cum[grade]) / priors[grade]
    frac = min(max(frac, 0.0), 1.0)
    lo, hi = bands[grade]
    return lo + frac * (hi - lo)


def grade_quantities(u, priors=DEFAULT_PRIORS):
    """Map per-task uniforms to (coverage, balloon count, foci count) and grades."""
    grades = [int(np.searchsorted(np.cumsum(p)[:-1], ui, side="right")) for ui, p in zip(u, priors)]
    coverage = _band_value(u[0], priors[0], grades[0], STEATOSIS_BANDS)
    balloons = int(round(_band_value(u[1], priors[1], grades[1], BALLOONING_COUNTS)))
    foci = int(round(_band_value(u[2], priors[2], grades[2], INFLAMMATION_COUNTS)))
    labels = (steatosis_grade(coverage), ballooning_grade(balloons), inflammation_grade(foci))
    return coverage, balloons, foci, labels


def _disk(yy, xx, cy, cx, r):
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def render(coverage, balloons, foci, size, rng, noise=0.03):
    """Draw one (size, size, 3) image with the given lesion quantities."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    # low-frequency texture: bilinear upsampling of a coarse random grid
    coarse = rng.normal(0.0, 1.0, (5, 5))
    t = np.linspace(0, 4, size)
    i0 = np.minimum(t.astype(int), 3)
    f = t - i0
    rows = coarse[i0] * (1 - f)[:, None] + coarse[i0 + 1] * f[:, None]
    tex = rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]
    img = BACKGROUND[None, None, :] + 0.04 * tex[..., None]

    vac = np.zeros((size, size), dtype=bool)
    tries = 0
    while vac.mean() < coverage and tries < 400:
        r = rng.uniform(1.5, 3.5)
        vac |= _disk(yy, xx, rng.uniform(0, size), rng.uniform(0, size), r)
        tries += 1
    img[vac] = VACUOLE

    for _ in range(balloons):
        cy, cx = rng.uniform(4, size - 4, 2)
        img[_disk(yy, xx, cy, cx, rng.uniform(3.5, 4.5))] = BALLOON
        img[_disk(yy, xx, cy + rng.uniform(-1, 1), cx + rng.uniform(-1, 1), 1.0)] = BALLOON_NUCLEUS

    for _ in range(foci):
        cy, cx = rng.uniform(3, size - 3, 2)
        for _ in range(int(rng.integers(3, 6))):
            dy, dx = rng.normal(0.0, 1.2, 2)
            img[_disk(yy, xx, cy + dy, cx + dx, 1.0)] = INFLAMMATORY

    img = img + rng.normal(0.0, noise, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_sample(u, size=32, seed=0, priors=DEFAULT_PRIORS, noise=0.03, severity=None):
    """Render a sample directly from per-task uniforms ``u`` (each in [0, 1])."""
    coverage, balloons, foci, labels = grade_quantities(u, priors)
    rng = np.random.default_rng(seed)
    image = render(coverage, balloons, foci, size, rng, noise)
    if severity is None:
        severity = float(np.mean(u))
    return MultiTaskSample(image, labels, severity)


class MultiTaskDataset:
    """Images (n, H, W, 3) float32, labels (n, 3) int64, severity (n,) float64."""

    def __init__(self, images, labels, severity, config=None, seed=0):
        self.images = np.ascontiguousarray(images, dtype=np.float32)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.severity = np.asarray(severity, dtype=np.float64)
        self.config = config or {}
        self.seed = int(seed)
        if not (len(self.images) == len(self.labels) == len(self.severity)):
            raise InputError("images, labels and severity must have equal length")

    @classmethod
    def from_samples(cls, samples, config=None, seed=0):
        return cls(
            np.stack([s.image for s in samples]),
            np.array([s.labels for s in samples], dtype=np.int64).reshape(-1, 3),
            np.array([s.severity for s in samples]),
            config, seed,
        )

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        return MultiTaskSample(self.images[i], tuple(int(v) for v in self.labels[i]),
                               float(self.severity[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, idx):
        idx = np.asarray(idx)
        return MultiTaskDataset(self.images[idx], self.labels[idx], self.severity[idx],
                                self.config, self.seed)

    def task_labels(self):
        return [self.labels[:, t] for t in range(self.labels.shape[1])]


def generate(cfg):
    """Deterministic synthetic dataset for ``cfg`` (same seed -> identical arrays)."""
    cfg.validate()
    latent = latent_correlation(cfg.target_corr, cfg.priors)
    chol = np.linalg.cholesky(latent)
    sd_mean = np.sqrt(latent.sum()) / 3.0
    samples = []
    for i in range(cfg.n_samples):
        rng = np.random.default_rng(sample_seed(cfg.seed, i))
        z = chol @ rng.standard_normal(3)
        u = stats.norm.cdf(z)
        severity = float(stats.norm.cdf(z.mean() / sd_mean))
        coverage, balloons, foci, labels = grade_quantities(u, cfg.priors)
        image = render(coverage, balloons, foci, cfg.image_size, rng, cfg.noise)
        samples.append(MultiTaskSample(image, labels, severity))
    return MultiTaskDataset.from_samples(samples, cfg.to_dict(), cfg.seed)


# -- augmentation --------------------------------------------------------------------------

def augment_8fold(s):
    """The eight symmetries of the square (4 rotations, each with and without a flip)."""
    img = s.image
    if img.ndim < 2 or img.shape[0] != img.shape[1]:
        raise InputError(f"8-fold augmentation needs a square image, got {img.shape}")
    out = []
    for base in (img, img[:, ::-1]):
        for k in range(4):
            out.append(MultiTaskSample(np.ascontiguousarray(np.rot90(base, k)), tuple(s.labels),
                                       s.severity))
    return out


def apply_flips(image, horizontal, vertical):
    if horizontal:
        image = image[..., :, ::-1, :]
    if vertical:
        image = image[..., ::-1, :, :]
    return np.ascontiguousarray(image)


def draw_flips(rng, p=0.5):
    h, v = rng.random(2) < p
    return bool(h), bool(v)


def random_flip(s, rng, p=0.5):
    """Horizontal and vertical flips, each applied independently with probability ``p``."""
    h, v = draw_flips(rng, p)
    return MultiTaskSample(apply_flips(s.image, h, v), tuple(s.labels), s.severity)


# -- statistics --------------------------------------------------------------------------------

def correlation_matrix(labels, kind="pearson"):
    """Pearson or Spearman correlation between label columns."""
    x = np.asarray(labels, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InputError("need an (n >= 2, T) label matrix")
    const = [j for j in range(x.shape[1]) if np.all(x[:, j] == x[0, j])]
    if const:
        raise InputError(f"correlation undefined: column(s) {const} are constant")
    if kind == "spearman":
        x = np.column_stack([stats.rankdata(x[:, j]) for j in range(x.shape[1])])
    elif kind != "pearson":
        raise InputError(f"unknown correlation kind {kind!r}")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc
    sd = np.sqrt(np.diag(cov))
    c = cov / np.outer(sd, sd)
    np.fill_diagonal(c, 1.0)
    return np.clip((c + c.T) / 2.0, -1.0, 1.0)


# -- file I/O ------------------------------------------------------------------------------------

def save_dataset(ds, path):
    """Write ``manifest.json`` and a packed little-endian float32 ``images.bin``."""
    os.makedirs(path, exist_ok=True)
    n = len(ds)
    per = int(np.prod(ds.images.shape[1:])) * 4
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "n": n,
        "image_shape": list(ds.images.shape[1:]),
        "dtype": "<f4",
        "tasks": list(TASKS),
        "seed": ds.seed,
        "config": ds.config,
        "samples": [
            {"index": i, "labels": [int(v) for v in ds.labels[i]],
             "severity": float(ds.severity[i]), "offset": i * per, "nbytes": per}
            for i in range(n)
        ],
    }
    with open(os.path.join(path, "images.bin"), "wb") as fh:
        fh.write(ds.images.astype("<f4").tobytes())
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_dataset(path):
    mpath = os.path.join(path, "manifest.json")
    try:
        with open(mpath) as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt manifest {mpath}: {exc}") from None
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise FormatError(f"manifest schema_version must be {SCHEMA_VERSION}, "
                          f"got {manifest.get('schema_version')!r}")
    for key in ("n", "image_shape", "samples"):
        if key not in manifest:
            raise FormatError(f"manifest missing {key!r}")
    shape = tuple(manifest["image_shape"])
    per = int(np.prod(shape)) * 4
    with open(os.path.join(path, "images.bin"), "rb") as fh:
        blob = fh.read()
    samples = manifest["samples"]
    if len(samples) != manifest["n"]:
        raise FormatError(f"manifest lists {len(samples)} samples but n={manifest['n']}")
    images = np.empty((len(samples),) + shape, dtype=np.float32)
    labels = np.empty((len(samples), 3), dtype=np.int64)
    severity = np.empty(len(samples))
    for i, s in enumerate(samples):
        off, nb = s["offset"], s["nbytes"]
        if nb != per:
            raise FormatError(f"sample {i}: nbytes {nb} != expected {per}")
        if off + nb > len(blob):
            raise FormatError(f"sample {i}: images.bin truncated "
                              f"(needs bytes {off}..{off + nb}, file has {len(blob)})")
        images[i] = np.frombuffer(blob, dtype="<f4", count=per // 4, offset=off).reshape(shape)
        labels[i] = s["labels"]
        severity[i] = s["severity"]
    return MultiTaskDataset(images, labels, severity, manifest.get("config", {}),
                            manifest.get("seed", 0))
