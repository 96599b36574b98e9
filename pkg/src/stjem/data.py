"""Synthetic datasets, CSV persistence and label masking.

Features live in a normalized space, nominally ``[-1, 1]`` per dimension. A
dataset carries the affine record (``shift``, ``scale``) mapping normalized
values back to raw units: ``raw = x * scale + shift``.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .exceptions import FormatError, InvalidArgumentError

CSV_MAGIC = "# stjem-dataset"


@dataclass
class Dataset:
    xs: np.ndarray
    ys: np.ndarray
    labeled_mask: np.ndarray | None = None
    name: str = ""
    shift: np.ndarray | None = None
    scale: np.ndarray | None = None
    n_classes: int | None = None

    def __post_init__(self):
        self.xs = np.atleast_2d(np.asarray(self.xs, dtype=np.float64))
        n, dx = self.xs.shape
        self.ys = np.asarray(self.ys, dtype=np.int64).reshape(n)
        if self.labeled_mask is None:
            self.labeled_mask = np.ones(n, dtype=bool)
        self.labeled_mask = np.asarray(self.labeled_mask, dtype=bool).reshape(n)
        self.shift = np.zeros(dx) if self.shift is None else np.asarray(self.shift, dtype=np.float64).reshape(dx)
        self.scale = np.ones(dx) if self.scale is None else np.asarray(self.scale, dtype=np.float64).reshape(dx)
        if np.any(self.scale <= 0):
            raise InvalidArgumentError("normalization scale must be positive")
        if np.isnan(self.xs).any():
            raise InvalidArgumentError("dataset contains NaN")
        if self.n_classes is None:
            lab = self.ys[self.labeled_mask]
            self.n_classes = int(lab.max()) + 1 if lab.size else 1
        if np.any(self.ys[self.labeled_mask] < 0) or np.any(self.ys[self.labeled_mask] >= self.n_classes):
            raise InvalidArgumentError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self):
        return len(self.xs)

    @property
    def dx(self):
        return self.xs.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx)
        return replace(self, xs=self.xs[idx], ys=self.ys[idx], labeled_mask=self.labeled_mask[idx])

    def labeled(self):
        return self.subset(np.flatnonzero(self.labeled_mask))

    def normalize(self, raw):
        return (np.asarray(raw, dtype=np.float64) - self.shift) / self.scale

    def denormalize(self, xs):
        return np.asarray(xs, dtype=np.float64) * self.scale + self.shift


def minmax_record(raw):
    lo, hi = raw.min(axis=0), raw.max(axis=0)
    scale = (hi - lo) / 2.0
    scale = np.where(scale > 0, scale, 1.0)
    return (hi + lo) / 2.0, scale


def train_test_split(dataset, test_fraction=0.3, seed=0):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(dataset))
    n_test = int(round(test_fraction * len(dataset)))
    return dataset.subset(np.sort(perm[n_test:])), dataset.subset(np.sort(perm[:n_test]))


def make_two_moons(n, noise_sd=0.1, seed=0, label_noise=0.0):
    """Two interleaved half circles, min-max normalized to [-1, 1].

    ``label_noise`` flips each label independently with that probability.
    """
    if n < 1 or noise_sd < 0 or not 0 <= label_noise <= 1:
        raise InvalidArgumentError("invalid two-moons parameters")
    rng = np.random.default_rng(seed)
    n_out = n // 2
    n_in = n - n_out
    t_out = np.linspace(0, np.pi, n_out)
    t_in = np.linspace(0, np.pi, n_in)
    raw = np.concatenate([
        np.stack([np.cos(t_out), np.sin(t_out)], axis=1),
        np.stack([1 - np.cos(t_in), 1 - np.sin(t_in) - 0.5], axis=1),
    ])
    ys = np.concatenate([np.zeros(n_out, np.int64), np.ones(n_in, np.int64)])
    raw = raw + noise_sd * rng.standard_normal(raw.shape)
    flip = rng.random(n) < label_noise
    ys = np.where(flip, 1 - ys, ys)
    perm = rng.permutation(n)
    raw, ys = raw[perm], ys[perm]
    shift, scale = minmax_record(raw)
    return Dataset((raw - shift) / scale, ys, name="two_moons", shift=shift, scale=scale, n_classes=2)


DEFAULT_GMM_MEANS = ((-0.5, -0.5), (-0.5, 0.5), (0.5, -0.5), (0.5, 0.5))


def make_gmm(n, k_modes=4, means=None, cov_scale=0.05, seed=0):
    """Isotropic Gaussian modes given directly in normalized coordinates.

    Label = mode index; modes get equal shares (``i % k``) before shuffling.
    Points are clipped to [-1, 1].
    """
    if n < 1 or k_modes < 1 or cov_scale < 0:
        raise InvalidArgumentError("invalid GMM parameters")
    if means is None:
        if k_modes != 4:
            angles = 2 * np.pi * np.arange(k_modes) / k_modes
            means = 0.5 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        else:
            means = DEFAULT_GMM_MEANS
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    if len(means) != k_modes:
        raise InvalidArgumentError("need one mean per mode")
    rng = np.random.default_rng(seed)
    ys = rng.permutation(np.arange(n) % k_modes)
    xs = means[ys] + cov_scale * rng.standard_normal((n, means.shape[1]))
    return Dataset(np.clip(xs, -1.0, 1.0), ys, name="gmm", n_classes=k_modes)


def make_ring(n, radius=0.6, noise_sd=0.05, seed=0):
    """Single-class noisy circle of the given radius around the origin."""
    if n < 1 or radius <= 0 or noise_sd < 0:
        raise InvalidArgumentError("invalid ring parameters")
    rng = np.random.default_rng(seed)
    theta = rng.uniform(0, 2 * np.pi, n)
    r = radius + noise_sd * rng.standard_normal(n)
    xs = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    return Dataset(np.clip(xs, -1.0, 1.0), np.zeros(n, np.int64), name="ring", n_classes=1)


def make_two_mode_1d(n, centers=(-0.5, 0.5), sd=0.1, seed=0):
    """1-D data with one class per mode."""
    rng = np.random.default_rng(seed)
    ys = rng.permutation(np.arange(n) % len(centers))
    xs = np.asarray(centers)[ys] + sd * rng.standard_normal(n)
    return Dataset(np.clip(xs, -1, 1)[:, None], ys, name="two_mode_1d", n_classes=len(centers))


# --- CSV ------------------------------------------------------------------

@dataclass
class DatasetSchema:
    n_features: int | None = None
    label_column: str = "y"
    labeled_column: str | None = "labeled"
    require_labels: bool = True
    n_classes: int | None = None


def _fmt(v):
    return format(float(v), ".17g")


def dump_csv(dataset, path):
    """Write ``x0..x{D-1}, y, labeled`` rows behind one metadata comment line."""
    meta = (f"{CSV_MAGIC} name={dataset.name} n_classes={dataset.n_classes} "
            f"shift={';'.join(_fmt(v) for v in dataset.shift)} "
            f"scale={';'.join(_fmt(v) for v in dataset.scale)}")
    with open(path, "w", newline="") as fh:
        fh.write(meta + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{d}" for d in range(dataset.dx)] + ["y", "labeled"])
        for x, y, m in zip(dataset.xs, dataset.ys, dataset.labeled_mask):
            w.writerow([_fmt(v) for v in x] + [int(y), int(m)])


def _parse_meta(line):
    out = {}
    for tok in line[len(CSV_MAGIC):].split():
        if "=" in tok:
            k, v = tok.split("=", 1)
            out[k] = v
    return out


def load_csv(path, schema=None):
    schema = schema or DatasetSchema()
    lines = Path(path).read_text().splitlines()
    meta = {}
    lineno = 0
    while lineno < len(lines) and lines[lineno].startswith("#"):
        if lines[lineno].startswith(CSV_MAGIC):
            meta = _parse_meta(lines[lineno])
        lineno += 1
    if lineno >= len(lines):
        raise FormatError("missing header row", lineno + 1, unit="line")
    header = next(csv.reader([lines[lineno]]))
    header_line = lineno + 1
    feat_cols = [i for i, h in enumerate(header) if h.startswith("x") and h[1:].isdigit()]
    if not feat_cols:
        raise FormatError("no feature columns x0..", header_line, unit="line")
    if schema.n_features is not None and len(feat_cols) != schema.n_features:
        raise FormatError(f"expected {schema.n_features} feature columns, found {len(feat_cols)}", header_line, unit="line")
    y_col = header.index(schema.label_column) if schema.label_column in header else None
    if y_col is None and schema.require_labels:
        raise FormatError(f"missing label column {schema.label_column!r}", header_line, unit="line")
    m_col = header.index(schema.labeled_column) if schema.labeled_column in header else None
    n_classes = schema.n_classes
    if n_classes is None and "n_classes" in meta:
        n_classes = int(meta["n_classes"])

    xs, ys, mask = [], [], []
    for i, raw in enumerate(lines[lineno + 1:], start=lineno + 2):
        if not raw.strip():
            continue
        row = next(csv.reader([raw]))
        if len(row) != len(header):
            raise FormatError(f"expected {len(header)} fields, got {len(row)}", i, unit="line")
        try:
            xs.append([float(row[c]) for c in feat_cols])
            y = int(row[y_col]) if y_col is not None else -1
            m = bool(int(row[m_col])) if m_col is not None else y_col is not None
        except ValueError as exc:
            raise FormatError(f"malformed value: {exc}", i, unit="line") from None
        if not np.all(np.isfinite(xs[-1])):
            raise FormatError("non-finite feature value", i, unit="line")
        if m and (y < 0 or (n_classes is not None and y >= n_classes)):
            raise InvalidArgumentError(f"label {y} out of range on line {i}")
        ys.append(y)
        mask.append(m)
    if not xs:
        raise FormatError("no data rows", len(lines), unit="line")
    dx = len(feat_cols)

    def vec(key):
        if key not in meta:
            return None
        return np.array([float(v) for v in meta[key].split(";")])

    return Dataset(np.array(xs).reshape(-1, dx), np.array(ys), np.array(mask), name=meta.get("name", ""),
                   shift=vec("shift"), scale=vec("scale"), n_classes=n_classes)


def mask_labels(dataset, keep_n, seed=0):
    """Keep labels on exactly ``keep_n`` rows, spread as evenly over classes as possible.

    Emits a ``UserWarning`` when an even class split is impossible.
    """
    n = len(dataset)
    if not 0 <= keep_n <= n:
        raise InvalidArgumentError("keep_n must be in [0, N]")
    rng = np.random.default_rng(seed)
    k = dataset.n_classes
    by_class = [rng.permutation(np.flatnonzero((dataset.ys == c) & dataset.labeled_mask)) for c in range(k)]
    avail = np.array([len(b) for b in by_class])
    if keep_n > avail.sum():
        raise InvalidArgumentError("keep_n exceeds the number of labeled rows")
    if 0 < keep_n < k:
        warnings.warn(f"cannot split {keep_n} labels evenly over {k} classes", UserWarning, stacklevel=2)
    quota = np.zeros(k, dtype=np.int64)
    remaining = keep_n
    # water-filling: raise every class with spare rows by one until done
    order = rng.permutation(k)
    while remaining:
        progressed = False
        for c in order:
            if remaining and quota[c] < avail[c]:
                quota[c] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            break
    mask = np.zeros(n, dtype=bool)
    for c in range(k):
        mask[by_class[c][:quota[c]]] = True
    return replace(dataset, labeled_mask=mask)


def flip_labels(dataset, prob, seed=0):
    """Copy of ``dataset`` with each label flipped to a different random class w.p. ``prob``."""
    if not 0 <= prob <= 1:
        raise InvalidArgumentError("prob must be in [0, 1]")
    rng = np.random.default_rng(seed)
    k = dataset.n_classes
    flip = rng.random(len(dataset)) < prob
    if k < 2:
        return replace(dataset, ys=dataset.ys.copy())
    offset = rng.integers(1, k, size=len(dataset))
    ys = np.where(flip, (dataset.ys + offset) % k, dataset.ys)
    return replace(dataset, ys=ys)
