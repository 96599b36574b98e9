"""Brute-force ground truth on small discretized domains.

Integrals over x are midpoint Riemann sums on a uniform grid of at most three
dimensions and 10**6 points. Within that limit the partition function,
gradients of ``log p(x|y)`` and the mutual information are exact up to the
quadrature, which makes them usable as independent references for the
sampled estimators used in training.
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass

import numpy as np

from .core_math import logsumexp, softmax
from .exceptions import InvalidArgumentError, ResourceLimitError

MAX_GRID_POINTS = 1_000_000
MAX_GRID_DIMS = 3


class GridDomain:
    """Cell-centred uniform grid. ``axes`` is a list of ``(lo, hi, n_points)``."""

    def __init__(self, axes):
        axes = [(float(lo), float(hi), int(n)) for lo, hi, n in axes]
        if not 1 <= len(axes) <= MAX_GRID_DIMS:
            raise InvalidArgumentError(f"grid must have 1..{MAX_GRID_DIMS} dimensions")
        for lo, hi, n in axes:
            if n < 2 or not hi > lo:
                raise InvalidArgumentError("each axis needs n_points >= 2 and hi > lo")
        total = int(np.prod([n for _, _, n in axes]))
        if total > MAX_GRID_POINTS:
            raise ResourceLimitError(f"grid of {total} points exceeds {MAX_GRID_POINTS}")
        self.axes = axes
        self.n_points = total
        self.widths = np.array([(hi - lo) / n for lo, hi, n in axes])
        self.cell_volume = float(np.prod(self.widths))
        self.volume = float(np.prod([hi - lo for lo, hi, _ in axes]))
        coords = [lo + (np.arange(n) + 0.5) * (hi - lo) / n for lo, hi, n in axes]
        mesh = np.meshgrid(*coords, indexing="ij")
        self.points = np.stack([m.ravel() for m in mesh], axis=1)

    @classmethod
    def uniform(cls, dims, lo=-1.0, hi=1.0, n=64):
        return cls([(lo, hi, n)] * dims)

    @property
    def dims(self):
        return len(self.axes)

    def index_of(self, x):
        """Flat index of the cell containing each row of ``x`` (clipped to the grid)."""
        x = np.atleast_2d(x)
        idx = np.zeros(len(x), dtype=np.int64)
        for d, (lo, hi, n) in enumerate(self.axes):
            k = np.clip(np.floor((x[:, d] - lo) / self.widths[d]).astype(np.int64), 0, n - 1)
            idx = idx * n + k
        return idx


@dataclass
class PartitionEstimate:
    log_z_per_class: np.ndarray
    log_z: float


def grid_partition(net, grid):
    """``log Z_y = log sum_g exp f(g)_y + log cell_volume`` for every class."""
    q = net.forward(grid.points)
    per = logsumexp(q, axis=0) + np.log(grid.cell_volume)
    per = np.atleast_1d(per)
    return PartitionEstimate(per, logsumexp(per))


def log_px_given_y(net, x, y, grid):
    """Exactly normalized ``log p(x|y)`` on the grid."""
    return net.forward(np.atleast_2d(x))[:, y] - grid_partition(net, grid).log_z_per_class[y]


def exact_grad_log_px_given_y(net, x, y, grid):
    """``grad f(x)_y - E_{p(x'|y)}[grad f(x')_y]`` by enumeration over the grid."""
    if not 0 <= y < net.dy:
        raise InvalidArgumentError("class index out of range")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    q = net.forward(grid.points)[:, y]
    w = softmax(q)
    X = np.concatenate([x, grid.points])
    U = np.zeros((len(X), net.dy))
    U[: len(x), y] = 1.0 / len(x)
    U[len(x):, y] = -w
    return net.grad_params(X, U)


def class_conditional_masses(net, grid, y):
    return softmax(net.forward(grid.points)[:, y])


def sample_grid_conditional(net, grid, y, n, rng):
    """Exact draws of cell centres from ``p(x|y)`` by inverse CDF over cell masses."""
    cdf = np.cumsum(class_conditional_masses(net, grid, y))
    u = rng.random(n) * cdf[-1]
    idx = np.minimum(np.searchsorted(cdf, u, side="right"), grid.n_points - 1)
    return grid.points[idx]


def sample_grid_uniform(grid, n, rng):
    return grid.points[rng.integers(grid.n_points, size=n)]


def self_normalized_gradient(net, x, y, samples, include_positive=False):
    """``grad f(x)_y - sum_i softmax_i(f(s_i)_y) grad f(s_i)_y``.

    With ``include_positive`` the positive ``x`` joins the weighted set.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    S = np.atleast_2d(samples)
    if include_positive:
        S = np.concatenate([x, S])
    w = softmax(net.forward(S)[:, y])
    X = np.concatenate([x, S])
    U = np.zeros((len(X), net.dy))
    U[0, y] = 1.0
    U[1:, y] -= w
    return net.grad_params(X, U)


def mean_estimator_gradient(net, x, y, samples):
    """Unweighted Monte-Carlo estimate ``grad f(x)_y - mean_i grad f(s_i)_y``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    S = np.atleast_2d(samples)
    X = np.concatenate([x, S])
    U = np.zeros((len(X), net.dy))
    U[0, y] = 1.0
    U[1:, y] = -1.0 / len(S)
    return net.grad_params(X, U)


def normalized_model_density(net, grid):
    """Cell masses ``p(x, y) * cell_volume`` as a ``(Dy, n_points)`` table summing to 1."""
    q = net.forward(grid.points)
    log_z = grid_partition(net, grid).log_z
    return np.exp(q - log_z).T * grid.cell_volume


def exact_mi(joint):
    """Mutual information of a ``(Dy, n_points)`` joint table, with ``0 log 0 = 0``."""
    P = np.asarray(joint, dtype=np.float64)
    if P.ndim != 2 or np.any(P < 0) or abs(P.sum() - 1.0) > 1e-9:
        raise InvalidArgumentError("joint table must be non-negative and sum to 1")
    py = P.sum(axis=1, keepdims=True)
    px = P.sum(axis=0, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(P > 0, P * (np.log(P) - np.log(py) - np.log(px)), 0.0)
    return float(terms.sum())


def mi_decomposition(joint):
    """``E[log p(y|x)] + H(p(y))`` from the same table; equals :func:`exact_mi`."""
    P = np.asarray(joint, dtype=np.float64)
    px = P.sum(axis=0, keepdims=True)
    py = P.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        e_log_post = np.where(P > 0, P * (np.log(P) - np.log(px)), 0.0).sum()
        h = -np.where(py > 0, py * np.log(py), 0.0).sum()
    return float(e_log_post + h)


def kl_divergence(p, q):
    p = np.asarray(p, dtype=np.float64).ravel()
    q = np.asarray(q, dtype=np.float64).ravel()
    with np.errstate(divide="ignore", invalid="ignore"):
        return float(np.sum(np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)))


def density_to_csv(grid, table, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{d}" for d in range(grid.dims)] + ["y", "probability"])
        for y, row in enumerate(np.asarray(table)):
            for pt, p in zip(grid.points, row):
                w.writerow([repr(float(v)) for v in pt] + [y, repr(float(p))])


class GridTableEnergy:
    """Energy model with one free logit per grid cell and class.

    The most flexible model on a grid; its parameters are the logit table,
    flattened row-major as ``(n_points, Dy)``. Inputs are mapped to their cell.
    """

    def __init__(self, grid, dy, table=None):
        self.grid = grid
        self.layer_dims = (grid.dims, dy)
        table = np.zeros((grid.n_points, dy)) if table is None else np.asarray(table, dtype=np.float64)
        self.params = table.ravel().copy()

    @property
    def dx(self):
        return self.grid.dims

    @property
    def dy(self):
        return self.layer_dims[1]

    @property
    def n_params(self):
        return self.params.size

    def with_params(self, params):
        return GridTableEnergy(self.grid, self.dy, np.asarray(params).reshape(-1, self.dy))

    def forward(self, x):
        single = np.ndim(x) == 1
        q = self.params.reshape(-1, self.dy)[self.grid.index_of(x)]
        return q[0] if single else q

    def grad_params(self, x, upstream):
        g = np.zeros((self.grid.n_points, self.dy))
        np.add.at(g, self.grid.index_of(x), np.atleast_2d(upstream))
        return g.ravel()


def _rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def run_oracle_checks(net, grid_points=512, seed=0, n_samples=10_000):
    """Oracle-vs-estimator suite used by the ``oracle-check`` command.

    Works on 1-D and 2-D input networks. Returns a list of
    ``(name, passed, detail)`` tuples.
    """
    rng = np.random.default_rng(seed)
    if net.dx == 1:
        grid = GridDomain([(-1.0, 1.0, grid_points)])
    elif net.dx == 2:
        side = int(round(np.sqrt(grid_points)))
        grid = GridDomain([(-1.0, 1.0, side)] * 2)
    else:
        raise InvalidArgumentError("oracle checks support 1-D and 2-D inputs")
    results = []

    part = grid_partition(net, grid)
    gap = abs(part.log_z - logsumexp(part.log_z_per_class))
    results.append(("partition_consistency", gap <= 1e-9, f"gap={gap:.3e}"))

    table = normalized_model_density(net, grid)
    s = abs(table.sum() - 1.0)
    results.append(("density_normalized", s <= 1e-9, f"|sum-1|={s:.3e}"))

    mi_gap = abs(exact_mi(table) - mi_decomposition(table))
    results.append(("mi_dual_formula", mi_gap <= 1e-12, f"gap={mi_gap:.3e}"))

    x = rng.uniform(-1, 1, size=net.dx)
    y = int(rng.integers(net.dy))
    exact = exact_grad_log_px_given_y(net, x, y, grid)
    eps = 1e-5
    fd = np.empty_like(exact)
    for i in range(net.n_params):
        p = net.params.copy()
        p[i] += eps
        up = log_px_given_y(net.with_params(p), x, y, grid)[0]
        p[i] -= 2 * eps
        down = log_px_given_y(net.with_params(p), x, y, grid)[0]
        fd[i] = (up - down) / (2 * eps)
    err = _rel_err(exact, fd)
    results.append(("exact_grad_vs_finite_diff", err < 1e-4, f"rel_err={err:.3e}"))

    samples = sample_grid_uniform(grid, n_samples, rng)
    est = self_normalized_gradient(net, x, y, samples)
    cos = float(est @ exact / (np.linalg.norm(est) * np.linalg.norm(exact)))
    results.append(("self_normalized_uniform_proposal", cos > 0.99, f"cosine={cos:.5f}"))

    samples = sample_grid_conditional(net, grid, y, n_samples, rng)
    est = mean_estimator_gradient(net, x, y, samples)
    cos = float(est @ exact / (np.linalg.norm(est) * np.linalg.norm(exact)))
    results.append(("mean_estimator_exact_samples", cos > 0.99, f"cosine={cos:.5f}"))
    return results
