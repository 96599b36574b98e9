"""Likelihood-weighted combination of several energy classifiers.

With a shared partition constant, the mixture of member joints gives

    log p_comb(x, y) = logsumexp_i f_i(x)_y + const

so the combined posterior is each member's posterior weighted by how likely
that member finds ``x``. The constant is dropped; it cancels in posteriors.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .core_math import logsumexp
from .exceptions import DimensionError, InvalidArgumentError
from .trainer import evaluate

COMPARISON_COLUMNS = ("dataset", "model_id", "accuracy", "ece")


@dataclass
class ModelEnsemble:
    members: list
    prior: np.ndarray | None = None

    def __post_init__(self):
        self.members = list(self.members)
        if not self.members:
            raise InvalidArgumentError("ensemble needs at least one member")
        dims = {(m.dx, m.dy) for m in self.members}
        if len(dims) != 1:
            raise DimensionError(f"members disagree on (Dx, Dy): {sorted(dims)}")
        if self.prior is None:
            self.prior = np.full(self.dy, 1.0 / self.dy)
        self.prior = np.asarray(self.prior, dtype=np.float64)
        if self.prior.shape != (self.dy,) or np.any(self.prior < 0) or abs(self.prior.sum() - 1) > 1e-9:
            raise InvalidArgumentError("prior must be a probability vector over Dy classes")

    @property
    def dx(self):
        return self.members[0].dx

    @property
    def dy(self):
        return self.members[0].dy

    def forward(self, x):
        return combine_logits(self, x)


def prior_from_labels(ys, n_classes):
    """Class frequencies with add-one smoothing."""
    counts = np.bincount(np.asarray(ys, dtype=np.int64), minlength=n_classes)[:n_classes] + 1.0
    return counts / counts.sum()


def combine_logits(ensemble, x):
    """Per class, logsumexp of member logits."""
    stacked = np.stack([m.forward(x) for m in ensemble.members])
    return logsumexp(stacked, axis=0)


def combined_conditional_ll(ensemble, x):
    """``log p_comb(x | y)`` up to one constant shared by all classes."""
    if np.any(ensemble.prior <= 0):
        raise InvalidArgumentError("prior must be strictly positive")
    return combine_logits(ensemble, x) - np.log(ensemble.prior)


def evaluate_combination(ensemble, datasets, names=None, n_bins=15):
    """Rows ``{dataset, model_id, accuracy, ece}`` for each member and the combination."""
    names = names or [getattr(d, "name", "") or f"set{i}" for i, d in enumerate(datasets)]
    rows = []
    for name, ds in zip(names, datasets):
        if ds.dx != ensemble.dx:
            raise DimensionError("dataset dimension does not match the ensemble")
        for i, m in enumerate(ensemble.members):
            acc, e, _ = evaluate(m, ds, n_bins=n_bins)
            rows.append({"dataset": name, "model_id": f"member-{i}", "accuracy": acc, "ece": e})
        acc, e, _ = evaluate(ensemble, ds, n_bins=n_bins)
        rows.append({"dataset": name, "model_id": "combined", "accuracy": acc, "ece": e})
    return rows


def write_comparison_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMPARISON_COLUMNS)
        for r in rows:
            w.writerow([r["dataset"], r["model_id"], repr(float(r["accuracy"])), repr(float(r["ece"]))])
