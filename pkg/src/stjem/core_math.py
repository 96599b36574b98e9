"""Numerically safe primitives shared by every other module.

All arithmetic is float64. Ties in ``argmax`` resolve to the lowest index,
which is what :func:`numpy.argmax` already does.
"""
from __future__ import annotations

import numpy as np

from .exceptions import InvalidArgumentError

DEFAULT_ECE_BINS = 15


def _as_finite(values, name="values"):
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise InvalidArgumentError(f"{name} must be non-empty")
    if np.isnan(arr).any():
        raise InvalidArgumentError(f"{name} contains NaN")
    return arr


def logsumexp(values, axis=None, keepdims=False):
    """Return ``log(sum(exp(values)))`` along ``axis`` without overflow.

    The maximum is subtracted before exponentiation, so inputs of magnitude
    up to ~1e308 are handled. ``-inf`` entries are allowed (they contribute
    zero mass); NaN and empty input raise :class:`InvalidArgumentError`.
    """
    arr = _as_finite(values)
    m = np.max(arr, axis=axis, keepdims=True)
    # all -inf slices would give nan from (-inf) - (-inf)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(over="ignore"):
        out = np.log(np.sum(np.exp(arr - m), axis=axis, keepdims=True)) + m
    if not keepdims:
        out = np.squeeze(out, axis=axis) if axis is not None else out.reshape(())
    if out.ndim == 0:
        return float(out)
    return out


def log_softmax(z, axis=-1):
    arr = _as_finite(z, "logits")
    return arr - logsumexp(arr, axis=axis, keepdims=True)


def softmax(z, axis=-1):
    """Softmax along ``axis``; invariant to adding a constant along that axis."""
    arr = _as_finite(z, "logits")
    shifted = arr - np.max(arr, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def posterior_from_logits(q, axis=-1):
    """Class posterior p(y|x) of an energy model from its logits ``q = f(x)``.

    The partition function is shared by all classes and inputs, so it cancels
    and the posterior is exactly the softmax of the logits.
    """
    return softmax(q, axis=axis)


def ece(confidences, correct, n_bins=DEFAULT_ECE_BINS):
    """Expected calibration error with equal-width bins on [0, 1].

    Bin ``b`` holds confidences ``c`` with ``min(floor(c * n_bins), n_bins - 1) == b``.
    ECE = sum_b (|b| / N) * |acc(b) - conf(b)|; empty bins contribute nothing.
    """
    if not isinstance(n_bins, (int, np.integer)) or n_bins <= 0:
        raise InvalidArgumentError("n_bins must be a positive integer")
    conf = _as_finite(confidences, "confidences").ravel()
    hit = np.asarray(correct, dtype=bool).ravel()
    if conf.shape != hit.shape:
        raise InvalidArgumentError("confidences and correct must have equal length")
    if conf.min() < 0.0 or conf.max() > 1.0:
        raise InvalidArgumentError("confidences must lie in [0, 1]")
    n = conf.size
    bins = np.minimum(np.floor(conf * n_bins).astype(np.int64), n_bins - 1)
    counts = np.bincount(bins, minlength=n_bins)
    conf_sum = np.bincount(bins, weights=conf, minlength=n_bins)
    acc_sum = np.bincount(bins, weights=hit.astype(np.float64), minlength=n_bins)
    occupied = counts > 0
    gaps = np.abs(acc_sum[occupied] - conf_sum[occupied]) / counts[occupied]
    return float(np.sum(counts[occupied] / n * gaps))
