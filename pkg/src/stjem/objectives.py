"""Loss terms for stabilized joint energy model training.

Every net-level term returns ``(value, grad)`` where ``grad`` is the gradient
of the value with respect to the flat network parameters. Each is built on a
``*_from_logits`` kernel returning ``(value, dlogits)``, so one forward and one
backward pass serve all terms.

The generative term for a labeled positive ``(x, y)`` is the negative log of a
softmax over a candidate set that contains ``x`` itself, every other batch
example (whatever its label) and every SGLD negative::

    gen(x, y) = logsumexp_{c in C} f(c)_y - f(x)_y  >= 0

Since ``x`` is in ``C`` the softmax probability of the positive never exceeds
one. Negatives far below the data in ``f_y`` receive vanishing weight and the
update collapses to ``grad f(x)_y - grad f(x)_y = 0`` instead of blowing up.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from .core_math import log_softmax, logsumexp, softmax
from .exceptions import InvalidArgumentError

REPORT_COLUMNS = ("xent", "gen_term", "unlabeled_term", "samples_xent_term",
                  "total", "grad_norm", "candidate_count")


@dataclass
class Batch:
    """Positive examples plus optional SGLD negatives.

    ``ys`` entries are ignored where ``labeled_mask`` is false.
    """

    xs: np.ndarray
    ys: np.ndarray
    labeled_mask: np.ndarray | None = None
    negatives: np.ndarray | None = None

    def __post_init__(self):
        self.xs = np.atleast_2d(np.asarray(self.xs, dtype=np.float64))
        n, dx = self.xs.shape
        if n < 1:
            raise InvalidArgumentError("batch needs at least one example")
        self.ys = np.asarray(self.ys, dtype=np.int64).reshape(n)
        if self.labeled_mask is None:
            self.labeled_mask = np.ones(n, dtype=bool)
        self.labeled_mask = np.asarray(self.labeled_mask, dtype=bool).reshape(n)
        if self.negatives is None:
            self.negatives = np.empty((0, dx))
        self.negatives = np.asarray(self.negatives, dtype=np.float64).reshape(-1, dx)
        if not (np.all(np.isfinite(self.xs)) and np.all(np.isfinite(self.negatives))):
            raise InvalidArgumentError("batch contains non-finite values")
        if np.any(self.ys[self.labeled_mask] < 0):
            raise InvalidArgumentError("labeled rows need non-negative labels")

    @property
    def n_labeled(self):
        return int(self.labeled_mask.sum())

    @property
    def n_unlabeled(self):
        return int((~self.labeled_mask).sum())

    def candidates(self):
        return np.concatenate([self.xs, self.negatives], axis=0)

    def without_negatives(self):
        return replace(self, negatives=None)


@dataclass
class LossWeights:
    xent: float = 1.0
    gen: float = 1.0
    unlabeled: float = 0.5
    samples_xent: float = 0.0
    use_unlabeled: bool = False
    use_samples_xent: bool = False
    # treat posterior weights of the unlabeled term as constants
    unlabeled_stop_grad: bool = True


@dataclass
class LossReport:
    xent: float = 0.0
    gen_term: float = 0.0
    unlabeled_term: float = 0.0
    samples_xent_term: float = 0.0
    total: float = 0.0
    grad_norm: float = 0.0
    candidate_count: int = 0

    def to_row(self):
        return asdict(self)


def _check_classes(ys, dy):
    if ys.size and (ys.min() < 0 or ys.max() >= dy):
        raise InvalidArgumentError(f"class index out of range [0, {dy})")


# --- logits-level kernels -------------------------------------------------

def xent_from_logits(logits, ys):
    """Mean ``-log softmax(logits)[y]`` and its gradient in the logits."""
    logits = np.atleast_2d(logits)
    ys = np.asarray(ys, dtype=np.int64)
    if ys.size == 0:
        raise InvalidArgumentError("cross-entropy needs at least one labeled example")
    _check_classes(ys, logits.shape[1])
    n = len(ys)
    lp = log_softmax(logits, axis=1)
    value = -float(np.mean(lp[np.arange(n), ys]))
    d = np.exp(lp)
    d[np.arange(n), ys] -= 1.0
    return value, d / n


def generative_from_logits(cand_logits, pos_index, pos_class):
    """Self-normalized generative term averaged over positives.

    ``cand_logits`` holds ``f(c)`` for every candidate; positive ``p`` sits at
    row ``pos_index[p]`` with class ``pos_class[p]``.
    """
    L = np.atleast_2d(cand_logits)
    pos_index = np.asarray(pos_index, dtype=np.int64)
    pos_class = np.asarray(pos_class, dtype=np.int64)
    P = len(pos_index)
    if P == 0:
        return 0.0, np.zeros_like(L)
    _check_classes(pos_class, L.shape[1])
    cols = L[:, pos_class]
    lse = logsumexp(cols, axis=0)
    terms = lse - L[pos_index, pos_class]
    w = softmax(cols, axis=0)
    onehot = np.zeros((P, L.shape[1]))
    onehot[np.arange(P), pos_class] = 1.0
    d = (w @ onehot) / P
    np.add.at(d, (pos_index, pos_class), -1.0 / P)
    return float(np.mean(terms)), d


def candidate_weights(cand_logits, y):
    """Softmax weights of every candidate for class ``y``."""
    return softmax(np.atleast_2d(cand_logits)[:, y], axis=0)


def unlabeled_from_logits(cand_logits, unl_index, stop_grad=True):
    """Posterior-weighted loss over unlabeled rows (negated objective).

    For unlabeled ``x``: ``sum_y p(y|x) * [-log p(y|x) + gen(x, y)]`` where
    ``gen`` is the generative term over the full candidate set.
    """
    L = np.atleast_2d(cand_logits)
    unl_index = np.asarray(unl_index, dtype=np.int64)
    U = len(unl_index)
    if U == 0:
        raise InvalidArgumentError("unlabeled term needs at least one unlabeled example")
    Lu = L[unl_index]
    logpost = log_softmax(Lu, axis=1)
    post = np.exp(logpost)
    lse_all = logsumexp(L, axis=0, keepdims=True)
    gen = lse_all - Lu
    a = -logpost + gen
    per = np.sum(post * a, axis=1)
    value = float(np.mean(per))

    W = softmax(L, axis=0)
    d = W * post.sum(axis=0, keepdims=True) / U
    # -log p(y|x): sum_y p_y (p_k - delta_yk)
    du = post * post.sum(axis=1, keepdims=True) - post
    du -= post
    if not stop_grad:
        du += post * (a - per[:, None])
    np.add.at(d, unl_index, du / U)
    return value, d


def mi_diagnostic(posteriors):
    """Mutual information of the empirical joint formed by posterior rows.

    Returns ``(mi, mean_log_post, marginal_entropy)`` with
    ``mi = E_x E_{y|x}[log p(y|x)] + H(mean posterior)``; ``0 log 0 = 0``.
    """
    P = np.atleast_2d(np.asarray(posteriors, dtype=np.float64))
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(P > 0, P * np.log(P), 0.0)
        py = P.mean(axis=0)
        h = -float(np.sum(np.where(py > 0, py * np.log(py), 0.0)))
    mean_log_post = float(np.sum(plogp) / P.shape[0])
    return mean_log_post + h, mean_log_post, h


# --- net-level terms ------------------------------------------------------

def _labeled(batch):
    idx = np.flatnonzero(batch.labeled_mask)
    return idx, batch.ys[idx]


def xent_loss(net, batch):
    idx, ys = _labeled(batch)
    if len(idx) == 0:
        raise InvalidArgumentError("cross-entropy needs at least one labeled example")
    X = batch.xs[idx]
    value, d = xent_from_logits(net.forward(X), ys)
    return value, net.grad_params(X, d)


def stjem_generative_term(net, batch):
    idx, ys = _labeled(batch)
    C = batch.candidates()
    value, d = generative_from_logits(net.forward(C), idx, ys)
    return value, net.grad_params(C, d)


def res_jem_term(net, batch):
    """Generative term with the candidate set restricted to the batch itself."""
    return stjem_generative_term(net, batch.without_negatives())


def unlabeled_term(net, batch, stop_grad=True):
    C = batch.candidates()
    value, d = unlabeled_from_logits(net.forward(C), np.flatnonzero(~batch.labeled_mask), stop_grad)
    return value, net.grad_params(C, d)


def samples_xent_term(net, conditional_samples, target_classes):
    X = np.atleast_2d(np.asarray(conditional_samples, dtype=np.float64))
    ys = np.asarray(target_classes, dtype=np.int64).reshape(-1)
    if len(ys) < 1 or len(ys) != len(X):
        raise InvalidArgumentError("need one target class per sample and at least one sample")
    value, d = xent_from_logits(net.forward(X), ys)
    return value, net.grad_params(X, d)


def total_loss(net, batch, weights=None, samples=None, sample_classes=None):
    """Weighted sum of all enabled terms with a single backward pass.

    ``total = w_xent * xent + w_gen * gen + [w_unl * unlabeled] + [w_s * samples_xent]``.
    With no negatives the generative term is the restricted-domain variant.
    """
    w = weights or LossWeights()
    if w.use_unlabeled and batch.n_unlabeled == 0:
        raise InvalidArgumentError("use_unlabeled requires unlabeled rows in the batch")
    if w.use_samples_xent and samples is None:
        raise InvalidArgumentError("use_samples_xent requires conditional samples")
    lab_idx, lab_y = _labeled(batch)
    C = batch.candidates()
    rows = [C]
    if w.use_samples_xent:
        S = np.atleast_2d(np.asarray(samples, dtype=np.float64))
        rows.append(S)
    X = np.concatenate(rows, axis=0)
    logits = net.forward(X)
    nc = len(C)
    Lc = logits[:nc]
    D = np.zeros_like(logits)
    rep = LossReport(candidate_count=nc)

    if len(lab_idx):
        rep.xent, d = xent_from_logits(Lc[lab_idx], lab_y)
        D[lab_idx] += w.xent * d
    rep.gen_term, d = generative_from_logits(Lc, lab_idx, lab_y)
    D[:nc] += w.gen * d
    if w.use_unlabeled:
        rep.unlabeled_term, d = unlabeled_from_logits(
            Lc, np.flatnonzero(~batch.labeled_mask), w.unlabeled_stop_grad)
        D[:nc] += w.unlabeled * d
    if w.use_samples_xent:
        rep.samples_xent_term, d = xent_from_logits(logits[nc:], sample_classes)
        D[nc:] += w.samples_xent * d

    rep.total = (w.xent * rep.xent + w.gen * rep.gen_term
                 + (w.unlabeled * rep.unlabeled_term if w.use_unlabeled else 0.0)
                 + (w.samples_xent * rep.samples_xent_term if w.use_samples_xent else 0.0))
    grad = net.grad_params(X, D)
    rep.grad_norm = float(np.linalg.norm(grad))
    return rep, grad
