"""scikit-learn compatible wrapper around :func:`stjem.trainer.train`."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted, validate_data

from .core_math import logsumexp, posterior_from_logits
from .data import Dataset, minmax_record
from .objectives import LossWeights
from .sgld import SgldConfig, denoise, run_chain
from .trainer import TrainConfig, train

class STJEMClassifier(ClassifierMixin, BaseEstimator):
    """Joint classifier / energy model trained with the stabilized generative loss.

    Inputs are min-max scaled to ``[-1, 1]`` per feature during ``fit``; the
    sampler works in that space and :meth:`sample` / :meth:`denoise` map back.
    Rows of ``y`` equal to ``unlabeled_label`` (default ``-1``, the scikit-learn
    semi-supervised convention) are unlabeled and feed the unlabeled term.

    Parameters
    ----------
    hidden : tuple of int
        Hidden layer widths.
    n_negatives : int
        SGLD negatives per batch; 0 gives the restricted-domain variant.
    gen_weight : float
        Weight of the generative term; 0 gives a plain discriminative MLP.
    unlabeled_weight : float
        Weight of the unlabeled term, used only when ``y`` has unlabeled rows.
    unlabeled_label : int or None
        Marker for unlabeled rows; ``None`` treats every row as labeled.
    """

    def __init__(self, hidden=(32, 32), activation="swish", n_negatives=8, gen_weight=1.0,
                 unlabeled_weight=0.5, epochs=20, batch_size=64, lr=1e-3, sgld_step_size=1.0,
                 sgld_noise=0.01, sgld_steps=20, unlabeled_label=-1, random_state=0):
        self.hidden = hidden
        self.activation = activation
        self.n_negatives = n_negatives
        self.gen_weight = gen_weight
        self.unlabeled_weight = unlabeled_weight
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.sgld_step_size = sgld_step_size
        self.sgld_noise = sgld_noise
        self.sgld_steps = sgld_steps
        self.unlabeled_label = unlabeled_label
        self.random_state = random_state

    def _train_config(self, use_unlabeled):
        return TrainConfig(
            hidden=tuple(self.hidden), activation=self.activation, batch_size=self.batch_size,
            n_negatives=self.n_negatives, epochs=self.epochs, lr=self.lr,
            seed=int(self.random_state),
            weights=LossWeights(gen=self.gen_weight, unlabeled=self.unlabeled_weight,
                                use_unlabeled=use_unlabeled),
            sgld=SgldConfig(step_size=self.sgld_step_size, noise_scale=self.sgld_noise,
                            n_steps=self.sgld_steps))

    def fit(self, X, y):
        X, y = validate_data(self, X, y, dtype=np.float64)
        check_classification_targets(y)
        if self.unlabeled_label is not None and y.dtype.kind in "iuf":
            labeled = y != self.unlabeled_label
        else:
            labeled = np.ones(len(y), dtype=bool)
        if not labeled.any():
            raise ValueError("y needs at least one labeled row")
        self.classes_ = np.unique(y[labeled])
        codes = np.zeros(len(y), dtype=np.int64)
        codes[labeled] = np.searchsorted(self.classes_, y[labeled])
        self.shift_, self.scale_ = minmax_record(X)
        ds = Dataset(self._scale(X), codes, labeled, shift=self.shift_, scale=self.scale_,
                     n_classes=max(len(self.classes_), 1))
        self.network_, self.log_ = train(self._train_config(bool((~labeled).any())), ds)
        return self

    def _scale(self, X):
        return (X - self.shift_) / self.scale_

    def _unscale(self, Z):
        return Z * self.scale_ + self.shift_

    def _check(self, X):
        check_is_fitted(self, "network_")
        return self._scale(validate_data(self, X, dtype=np.float64, reset=False))

    def decision_function(self, X):
        """Class logits, i.e. negative energies ``f(x)_y``."""
        Z = self._check(X)
        logits = self.network_.forward(Z)
        return logits[:, 1] - logits[:, 0] if len(self.classes_) == 2 else logits

    def predict_proba(self, X):
        Z = self._check(X)
        return posterior_from_logits(self.network_.forward(Z), axis=1)

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]

    def score_samples(self, X):
        """Unnormalized ``log p(x)`` in the scaled space: ``logsumexp_y f(x)_y``."""
        Z = self._check(X)
        return logsumexp(self.network_.forward(Z), axis=1)

    def sample(self, n, y=None, n_steps=100, step_size=None, random_state=None):
        """SGLD samples from uniform starts; ``y`` picks a class-conditional chain."""
        check_is_fitted(self, "network_")
        head = "marginal"
        if y is not None:
            hits = np.flatnonzero(self.classes_ == y)
            if not len(hits):
                raise ValueError(f"unknown class {y!r}")
            head = int(hits[0])
        cfg = SgldConfig(step_size=step_size or self.sgld_step_size, noise_scale=self.sgld_noise,
                         n_steps=n_steps, init="uniform")
        seed = self.random_state if random_state is None else random_state
        rng = np.random.default_rng([int(seed), 5])
        xs, _ = run_chain(self.network_, cfg, rng=rng, n=int(n), head=head)
        return self._unscale(xs)

    def denoise(self, X, n_steps=100, step_size=None):
        """Greedy noise-free ascent on ``logsumexp f`` from each row of ``X``."""
        Z = self._check(X)
        cfg = SgldConfig(step_size=step_size or self.sgld_step_size, noise_scale=0.0, n_steps=n_steps)
        out, _ = denoise(self.network_, Z, cfg)
        return self._unscale(out)
