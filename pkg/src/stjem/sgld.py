"""Stochastic Gradient Langevin Dynamics with a persistent replay buffer.

One step moves every chain uphill on the target head and adds Gaussian noise:

    x' = clip(x + (step_size / 2) * grad_x target(x) + noise_scale * N(0, I))

The noise scale is decoupled from the step size. Chains are batched: ``x`` is
``(n, Dx)`` and ``head`` is ``"marginal"``, one class index, or one per chain.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import InvalidArgumentError, SamplerDivergenceError

MIN_DENOISE_STEP = 1e-6


@dataclass
class SgldConfig:
    step_size: float = 1.0
    noise_scale: float = 0.01
    n_steps: int = 20
    target: object = "marginal"
    init: str = "buffer"
    schedule: str = "fixed"
    # linear schedule cap
    max_steps: int = 40
    # None disables clamping
    clamp: tuple | None = (-1.2, 1.2)
    box: tuple = (-1.0, 1.0)

    def __post_init__(self):
        if not self.step_size > 0:
            raise InvalidArgumentError("step_size must be > 0")
        if not self.noise_scale >= 0:
            raise InvalidArgumentError("noise_scale must be >= 0")
        if int(self.n_steps) < 1:
            raise InvalidArgumentError("n_steps must be >= 1")
        if self.init not in ("uniform", "buffer", "given"):
            raise InvalidArgumentError(f"unknown init {self.init!r}")
        if self.schedule not in ("fixed", "linear"):
            raise InvalidArgumentError(f"unknown schedule {self.schedule!r}")
        if not (isinstance(self.target, str) and self.target == "marginal"):
            if isinstance(self.target, str) or int(self.target) < 0:
                raise InvalidArgumentError(f"bad target {self.target!r}")
        lo, hi = self.box
        if not lo < hi:
            raise InvalidArgumentError("box must satisfy lo < hi")


def scheduled_steps(cfg, epoch_progress):
    """Chain length at fractional epoch ``epoch_progress``.

    The linear schedule adds one step per tenth of an epoch, capped at
    ``cfg.max_steps``.
    """
    if cfg.schedule == "fixed":
        return int(cfg.n_steps)
    extra = int(math.floor(epoch_progress * 10 + 1e-9))
    return int(min(cfg.max_steps, cfg.n_steps + extra))


@dataclass
class ChainDiagnostics:
    """Per-step target values ``energies[t, chain]`` after step ``t``."""

    energies: np.ndarray
    step_sizes: np.ndarray
    accepted: np.ndarray | None = None

    def __len__(self):
        return len(self.step_sizes)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "energy", "step_size"])
            for t, (e, a) in enumerate(zip(self.energies, self.step_sizes)):
                w.writerow([t, repr(float(np.mean(e))), repr(float(a))])


def _resolve_head(cfg, head):
    return cfg.target if head is None else head


def _clip(x, cfg):
    if cfg.clamp is None:
        return x
    return np.clip(x, cfg.clamp[0], cfg.clamp[1])


def sgld_step(net, x, cfg, rng=None, head=None, step_size=None, step_index=0):
    """One Langevin update. Noise is drawn from ``rng`` only when ``noise_scale > 0``."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InvalidArgumentError("x must be finite")
    alpha = cfg.step_size if step_size is None else step_size
    g = net.grad_input(x, _resolve_head(cfg, head))
    if not np.all(np.isfinite(g)):
        raise SamplerDivergenceError(step_index)
    out = x + 0.5 * alpha * g
    if cfg.noise_scale > 0:
        if rng is None:
            raise InvalidArgumentError("rng required when noise_scale > 0")
        out = out + cfg.noise_scale * rng.standard_normal(x.shape)
    return _clip(out, cfg)


def uniform_starts(rng, n, dx, box):
    return rng.uniform(box[0], box[1], size=(n, dx))


def run_chain(net, cfg, x0=None, rng=None, buffer=None, n=None, head=None, n_steps=None):
    """Run ``n_steps`` (default ``cfg.n_steps``) SGLD updates from the configured start.

    Returns the final iterates and a :class:`ChainDiagnostics`.
    """
    head = _resolve_head(cfg, head)
    if cfg.init == "given":
        if x0 is None:
            raise InvalidArgumentError("init='given' requires x0")
        x = np.array(x0, dtype=np.float64)
    elif cfg.init == "uniform":
        if n is None:
            raise InvalidArgumentError("init='uniform' requires n")
        x = uniform_starts(rng, n, net.dx, cfg.box)
    else:
        if buffer is None or n is None:
            raise InvalidArgumentError("init='buffer' requires buffer and n")
        x, _ = buffer.sample(n)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    T = int(cfg.n_steps if n_steps is None else n_steps)
    energies = np.empty((T, x.shape[0]))
    for t in range(T):
        x = sgld_step(net, x, cfg, rng, head=head, step_index=t)
        e = net.head_energy(x, head)
        if not np.all(np.isfinite(e)):
            raise SamplerDivergenceError(t, "non-finite energy during SGLD")
        energies[t] = e
    diag = ChainDiagnostics(energies, np.full(T, float(cfg.step_size)))
    return (x[0] if single else x), diag


class ReplayBuffer:
    """Fixed-capacity store of past chain end-points for persistent chains.

    Single writer: concurrent ``push`` calls must be serialized by the caller.
    """

    def __init__(self, dx, capacity=10_000, reinit_prob=0.05, box=(-1.0, 1.0), seed=0):
        if capacity <= 0:
            raise InvalidArgumentError("capacity must be > 0")
        if not 0.0 <= reinit_prob <= 1.0:
            raise InvalidArgumentError("reinit_prob must be in [0, 1]")
        self.dx = int(dx)
        self.capacity = int(capacity)
        self.reinit_prob = float(reinit_prob)
        self.box = tuple(box)
        self.rng = np.random.default_rng(seed)
        self.data = np.empty((self.capacity, self.dx))
        self.size = 0

    def __len__(self):
        return self.size

    def sample(self, n):
        """Return ``(starts, fresh)``; ``fresh[i]`` marks uniform re-initialisations."""
        if n <= 0:
            raise InvalidArgumentError("n must be > 0")
        fresh = self.rng.random(n) < self.reinit_prob
        uni = uniform_starts(self.rng, n, self.dx, self.box)
        if self.size == 0:
            return uni, np.ones(n, dtype=bool)
        idx = self.rng.integers(self.size, size=n)
        starts = np.where(fresh[:, None], uni, self.data[idx])
        return starts, fresh

    def push(self, samples):
        samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
        if samples.shape[1] != self.dx or not np.all(np.isfinite(samples)):
            raise InvalidArgumentError("samples must be finite with Dx columns")
        free = self.capacity - self.size
        head, rest = samples[:free], samples[free:]
        self.data[self.size:self.size + len(head)] = head
        self.size += len(head)
        if len(rest):
            slots = self.rng.integers(self.capacity, size=len(rest))
            self.data[slots] = rest

    def get_state(self):
        return {"data": self.data[:self.size].copy(), "rng": self.rng.bit_generator.state}

    def set_state(self, state):
        data = np.asarray(state["data"], dtype=np.float64).reshape(-1, self.dx)
        self.size = len(data)
        self.data[:self.size] = data
        self.rng.bit_generator.state = state["rng"]


def buffer_sample(buf, n):
    return buf.sample(n)


def buffer_push(buf, samples):
    buf.push(samples)


def denoise(net, x_corrupted, cfg, head=None):
    """Greedy noise-free ascent with per-step backtracking.

    Each step starts at ``cfg.step_size``; a proposal is accepted only if the
    target value does not decrease, otherwise the step is halved. A chain
    whose step falls below 1e-6 stops where it is.
    """
    head = _resolve_head(cfg, head)
    x = np.array(x_corrupted, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InvalidArgumentError("x_corrupted must be finite")
    single = x.ndim == 1
    x = np.atleast_2d(x)
    n = x.shape[0]
    e = net.head_energy(x, head)
    active = np.ones(n, dtype=bool)
    T = int(cfg.n_steps)
    energies = np.empty((T, n))
    steps = np.zeros(T)
    for t in range(T):
        g = net.grad_input(x, head)
        if not np.all(np.isfinite(g[active])):
            raise SamplerDivergenceError(t)
        alpha = np.full(n, float(cfg.step_size))
        pending = active.copy()
        while pending.any():
            idx = np.flatnonzero(pending)
            prop = _clip(x[idx] + 0.5 * alpha[idx, None] * g[idx], cfg)
            e_prop = net.head_energy(prop, head if isinstance(head, str) else np.broadcast_to(head, (n,))[idx])
            ok = e_prop >= e[idx]
            x[idx[ok]] = prop[ok]
            e[idx[ok]] = e_prop[ok]
            pending[idx[ok]] = False
            shrink = idx[~ok]
            alpha[shrink] *= 0.5
            dead = shrink[alpha[shrink] < MIN_DENOISE_STEP]
            active[dead] = False
            pending[dead] = False
        energies[t] = e
        steps[t] = float(np.mean(alpha)) if n else 0.0
        if not active.any():
            energies[t + 1:] = e
            break
    diag = ChainDiagnostics(energies, steps)
    return (x[0] if single else x), diag
