"""Flat ``key = value`` run configuration.

Lines are ``key = value``; ``#`` starts a comment; blank lines are ignored.
Keys are the :class:`~stjem.trainer.TrainConfig` fields, ``sgld.*`` for the
sampler, ``weights.*`` for the loss terms and ``data.*`` for the dataset.
Unknown keys and badly typed values are rejected at parse time.

Precedence, highest first: command-line flag, environment (``STJEM_SEED``,
``STJEM_THREADS``), config file, built-in default.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .exceptions import InvalidArgumentError
from .objectives import LossWeights
from .sgld import SgldConfig
from .trainer import TrainConfig

ENV_SEED = "STJEM_SEED"
ENV_THREADS = "STJEM_THREADS"


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text):
    parts = [p for p in text.replace(",", " ").split() if p]
    return tuple(int(p) for p in parts)


def _pair(text):
    if text.strip().lower() == "none":
        return None
    vals = tuple(float(p) for p in text.replace(",", " ").split())
    if len(vals) != 2:
        raise ValueError("expected two numbers")
    return vals


def _target(text):
    t = text.strip()
    return t if t == "marginal" else int(t)


@dataclass
class DataConfig:
    # two_moons | gmm | ring | two_mode_1d | csv
    name: str = "two_moons"
    path: str = ""
    n: int = 1000
    noise_sd: float = 0.1
    label_noise: float = 0.0
    # -1 keeps every label
    keep_labels: int = -1
    test_fraction: float = 0.3
    seed: int = 0


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    # 0 leaves the BLAS thread pool alone
    threads: int = 0


_TRAIN_TYPES = {
    "hidden": _ints, "activation": str, "batch_size": int, "n_negatives": int, "epochs": int,
    "optimizer": str, "lr": float, "momentum": float, "beta1": float, "beta2": float,
    "adam_eps": float, "lr_decay_factor": float, "lr_decay_every": int,
    "buffer_capacity": int, "reinit_prob": float, "seed": int,
    "divergence_threshold": float, "max_rollbacks": int, "eval_every": int,
    "labeled_unlabeled_ratio": float, "conditional_negatives": _bool, "negative_stride": int,
    "dequantize": float,
}
_SGLD_TYPES = {
    "step_size": float, "noise_scale": float, "n_steps": int, "target": _target, "init": str,
    "schedule": str, "max_steps": int, "clamp": _pair, "box": _pair,
}
_WEIGHT_TYPES = {
    "xent": float, "gen": float, "unlabeled": float, "samples_xent": float,
    "use_unlabeled": _bool, "use_samples_xent": _bool, "unlabeled_stop_grad": _bool,
}
_DATA_TYPES = {f.name: (str if f.type == "str" else {"int": int, "float": float}[f.type])
               for f in fields(DataConfig)}

KNOWN_KEYS = (sorted(_TRAIN_TYPES) + [f"sgld.{k}" for k in sorted(_SGLD_TYPES)]
              + [f"weights.{k}" for k in sorted(_WEIGHT_TYPES)]
              + [f"data.{k}" for k in sorted(_DATA_TYPES)] + ["threads"])


def parse_text(text, source="<config>"):
    """Parse config text into a ``{key: typed value}`` dict."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidArgumentError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = _convert(key, value, f"{source}:{lineno}")
    return out


def _convert(key, value, where):
    if key == "threads":
        conv = int
    elif key.startswith("sgld."):
        conv = _SGLD_TYPES.get(key[5:])
    elif key.startswith("weights."):
        conv = _WEIGHT_TYPES.get(key[8:])
    elif key.startswith("data."):
        conv = _DATA_TYPES.get(key[5:])
    else:
        conv = _TRAIN_TYPES.get(key)
    if conv is None:
        raise InvalidArgumentError(f"{where}: unknown key {key!r}")
    try:
        return conv(value)
    except ValueError as exc:
        raise InvalidArgumentError(f"{where}: bad value for {key!r}: {exc}") from None


def load_file(path):
    return parse_text(Path(path).read_text(), str(path))


def env_overrides(environ=None):
    env = os.environ if environ is None else environ
    out = {}
    if env.get(ENV_SEED, "") != "":
        out["seed"] = _convert("seed", env[ENV_SEED], ENV_SEED)
    if env.get(ENV_THREADS, "") != "":
        out["threads"] = _convert("threads", env[ENV_THREADS], ENV_THREADS)
    return out


def build(file_values=None, env_values=None, cli_values=None):
    """Merge the layers (defaults < file < env < cli) into a :class:`RunConfig`."""
    merged = {}
    for layer in (file_values, env_values, cli_values):
        merged.update(layer or {})
    train_kw, sgld_kw, weight_kw, data_kw = {}, {}, {}, {}
    threads = 0
    for key, value in merged.items():
        if key == "threads":
            threads = value
        elif key.startswith("sgld."):
            sgld_kw[key[5:]] = value
        elif key.startswith("weights."):
            weight_kw[key[8:]] = value
        elif key.startswith("data."):
            data_kw[key[5:]] = value
        elif key in _TRAIN_TYPES:
            train_kw[key] = value
        else:
            raise InvalidArgumentError(f"unknown key {key!r}")
    train = TrainConfig(sgld=SgldConfig(**sgld_kw), weights=LossWeights(**weight_kw), **train_kw)
    if threads < 0:
        raise InvalidArgumentError("threads must be >= 0")
    return RunConfig(train=train, data=replace(DataConfig(), **data_kw), threads=threads)


def dump_text(run):
    """Render every key of ``run``; ``parse_text`` of the result rebuilds it."""
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if v is None:
            return "none"
        if isinstance(v, tuple):
            return ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
        return repr(v) if isinstance(v, float) else str(v)

    t = run.train
    lines = [f"{k} = {fmt(getattr(t, k))}" for k in _TRAIN_TYPES]
    lines += [f"sgld.{k} = {fmt(getattr(t.sgld, k))}" for k in _SGLD_TYPES]
    lines += [f"weights.{k} = {fmt(getattr(t.weights, k))}" for k in _WEIGHT_TYPES]
    lines += [f"data.{k} = {fmt(getattr(run.data, k))}" for k in _DATA_TYPES]
    lines.append(f"threads = {run.threads}")
    return "\n".join(lines) + "\n"
