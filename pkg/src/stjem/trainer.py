"""Training loop: batches, SGLD negatives, loss, optimizer, divergence rollback.

Random streams are derived from the run seed so every run is reproducible:

* network init: ``seed``
* batch order for epoch ``e``: ``default_rng([seed, 3, e])``
* SGLD noise / starts: ``default_rng([seed, 1])`` (state checkpointed)
* replay buffer: ``default_rng([seed, 2])`` (state checkpointed)
* dequantization noise for epoch ``e``: ``default_rng([seed, 4, e])``

Batch order depends only on ``(seed, epoch)``, so a run resumed from an
end-of-epoch checkpoint replays the uninterrupted run exactly.
"""
from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import energy_net
from .core_math import ece as ece_score
from .core_math import log_softmax, posterior_from_logits
from .exceptions import FormatError, InvalidArgumentError, SamplerDivergenceError, TrainingFailedError
from .objectives import REPORT_COLUMNS, Batch, LossWeights, mi_diagnostic, total_loss
from .sgld import ReplayBuffer, SgldConfig, run_chain, scheduled_steps

log = logging.getLogger(__name__)

STATE_MAGIC = b"STJEMSTA"
STATE_VERSION = 1
METRIC_COLUMNS = ("step", "epoch", "lr") + REPORT_COLUMNS


@dataclass
class TrainConfig:
    hidden: tuple = (32, 32)
    activation: str = "swish"
    batch_size: int = 64
    n_negatives: int = 8
    epochs: int = 20
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_decay_factor: float = 1.0
    # 0 keeps the learning rate constant
    lr_decay_every: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    sgld: SgldConfig = field(default_factory=SgldConfig)
    buffer_capacity: int = 10_000
    reinit_prob: float = 0.05
    seed: int = 0
    divergence_threshold: float = 50.0
    max_rollbacks: int = 3
    # in epochs
    eval_every: int = 1
    # unlabeled rows per labeled row in semi-supervised batches
    labeled_unlabeled_ratio: float = 1.0
    conditional_negatives: bool = False
    # regenerate negatives every n-th step, reuse them in between
    negative_stride: int = 1
    # width of uniform noise added to batch inputs (quantized data); 0 disables
    dequantize: float = 0.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvalidArgumentError("batch_size must be >= 1")
        if self.n_negatives < 0:
            raise InvalidArgumentError("n_negatives must be >= 0")
        if not self.lr > 0:
            raise InvalidArgumentError("lr must be > 0")
        if self.optimizer not in ("adam", "sgd"):
            raise InvalidArgumentError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 1 or self.eval_every < 1 or self.negative_stride < 1:
            raise InvalidArgumentError("epochs, eval_every and negative_stride must be >= 1")
        if self.dequantize < 0:
            raise InvalidArgumentError("dequantize must be >= 0")
        if self.labeled_unlabeled_ratio < 0:
            raise InvalidArgumentError("labeled_unlabeled_ratio must be >= 0")
        if self.weights.use_samples_xent and not (self.conditional_negatives and self.n_negatives > 0):
            raise InvalidArgumentError("samples cross-entropy needs conditional negatives")


# --- optimizers -------------------------------------------------------------

class SGD:
    def __init__(self, n, momentum=0.9):
        self.momentum = momentum
        self.velocity = np.zeros(n)

    def step(self, params, grad, lr):
        self.velocity = self.momentum * self.velocity + grad
        return params - lr * self.velocity

    def get_state(self):
        return {"velocity": self.velocity.copy()}, {}

    def set_state(self, arrays, meta):
        self.velocity = arrays["velocity"].copy()


class Adam:
    def __init__(self, n, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, params, grad, lr):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return params - lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def get_state(self):
        return {"m": self.m.copy(), "v": self.v.copy()}, {"t": self.t}

    def set_state(self, arrays, meta):
        self.m, self.v, self.t = arrays["m"].copy(), arrays["v"].copy(), int(meta["t"])


def make_optimizer(cfg, n):
    if cfg.optimizer == "sgd":
        return SGD(n, cfg.momentum)
    return Adam(n, cfg.beta1, cfg.beta2, cfg.adam_eps)


# --- batching ----------------------------------------------------------------

def _epoch_rng(seed, epoch):
    return np.random.default_rng([int(seed), 3, int(epoch)])


def plain_batcher(dataset, seed, batch_size=64, epoch=0):
    """Shuffled labeled rows in chunks of ``batch_size``."""
    return semi_supervised_batcher(dataset, 0.0, seed, batch_size, epoch)


def semi_supervised_batcher(dataset, ratio, seed, batch_size=64, epoch=0):
    """Yield index arrays (labeled first, then unlabeled) for one epoch.

    ``ratio`` is unlabeled rows per labeled row: ``1.0`` with batch 64 gives
    32 + 32. Every labeled row appears exactly once per epoch; unlabeled rows
    are cycled through a shuffled order.
    """
    lab = np.flatnonzero(dataset.labeled_mask)
    unl = np.flatnonzero(~dataset.labeled_mask)
    if len(lab) == 0:
        raise InvalidArgumentError("dataset has no labeled rows")
    if ratio > 0 and len(unl) == 0:
        raise InvalidArgumentError("ratio > 0 requires unlabeled rows")
    rng = _epoch_rng(seed, epoch)
    lab = rng.permutation(lab)
    if ratio <= 0:
        for s in range(0, len(lab), batch_size):
            yield lab[s:s + batch_size]
        return
    n_lab = max(1, int(round(batch_size / (1.0 + ratio))))
    order = rng.permutation(unl)
    pos = 0
    for s in range(0, len(lab), n_lab):
        chunk = lab[s:s + n_lab]
        n_unl = batch_size - n_lab if len(chunk) == n_lab else max(1, int(round(len(chunk) * ratio)))
        take = []
        while n_unl > 0:
            if pos == len(order):
                order, pos = rng.permutation(unl), 0
            k = min(n_unl, len(order) - pos)
            take.append(order[pos:pos + k])
            pos += k
            n_unl -= k
        yield np.concatenate([chunk] + take)


# --- evaluation --------------------------------------------------------------

def evaluate(net, xs, ys=None, n_bins=15):
    """``(accuracy, ece, mean_xent)`` on labeled data.

    Accepts a :class:`~stjem.data.Dataset` (its labeled rows) or arrays.
    """
    if ys is None:
        ds = xs.labeled()
        xs, ys = ds.xs, ds.ys
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    ys = np.asarray(ys, dtype=np.int64)
    if len(ys) == 0:
        raise InvalidArgumentError("cannot evaluate on an empty dataset")
    logits = net.forward(xs)
    post = posterior_from_logits(logits, axis=1)
    pred = np.argmax(post, axis=1)
    correct = pred == ys
    acc = float(np.mean(correct))
    e = ece_score(post.max(axis=1), correct, n_bins)
    xent = -float(np.mean(log_softmax(logits, axis=1)[np.arange(len(ys)), ys]))
    return acc, e, xent


# --- logs ----------------------------------------------------------------------

@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    divergence_events: list = field(default_factory=list)

    @property
    def rollbacks(self):
        return sum(1 for e in self.divergence_events if e["action"].startswith("rollback"))

    def to_csv(self, path):
        write_metrics_csv(self.rows, path)


def write_metrics_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([r[c] if isinstance(r[c], (int, np.integer)) else repr(float(r[c]))
                        for c in METRIC_COLUMNS])


# --- checkpoint sidecar ------------------------------------------------------
# Layout: 8s magic | u32 version | u64 header_len | header JSON (utf-8)
#         | f64 little-endian arrays in header["arrays"] order

def _pack_state(meta, arrays):
    specs = [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()]
    header = json.dumps({"meta": meta, "arrays": specs}, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in arrays.values())
    return STATE_MAGIC + struct.pack("<IQ", STATE_VERSION, len(header)) + header + body


def _unpack_state(buf):
    if buf[:8] != STATE_MAGIC:
        raise FormatError("bad magic, not a trainer state file", 0)
    if len(buf) < 20:
        raise FormatError("truncated state header", len(buf))
    version, hlen = struct.unpack_from("<IQ", buf, 8)
    if version != STATE_VERSION:
        raise FormatError(f"unsupported state version {version}", 8)
    if 20 + hlen > len(buf):
        raise FormatError("truncated state header", len(buf))
    try:
        header = json.loads(buf[20:20 + hlen].decode())
    except ValueError:
        raise FormatError("corrupt state header", 20) from None
    off = 20 + hlen
    arrays = {}
    for spec in header["arrays"]:
        count = int(np.prod(spec["shape"]))
        if off + 8 * count > len(buf):
            raise FormatError(f"truncated array {spec['name']}", off)
        arrays[spec["name"]] = np.frombuffer(buf, "<f8", count, off).astype(np.float64).reshape(spec["shape"])
        off += 8 * count
    if off != len(buf):
        raise FormatError("trailing bytes in state file", off)
    return header["meta"], arrays


class _RunState:
    """Everything needed to restart training at an epoch boundary."""

    def __init__(self, net, opt, buffer, sgld_rng, epoch, step, halvings, negatives):
        self.params = net.params.copy()
        self.opt_arrays, self.opt_meta = opt.get_state()
        self.buffer = buffer.get_state()
        self.sgld_rng = sgld_rng.bit_generator.state
        self.epoch, self.step, self.halvings = epoch, step, halvings
        self.negatives = None if negatives is None else negatives.copy()

    def restore(self, net, opt, buffer, sgld_rng):
        net.params = self.params.copy()
        opt.set_state(self.opt_arrays, self.opt_meta)
        buffer.set_state(self.buffer)
        sgld_rng.bit_generator.state = self.sgld_rng

    def to_bytes(self):
        meta = {"epoch": self.epoch, "step": self.step, "halvings": self.halvings,
                "opt": self.opt_meta, "sgld_rng": self.sgld_rng, "buffer_rng": self.buffer["rng"]}
        arrays = {f"opt.{k}": v for k, v in self.opt_arrays.items()}
        arrays["buffer"] = self.buffer["data"]
        if self.negatives is not None:
            arrays["negatives"] = self.negatives
        return _pack_state(meta, arrays)

    @classmethod
    def from_bytes(cls, buf, params):
        meta, arrays = _unpack_state(buf)
        st = cls.__new__(cls)
        st.params = params
        st.opt_arrays = {k[4:]: v for k, v in arrays.items() if k.startswith("opt.")}
        st.opt_meta = meta["opt"]
        st.buffer = {"data": arrays["buffer"], "rng": meta["buffer_rng"]}
        st.sgld_rng = meta["sgld_rng"]
        st.epoch, st.step, st.halvings = meta["epoch"], meta["step"], meta["halvings"]
        st.negatives = arrays.get("negatives")
        return st


def save_checkpoint(directory, net, state):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    energy_net.save(net, d / "model.ckpt")
    (d / "model.ckpt.state").write_bytes(state.to_bytes())


def _lr_at(cfg, epoch, halvings):
    lr = cfg.lr * 0.5 ** halvings
    if cfg.lr_decay_every > 0:
        lr *= cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)
    return lr


def _diverged(rep, grad, threshold):
    vals = [rep.xent, rep.gen_term, rep.unlabeled_term, rep.samples_xent_term, rep.total]
    if not (np.all(np.isfinite(vals)) and np.all(np.isfinite(grad))):
        return "non-finite loss"
    if rep.gen_term > threshold:
        return f"gen_term {rep.gen_term:.3g} above threshold"
    return None


def _next_negatives(cfg, net, dataset, idx, mask, buffer, sgld_rng, negative_fn, previous,
                    step, progress):
    """Negatives for one step and their classes (``None`` for marginal or reused ones)."""
    if negative_fn is not None:
        return np.asarray(negative_fn(net, step, sgld_rng), dtype=np.float64), None
    if cfg.n_negatives == 0:
        return None, None
    if previous is not None and step % cfg.negative_stride != 0:
        return previous, None
    head = neg_classes = None
    if cfg.conditional_negatives:
        head = neg_classes = sgld_rng.choice(dataset.ys[idx][mask], size=cfg.n_negatives)
    starts, _ = buffer.sample(cfg.n_negatives)
    T = scheduled_steps(cfg.sgld, progress)
    chain_cfg = replace(cfg.sgld, init="given")
    negatives, _ = run_chain(net, chain_cfg, x0=starts, rng=sgld_rng,
                             head="marginal" if head is None else head, n_steps=T)
    buffer.push(negatives)
    return negatives, neg_classes


def train(config, dataset, eval_data=None, checkpoint_dir=None, resume_from=None,
          negative_fn=None, callback=None):
    """Train an energy network on ``dataset``; returns ``(net, TrainLog)``.

    ``negative_fn(net, step, rng)``, if given, replaces SGLD and returns the
    negatives for a step. ``callback(epoch, net, log)`` runs after each epoch.
    Raises :class:`TrainingFailedError` after ``max_rollbacks`` rollbacks.
    """
    cfg = config
    if len(dataset) == 0:
        raise InvalidArgumentError("dataset is empty")
    dims = (dataset.dx, *cfg.hidden, dataset.n_classes)
    net = energy_net.init(dims, cfg.activation, cfg.seed)
    opt = make_optimizer(cfg, net.n_params)
    buffer = ReplayBuffer(dataset.dx, cfg.buffer_capacity, cfg.reinit_prob, cfg.sgld.box,
                          seed=[cfg.seed, 2])
    sgld_rng = np.random.default_rng([cfg.seed, 1])
    has_unl = bool((~dataset.labeled_mask).any())
    use_unl = cfg.weights.use_unlabeled and has_unl and cfg.labeled_unlabeled_ratio > 0
    ratio = cfg.labeled_unlabeled_ratio if use_unl else 0.0
    trainlog = TrainLog()
    epoch, step, halvings = 0, 0, 0
    negatives = None

    if resume_from is not None:
        d = Path(resume_from)
        net = energy_net.load(d / "model.ckpt", expected_dims=dims)
        state = _RunState.from_bytes((d / "model.ckpt.state").read_bytes(), net.params.copy())
        state.restore(net, opt, buffer, sgld_rng)
        epoch, step, halvings, negatives = state.epoch, state.step, state.halvings, state.negatives
    snapshot = _RunState(net, opt, buffer, sgld_rng, epoch, step, halvings, negatives)

    while epoch < cfg.epochs:
        lr = _lr_at(cfg, epoch, halvings)
        batches = list(semi_supervised_batcher(dataset, ratio, cfg.seed, cfg.batch_size, epoch))
        failed = None
        deq_rng = np.random.default_rng([cfg.seed, 4, epoch]) if cfg.dequantize > 0 else None
        for b, idx in enumerate(batches):
            w = cfg.weights
            mask = dataset.labeled_mask[idx]
            if w.use_unlabeled and not (use_unl and (~mask).any()):
                w = replace(w, use_unlabeled=False)
            try:
                negatives, neg_classes = _next_negatives(
                    cfg, net, dataset, idx, mask, buffer, sgld_rng, negative_fn, negatives,
                    step, epoch + b / len(batches))
            except SamplerDivergenceError as exc:
                failed = str(exc)
                break
            if negatives is not None and not np.all(np.isfinite(negatives)):
                failed = "non-finite negatives"
                break
            xs = dataset.xs[idx]
            if deq_rng is not None:
                xs = xs + deq_rng.uniform(-0.5, 0.5, xs.shape) * cfg.dequantize
            batch = Batch(xs, np.where(mask, dataset.ys[idx], 0), mask, negatives)
            if w.use_samples_xent and neg_classes is None:
                w = replace(w, use_samples_xent=False)
            rep, grad = total_loss(net, batch, w, samples=negatives, sample_classes=neg_classes)
            reason = _diverged(rep, grad, cfg.divergence_threshold)
            if reason:
                failed = reason
                break
            net.params = opt.step(net.params, grad, lr)
            row = {"step": step, "epoch": epoch, "lr": lr}
            row.update(rep.to_row())
            trainlog.rows.append(row)
            step += 1
        if failed:
            n_roll = trainlog.rollbacks
            if n_roll >= cfg.max_rollbacks:
                trainlog.divergence_events.append({"step": step, "reason": failed, "action": "abort"})
                raise TrainingFailedError(f"training diverged at step {step}: {failed}", trainlog)
            trainlog.divergence_events.append(
                {"step": step, "reason": failed, "action": f"rollback to step {snapshot.step}, lr halved"})
            log.warning("divergence at step %d (%s); rolling back", step, failed)
            snapshot.restore(net, opt, buffer, sgld_rng)
            epoch, step, negatives = snapshot.epoch, snapshot.step, snapshot.negatives
            halvings += 1
            snapshot.halvings = halvings
            trainlog.rows = [r for r in trainlog.rows if r["step"] < step]
            continue
        epoch += 1
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            target = eval_data if eval_data is not None else dataset
            acc, e, xent = evaluate(net, target)
            mi = mi_diagnostic(posterior_from_logits(net.forward(dataset.xs), axis=1))
            trainlog.evals.append({"epoch": epoch, "step": step, "accuracy": acc, "ece": e,
                                   "xent": xent, "mi": mi[0], "mean_log_post": mi[1],
                                   "marginal_entropy": mi[2]})
            snapshot = _RunState(net, opt, buffer, sgld_rng, epoch, step, halvings, negatives)
            if checkpoint_dir is not None:
                save_checkpoint(checkpoint_dir, net, snapshot)
        if callback is not None:
            callback(epoch, net, trainlog)
    return net, trainlog
