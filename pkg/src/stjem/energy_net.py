"""Fully-connected vector-valued energy function ``f(x) -> R^Dy``.

Output ``q_i = f(x)_i`` is the negative energy of the pair ``(x, y=i)``. The
network keeps all parameters in one flat float64 vector; per-layer weight
matrices and bias vectors are views into it. That layout is shared by the
gradients returned from :meth:`EnergyNetwork.grad_params`, so optimizers and
finite-difference checks work on plain vectors.

Randomness comes from numpy's PCG64 generator (``np.random.default_rng``);
identical seeds give bit-identical networks.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .core_math import logsumexp, softmax
from .exceptions import DimensionError, FormatError, InvalidArgumentError

ACTIVATIONS = ("swish", "tanh", "leaky_relu")
LEAKY_SLOPE = 0.2

MAGIC = b"STJEMNET"
FORMAT_VERSION = 1


def _sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def _act(name, a):
    if name == "swish":
        return a * _sigmoid(a)
    if name == "tanh":
        return np.tanh(a)
    return np.where(a > 0, a, LEAKY_SLOPE * a)


def _act_grad(name, a):
    if name == "swish":
        s = _sigmoid(a)
        return s + a * s * (1.0 - s)
    if name == "tanh":
        return 1.0 - np.tanh(a) ** 2
    return np.where(a > 0, 1.0, LEAKY_SLOPE)


def _layer_slices(dims):
    """Offsets of (W, b) for every layer inside the flat parameter vector."""
    out = []
    off = 0
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = (off, off + fan_in * fan_out, (fan_out, fan_in))
        off += fan_in * fan_out
        b = (off, off + fan_out)
        off += fan_out
        out.append((w, b))
    return out, off


class EnergyNetwork:
    """MLP with analytic forward/backward passes.

    Hidden layers use ``activation``; the output layer is linear. Inputs may
    be a single vector of length ``Dx`` or a batch of shape ``(N, Dx)``.
    """

    def __init__(self, layer_dims, activation="swish", params=None, seed=0):
        dims = tuple(int(d) for d in layer_dims)
        if len(dims) < 2:
            raise InvalidArgumentError("layer_dims needs at least input and output size")
        if any(d < 1 for d in dims):
            raise InvalidArgumentError("layer dimensions must be positive")
        if activation not in ACTIVATIONS:
            raise InvalidArgumentError(f"unknown activation {activation!r}")
        self.layer_dims = dims
        self.activation = activation
        self.seed = int(seed)
        self._slices, n = _layer_slices(dims)
        if params is None:
            params = np.zeros(n)
        params = np.ascontiguousarray(params, dtype=np.float64)
        if params.shape != (n,):
            raise DimensionError(f"expected {n} parameters, got {params.shape}")
        if not np.all(np.isfinite(params)):
            raise InvalidArgumentError("parameters must be finite")
        self.params = params

    @property
    def dx(self):
        return self.layer_dims[0]

    @property
    def dy(self):
        return self.layer_dims[-1]

    @property
    def n_params(self):
        return self.params.size

    def layers(self, vec=None):
        """List of ``(W, b)`` views into ``vec`` (defaults to the parameters)."""
        vec = self.params if vec is None else vec
        return [(vec[w0:w1].reshape(shape), vec[b0:b1])
                for (w0, w1, shape), (b0, b1) in self._slices]

    def copy(self):
        return EnergyNetwork(self.layer_dims, self.activation, self.params.copy(), self.seed)

    def with_params(self, params):
        return EnergyNetwork(self.layer_dims, self.activation, params, self.seed)

    def _check_input(self, x):
        arr = np.asarray(x, dtype=np.float64)
        single = arr.ndim == 1
        arr = np.atleast_2d(arr)
        if arr.ndim != 2 or arr.shape[1] != self.dx:
            raise DimensionError(f"input must have {self.dx} features, got shape {np.shape(x)}")
        if not np.all(np.isfinite(arr)):
            raise InvalidArgumentError("input contains non-finite values")
        return arr, single

    def _forward_cache(self, X):
        pre, post = [], [X]
        h = X
        layers = self.layers()
        for i, (W, b) in enumerate(layers):
            a = h @ W.T + b
            pre.append(a)
            h = a if i == len(layers) - 1 else _act(self.activation, a)
            post.append(h)
        return pre, post

    def forward(self, x):
        """Logits ``q = f(x)``, shape ``(Dy,)`` or ``(N, Dy)``."""
        X, single = self._check_input(x)
        h = X
        layers = self.layers()
        for i, (W, b) in enumerate(layers):
            h = h @ W.T + b
            if i < len(layers) - 1:
                h = _act(self.activation, h)
        return h[0] if single else h

    def _backward(self, X, upstream, want_params, want_input):
        pre, post = self._forward_cache(X)
        layers = self.layers()
        grad = np.zeros_like(self.params) if want_params else None
        glayers = self.layers(grad) if want_params else None
        delta = upstream
        for i in range(len(layers) - 1, -1, -1):
            W, _ = layers[i]
            if want_params:
                gW, gb = glayers[i]
                gW += delta.T @ post[i]
                gb += delta.sum(axis=0)
            if i > 0 or want_input:
                delta = delta @ W
                if i > 0:
                    delta = delta * _act_grad(self.activation, pre[i - 1])
        return grad, (delta if want_input else None)

    def grad_params(self, x, upstream):
        """Gradient w.r.t. the flat parameters of ``sum_n upstream[n] . f(x[n])``."""
        X, single = self._check_input(x)
        U = np.asarray(upstream, dtype=np.float64)
        U = U[None, :] if single else U
        if U.shape != (X.shape[0], self.dy):
            raise DimensionError(f"upstream must have shape {(X.shape[0], self.dy)}, got {U.shape}")
        if not np.all(np.isfinite(U)):
            raise InvalidArgumentError("upstream must be finite")
        grad, _ = self._backward(X, U, True, False)
        return grad

    def _head_upstream(self, X, head):
        n = X.shape[0]
        if isinstance(head, str):
            if head != "marginal":
                raise InvalidArgumentError(f"unknown head {head!r}")
            return softmax(self.forward(X), axis=1)
        cls = np.broadcast_to(np.asarray(head, dtype=np.int64), (n,))
        if cls.min() < 0 or cls.max() >= self.dy:
            raise InvalidArgumentError(f"class index out of range [0, {self.dy})")
        U = np.zeros((n, self.dy))
        U[np.arange(n), cls] = 1.0
        return U

    def grad_input(self, x, head="marginal"):
        """Gradient in ``x`` of ``f(x)_head`` or of ``logsumexp(f(x))``.

        ``head`` is ``"marginal"``, a class index, or one index per row.
        """
        X, single = self._check_input(x)
        U = self._head_upstream(X, head)
        _, gx = self._backward(X, U, False, True)
        return gx[0] if single else gx

    def head_energy(self, x, head="marginal"):
        """Target value driven up by SGLD: ``f(x)_head`` or ``logsumexp(f(x))``."""
        X, single = self._check_input(x)
        q = self.forward(X)
        if isinstance(head, str):
            if head != "marginal":
                raise InvalidArgumentError(f"unknown head {head!r}")
            out = logsumexp(q, axis=1)
        else:
            cls = np.broadcast_to(np.asarray(head, dtype=np.int64), (X.shape[0],))
            if cls.min() < 0 or cls.max() >= self.dy:
                raise InvalidArgumentError(f"class index out of range [0, {self.dy})")
            out = q[np.arange(X.shape[0]), cls]
        out = np.atleast_1d(out)
        return out[0] if single else out

    def __repr__(self):
        return f"EnergyNetwork(layer_dims={self.layer_dims}, activation={self.activation!r})"


def init(layer_dims, activation="swish", seed=0):
    """Network with N(0, 1/fan_in) weights and zero biases."""
    net = EnergyNetwork(layer_dims, activation, seed=seed)
    rng = np.random.default_rng(seed)
    params = np.zeros(net.n_params)
    for (W, _), d_in in zip(net.layers(params), net.layer_dims[:-1]):
        W[...] = rng.standard_normal(W.shape) / np.sqrt(d_in)
    net.params = params
    return net


def forward(net, x):
    return net.forward(x)


def grad_params(net, x, upstream):
    return net.grad_params(x, upstream)


def grad_input(net, x, head="marginal"):
    return net.grad_input(x, head)


# Checkpoint layout, little-endian throughout:
#   8s magic | u32 version | u32 n_dims | u32 dims[n_dims] | u8 activation
#   | i64 seed | u64 n_params | f64 params[n_params]

def to_bytes(net):
    dims = net.layer_dims
    head = MAGIC + struct.pack(f"<II{len(dims)}I", FORMAT_VERSION, len(dims), *dims)
    head += struct.pack("<BqQ", ACTIVATIONS.index(net.activation), net.seed, net.n_params)
    return head + net.params.astype("<f8").tobytes()


def from_bytes(buf):
    def take(fmt, off):
        size = struct.calcsize(fmt)
        if off + size > len(buf):
            raise FormatError("truncated checkpoint header", off)
        return struct.unpack_from(fmt, buf, off), off + size

    if buf[:8] != MAGIC:
        raise FormatError("bad magic, not a network checkpoint", 0)
    (version, n_dims), off = take("<II", 8)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", 8)
    if not 2 <= n_dims <= 64:
        raise FormatError(f"implausible layer count {n_dims}", 12)
    dims, off = take(f"<{n_dims}I", off)
    act_off = off
    (act, seed, n_params), off = take("<BqQ", off)
    if act >= len(ACTIVATIONS):
        raise FormatError(f"unknown activation code {act}", act_off)
    _, expected = _layer_slices(dims)
    if n_params != expected:
        raise FormatError(f"parameter count {n_params} does not match dims", act_off + 9)
    end = off + 8 * n_params
    if len(buf) < end:
        raise FormatError("truncated parameter block", len(buf))
    if len(buf) > end:
        raise FormatError("trailing bytes after parameter block", end)
    params = np.frombuffer(buf, dtype="<f8", count=n_params, offset=off).astype(np.float64)
    if not np.all(np.isfinite(params)):
        raise FormatError("non-finite parameter values", off)
    return EnergyNetwork(dims, ACTIVATIONS[act], params, seed)


def save(net, path):
    Path(path).write_bytes(to_bytes(net))


def load(path, expected_dims=None):
    """Read a checkpoint; ``expected_dims`` (Dx, ..., Dy) must match if given.

    Only the input and output sizes are compared when ``expected_dims`` has
    two entries.
    """
    net = from_bytes(Path(path).read_bytes())
    if expected_dims is not None:
        exp = tuple(int(d) for d in expected_dims)
        got = net.layer_dims if len(exp) > 2 else (net.dx, net.dy)
        if got != exp:
            raise DimensionError(f"checkpoint dims {net.layer_dims} do not match expected {exp}")
    return net
