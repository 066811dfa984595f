"""Differentiable operations used by the attention network.

Every op takes and returns :class:`Tensor` objects, never mutates its inputs,
and works in float32 or float64 (whatever the inputs carry).
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.special import erf

from .tensor import Tensor, as_tensor, make_result

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return make_result(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return make_result(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return make_result(a.data * b.data, (a, b),
                       lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def sum_all(x: Tensor) -> Tensor:
    return make_result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return make_result(np.asarray(x.data.mean()), (x,),
                       lambda g: (np.broadcast_to(g / n, x.shape).astype(x.dtype),))


def reshape(x: Tensor, shape) -> Tensor:
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return make_result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(xs: list[Tensor], axis: int = -1) -> Tensor:
    axis = axis % xs[0].ndim
    splits = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return make_result(np.concatenate([t.data for t in xs], axis=axis), tuple(xs),
                       lambda g: tuple(np.split(g, splits, axis=axis)))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ W.T + b over the last axis; W has shape (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight in-features {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        gx = g @ weight.data
        gw = g2.T @ x2
        gb = g2.sum(axis=0) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return make_result(out, inputs, backward)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out = x.data * cdf

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return make_result(out.astype(x.dtype), (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor | None, beta: Tensor | None, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data

    def backward(g):
        d = x.shape[-1]
        gxhat = g * gamma.data if gamma is not None else g
        gx = inv / d * (d * gxhat - gxhat.sum(axis=-1, keepdims=True)
                        - xhat * np.sum(gxhat * xhat, axis=-1, keepdims=True))
        grads = [gx]
        if gamma is not None:
            grads.append((g * xhat).reshape(-1, d).sum(axis=0))
        if beta is not None:
            grads.append(g.reshape(-1, d).sum(axis=0))
        return grads

    inputs = tuple(t for t in (x, gamma, beta) if t is not None)
    return make_result(out, inputs, backward)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """x / ||x|| over the last axis (eps keeps zero rows finite)."""
    norm = np.sqrt(np.sum(x.data * x.data, axis=-1, keepdims=True) + eps)
    y = x.data / norm

    def backward(g):
        return ((g - y * np.sum(g * y, axis=-1, keepdims=True)) / norm,)

    return make_result(y, (x,), backward)


def masked_softmax(logits: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis; ``mask`` (broadcastable bool) marks valid slots.

    Masked slots get probability exactly 0 and receive zero gradient.
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
    if not mask.any(axis=-1).all():
        raise ValueError("masked_softmax: a row has no unmasked entry")
    z = np.where(mask, logits.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    p = (e / e.sum(axis=-1, keepdims=True)).astype(logits.dtype)

    def backward(g):
        return (p * (g - np.sum(g * p, axis=-1, keepdims=True)),)

    return make_result(p, (logits,), backward)


def einsum(subscripts: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum without repeated or operand-private summed indices."""
    lhs, out_idx = subscripts.replace(" ", "").split("->")
    ia, ib = lhs.split(",")
    for own, other in ((ia, ib), (ib, ia)):
        if len(set(own)) != len(own) or any(c not in other and c not in out_idx for c in own):
            raise ValueError(f"einsum pattern {subscripts!r} is not supported")
    out = np.einsum(subscripts, a.data, b.data, optimize=True)

    def backward(g):
        ga = np.einsum(f"{out_idx},{ib}->{ia}", g, b.data, optimize=True)
        gb = np.einsum(f"{out_idx},{ia}->{ib}", g, a.data, optimize=True)
        return ga, gb

    return make_result(out, (a, b), backward)


class SparseOp:
    """Fixed sparse linear map (rows, cols) applied along axis 0.

    Used for neighbor gathers, pooling, unpooling and bias-grid sampling.
    The transpose for the backward pass and per-dtype copies are cached.
    """

    def __init__(self, matrix: sp.spmatrix):
        self.matrix = sp.csr_matrix(matrix, dtype=np.float64)
        self._cache: dict = {}

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    def _get(self, dtype, transposed: bool) -> sp.csr_matrix:
        key = (np.dtype(dtype).str, transposed)
        m = self._cache.get(key)
        if m is None:
            m = self.matrix.T.tocsr() if transposed else self.matrix
            m = m.astype(dtype)
            self._cache[key] = m
        return m

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[0] != self.shape[1]:
            raise ValueError(f"sparse op expects {self.shape[1]} rows, got {x.shape[0]}")
        tail = x.shape[1:]
        flat = x.data.reshape(x.shape[0], -1)
        out = (self._get(x.dtype, False) @ flat).reshape((self.shape[0],) + tail)

        def backward(g):
            gx = self._get(x.dtype, True) @ g.reshape(self.shape[0], -1)
            return (gx.reshape(x.shape),)

        return make_result(np.asarray(out), (x,), backward)


def gather_matrix(indices: np.ndarray, mask: np.ndarray, n_src: int) -> sp.csr_matrix:
    """(rows*cols, n_src) selection matrix; masked slots become zero rows."""
    flat = indices.reshape(-1)
    valid = mask.reshape(-1)
    rows = np.nonzero(valid)[0]
    return sp.csr_matrix((np.ones(len(rows)), (rows, flat[valid])), shape=(len(flat), n_src))


def group_max(x: Tensor, groups: np.ndarray) -> Tensor:
    """out[c] = max over x[groups[c]] (first index wins ties)."""
    vals = x.data[groups]  # (Nc, G, ...)
    arg = vals.argmax(axis=1)
    out = np.take_along_axis(vals, arg[:, None], axis=1)[:, 0]
    src = np.take_along_axis(np.broadcast_to(groups.reshape(groups.shape + (1,) * (x.ndim - 1)), vals.shape),
                             arg[:, None], axis=1)[:, 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        cols = np.broadcast_to(np.arange(int(np.prod(x.shape[1:]))).reshape(x.shape[1:]), g.shape)
        np.add.at(gx.reshape(x.shape[0], -1), (src.reshape(len(src), -1), cols.reshape(len(src), -1)),
                  g.reshape(len(src), -1))
        return (gx,)

    return make_result(out, (x,), backward)


def constant(x, dtype=np.float32) -> Tensor:
    return as_tensor(np.asarray(x, dtype=dtype))
