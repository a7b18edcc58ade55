"""Differentiable tensor operations.

Every op accepts an optional leading batch shape; the trailing axes carry the
documented matrix/vector semantics. Backward closures return one gradient per
parent (``None`` for non-differentiable parents).
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from ..errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor, make_result

LN_EPS = 1e-5
CAUSAL_CHUNK = 64


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _lift(a, b)
    b = _lift(b, a)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(out, (a, b), backward)


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _lift(a, b)
    b = _lift(b, a)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(out, (a, b), backward)


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _lift(a, b)
    b = _lift(b, a)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(out, (a, b), backward)


def div(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _lift(a, b)
    b = _lift(b, a)
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_result(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return make_result(a.data * c, (a,), lambda g: (g * c,))


# -- linear algebra and shape ------------------------------------------------

def _rowstable_mm(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``x @ y`` whose row i does not depend on how many rows ``x`` has.

    BLAS sends single-row products to a vector kernel with a different
    summation order, so a one-row ``x`` is padded to two rows. This keeps
    causal outputs bit-identical under truncation of the sequence.
    """
    if x.shape[-2] != 1:
        return x @ y
    pad = np.zeros(x.shape[:-2] + (1, x.shape[-1]), dtype=x.dtype)
    return (np.concatenate([x, pad], axis=-2) @ y)[..., :1, :]


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if a.data.dtype != b.data.dtype:
        raise DimensionError(f"matmul: dtype mismatch {a.dtype} vs {b.dtype}")
    if b.ndim == 2 and a.ndim > 2:
        return _matmul_weight(a, b)
    out = _rowstable_mm(a.data, b.data)

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_result(out, (a, b), backward)


def _matmul_weight(a: Tensor, b: Tensor) -> Tensor:
    # (..., n, k) @ (k, r): one flattened GEMM instead of a loop of small ones
    k, r = b.shape
    a2 = a.data.reshape(-1, k)
    out = _rowstable_mm(a2, b.data).reshape(a.shape[:-1] + (r,))

    def backward(g):
        g2 = g.reshape(-1, r)
        return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

    return make_result(out, (a, b), backward)


def swap_last(a: Tensor) -> Tensor:
    return make_result(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def transpose(a: Tensor, axes: tuple) -> Tensor:
    inv = tuple(np.argsort(axes))
    return make_result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: tuple) -> Tensor:
    src = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., n, d) -> (..., heads, n, d // heads)."""
    *lead, n, d = x.shape
    if d % heads:
        raise DimensionError(f"width {d} is not divisible by {heads} heads")
    y = reshape(x, (*lead, n, heads, d // heads))
    nd = y.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return transpose(y, axes)


def merge_heads(x: Tensor) -> Tensor:
    """(..., heads, n, dh) -> (..., n, heads * dh)."""
    *lead, h, n, dh = x.shape
    nd = x.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    y = transpose(x, axes)
    return reshape(y, (*lead, n, h * dh))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def getitem(a: Tensor, key) -> Tensor:
    out = a.data[key]
    if out.base is not None:
        out = out.copy()

    def backward(g):
        z = np.zeros_like(a.data)
        np.add.at(z, key, g)
        return (z,)

    return make_result(out, (a,), backward)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    out = table.data[ids]

    def backward(g):
        z = np.zeros_like(table.data)
        np.add.at(z, ids, g)
        return (z,)

    return make_result(out, (table,), backward)


# -- activations -------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return make_result(np.where(pos, a.data, 0).astype(a.data.dtype), (a,), lambda g: (g * pos,))


def elu1(a: Tensor) -> Tensor:
    """elu(x) + 1: x + 1 for x > 0, exp(x) otherwise. Strictly positive."""
    x = a.data
    ex = np.exp(np.minimum(x, 0))
    pos = x > 0
    out = np.where(pos, x + 1, ex)
    return make_result(out, (a,), lambda g: (g * np.where(pos, 1, ex),))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0, x).astype(x.dtype)
    sig = 0.5 * (1 + np.tanh(0.5 * x))
    return make_result(out, (a,), lambda g: (g * sig,))


def softmax(a: Tensor, keep: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis with max subtraction.

    ``keep`` is a boolean array broadcastable to ``a``; dropped entries get
    probability exactly zero, which is what a -inf logit would produce.
    """
    x = a.data
    if keep is None:
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    else:
        keep = np.broadcast_to(keep, x.shape)
        if not keep.any(axis=-1).all():
            raise ContractError("softmax: a row has every position masked")
        m = np.where(keep, x, -np.inf).max(axis=-1, keepdims=True)
        e = np.where(keep, np.exp(np.where(keep, x - m, 0)), 0).astype(x.dtype)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return make_result(out, (a,), backward)


OMEGA_KINDS = ("elu1", "softplus", "softmax")


def omega(kind: str, a: Tensor) -> Tensor:
    if kind == "elu1":
        return elu1(a)
    if kind == "softplus":
        return softplus(a)
    if kind == "softmax":
        return softmax(a)
    raise ConfigError(f"unknown activation {kind!r}; expected one of {OMEGA_KINDS}")


# -- normalization and regularization ---------------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = g * gamma.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return make_result(out.astype(xd.dtype), (x, gamma, beta), backward)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = rng.random(x.shape) >= rate
    factor = x.data.dtype.type(1.0 / (1.0 - rate))
    mask = keep * factor
    return make_result(x.data * mask, (x,), lambda g: (g * mask,))


# -- losses ------------------------------------------------------------------

def cross_entropy(logits: Tensor, targets, ignore_index: int = -100) -> Tensor:
    """Mean negative log-likelihood over positions whose target != ignore_index."""
    t = np.asarray(targets)
    if t.shape != logits.shape[:-1]:
        raise DimensionError(f"cross_entropy: targets {t.shape} vs logits {logits.shape}")
    valid = t != ignore_index
    count = int(valid.sum())
    if count == 0:
        raise ContractError("cross_entropy: every target is ignored")
    V = logits.shape[-1]
    if np.any((t[valid] < 0) | (t[valid] >= V)):
        raise ContractError("cross_entropy: target outside [0, V)")
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(x - m).sum(axis=-1))
    safe_t = np.where(valid, t, 0)
    picked = np.take_along_axis(x, safe_t[..., None], axis=-1)[..., 0]
    nll = np.where(valid, lse - picked, 0.0)
    loss = np.asarray(nll.sum() / count, dtype=x.dtype)

    def backward(g):
        p = np.exp(x - lse[..., None])
        np.put_along_axis(p, safe_t[..., None],
                          np.take_along_axis(p, safe_t[..., None], axis=-1) - 1, axis=-1)
        p *= valid[..., None]
        return (p * (g / count),)

    return make_result(loss, (logits,), backward)


# -- causal prefix operator -------------------------------------------------

def _pad_rows(x: np.ndarray, rows: int) -> np.ndarray:
    short = rows - x.shape[-2]
    if short == 0:
        return x
    return np.concatenate([x, np.zeros(x.shape[:-2] + (short, x.shape[-1]), x.dtype)], axis=-2)


def _prefix_bilinear(a: np.ndarray, b: np.ndarray, c: np.ndarray, chunk: int) -> np.ndarray:
    """out_t = a_t @ sum_{j<=t} b_j^T c_j along axis -2, without the 1/t.

    Processed chunk by chunk: inside a chunk the contribution is a masked
    (chunk x chunk) product, across chunks a (d1 x d2) running state is carried.
    Extra memory is O(chunk^2 + d1*d2) per batch element. A short final chunk
    is zero-padded so every product has the same shape whatever ``n`` is;
    row t is then bit-identical to the same row of any longer sequence.
    """
    n = a.shape[-2]
    lead = np.broadcast_shapes(a.shape[:-2], b.shape[:-2], c.shape[:-2])
    d1, d2 = b.shape[-1], c.shape[-1]
    dtype = np.result_type(a, b, c)
    out = np.empty(lead + (n, d2), dtype=dtype)
    state = np.zeros(lead + (d1, d2), dtype=dtype)
    tri = np.tril(np.ones((chunk, chunk), dtype=bool))
    for s in range(0, n, chunk):
        e = min(s + chunk, n)
        ac, bc, cc = (_pad_rows(v[..., s:e, :], chunk) for v in (a, b, c))
        w = (ac @ np.swapaxes(bc, -1, -2)) * tri
        out[..., s:e, :] = (ac @ state + w @ cc)[..., : e - s, :]
        state = state + np.swapaxes(bc, -1, -2) @ cc
    return out


def causal_f(x: Tensor, y: Tensor, z: Tensor, chunk: int = CAUSAL_CHUNK) -> Tensor:
    """F_t = (1/t) x_t sum_{j<=t} y_j^T z_j with 1-based t along axis -2.

    Row t of the output depends only on rows <= t of every input.
    """
    if x.shape[-1] != y.shape[-1]:
        raise DimensionError(f"causal_f: x {x.shape} and y {y.shape} differ in width")
    n = x.shape[-2]
    if y.shape[-2] != n or z.shape[-2] != n:
        raise DimensionError(f"causal_f: lengths differ: {x.shape}, {y.shape}, {z.shape}")
    dtype = np.result_type(x.data, y.data, z.data)
    inv_t = (1.0 / np.arange(1, n + 1, dtype=dtype))[:, None]
    out = _prefix_bilinear(x.data, y.data, z.data, chunk) * inv_t

    def backward(g):
        gs = g * inv_t
        flip = lambda arr: arr[..., ::-1, :]  # noqa: E731
        gx = _prefix_bilinear(gs, z.data, y.data, chunk)
        gy = flip(_prefix_bilinear(flip(z.data), flip(gs), flip(x.data), chunk))
        gz = flip(_prefix_bilinear(flip(y.data), flip(x.data), flip(gs), chunk))
        return (_unbroadcast(gx, x.shape), _unbroadcast(np.ascontiguousarray(gy), y.shape),
                _unbroadcast(np.ascontiguousarray(gz), z.shape))

    return make_result(out, (x, y, z), backward)
