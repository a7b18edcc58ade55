"""Regular, pack/unpack (nested) and causal Luna attention.

Shapes follow ``(..., length, width)`` with any leading batch shape. ``P``
may be unbatched ``(l, d)`` and is broadcast against batched inputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .numerics import functional as F
from .numerics import rng as rngmod
from .numerics.tensor import Tensor, parameter

TYINGS = ("none", "tie_qk", "tie_kv")
CAUSAL_OMEGAS = ("elu1", "softplus")


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    heads: int = 1
    tying: str = "none"

    def __post_init__(self):
        if self.tying not in TYINGS:
            raise ConfigError(f"unknown tying {self.tying!r}; expected one of {TYINGS}")
        d = self.wq.shape[0]
        if self.heads < 1 or d % self.heads:
            raise ConfigError(f"width {d} is not divisible by {self.heads} heads")
        if self.tying == "tie_qk" and self.wk is not self.wq:
            raise ConfigError("tie_qk requires wk to be the same tensor as wq")
        if self.tying == "tie_kv" and self.wv is not self.wk:
            raise ConfigError("tie_kv requires wv to be the same tensor as wk")

    @classmethod
    def init(cls, d: int, heads: int = 1, tying: str = "none", seed: int = 0,
             prefix: str = "attn", dtype=np.float64) -> "AttentionParams":
        def w(tag):
            return parameter(rngmod.xavier_uniform(seed, f"{prefix}.{tag}", (d, d), dtype),
                             name=f"{prefix}.{tag}")
        wq = w("wq")
        wk = wq if tying == "tie_qk" else w("wk")
        wv = wk if tying == "tie_kv" else w("wv")
        return cls(wq, wk, wv, heads, tying)

    @property
    def d(self) -> int:
        return self.wq.shape[0]

    def named(self, prefix: str) -> dict[str, Tensor]:
        """Unique trainable tensors; tied weights appear once."""
        out = {f"{prefix}.wq": self.wq}
        if self.tying != "tie_qk":
            out[f"{prefix}.wk"] = self.wk
        if self.tying != "tie_kv":
            out[f"{prefix}.wv"] = self.wv
        return out


@dataclass
class AttnMask:
    """Padding mask over context positions: True keeps a position."""

    context_keep: np.ndarray

    def __post_init__(self):
        self.context_keep = np.asarray(self.context_keep, dtype=bool)
        if not self.context_keep.any(axis=-1).all():
            raise ContractError("mask keeps no context position for some example")


@dataclass
class PackedState:
    """The fixed-length extra sequence threaded between layers."""

    P: Tensor

    def __post_init__(self):
        if self.P.ndim < 2 or self.P.shape[-2] < 1:
            raise DimensionError(f"P must be (..., l, d) with l >= 1, got {self.P.shape}")

    @property
    def l(self) -> int:  # noqa: E743
        return self.P.shape[-2]


def _keep(mask) -> Optional[np.ndarray]:
    if mask is None:
        return None
    keep = mask.context_keep if isinstance(mask, AttnMask) else np.asarray(mask, dtype=bool)
    if not keep.any(axis=-1).all():
        raise ContractError("mask keeps no context position for some example")
    # (..., m) -> (..., 1 head, 1 query, m)
    return keep[..., None, None, :]


def attend(X: Tensor, C: Tensor, params: AttentionParams, mask=None,
           dropout: float = 0.0, rng: Optional[np.random.Generator] = None,
           causal: bool = False) -> Tensor:
    """Multi-head softmax attention of queries ``X`` over context ``C``.

    Logits are scaled by the per-head width. Masked context columns receive
    zero probability; ``causal`` additionally hides context positions after
    the query position (only meaningful for self-attention).
    """
    d = params.d
    if X.shape[-1] != d or C.shape[-1] != d:
        raise DimensionError(f"attend: widths {X.shape[-1]}, {C.shape[-1]} vs params {d}")
    h = params.heads
    keep = _keep(mask)
    if keep is not None and keep.shape[-1] != C.shape[-2]:
        raise DimensionError(f"attend: mask length {keep.shape[-1]} vs context {C.shape[-2]}")
    if causal:
        tri = np.tril(np.ones((X.shape[-2], C.shape[-2]), dtype=bool))
        keep = tri if keep is None else keep & tri
    q = F.split_heads(F.matmul(X, params.wq), h)
    k = F.split_heads(F.matmul(C, params.wk), h)
    v = F.split_heads(F.matmul(C, params.wv), h)
    logits = F.scale(F.matmul(q, F.swap_last(k)), 1.0 / math.sqrt(d // h))
    probs = F.dropout(F.softmax(logits, keep), dropout, rng)
    return F.merge_heads(F.matmul(probs, v))


def pack(P: Tensor, C: Tensor, params: AttentionParams, mask=None, **kw) -> Tensor:
    """Compress context ``C`` (length m) into ``l`` rows using ``P`` as queries."""
    return attend(P, C, params, mask, **kw)


def unpack(X: Tensor, Y_P: Tensor, params: AttentionParams, **kw) -> Tensor:
    """Restore query length by attending ``X`` over the packed context."""
    return attend(X, Y_P, params, None, **kw)


def luna_attend(X: Tensor, P: Tensor, C: Tensor, params_pack: AttentionParams,
                params_unpack: AttentionParams, mask=None, dropout: float = 0.0,
                rng: Optional[np.random.Generator] = None) -> tuple[Tensor, Tensor]:
    """Nested attention: returns ``(Y_X, Y_P)``. Never forms an (n, m) matrix."""
    if not (X.shape[-1] == P.shape[-1] == C.shape[-1]):
        raise DimensionError(f"luna_attend: widths differ: {X.shape}, {P.shape}, {C.shape}")
    Y_P = pack(P, C, params_pack, mask, dropout=dropout, rng=rng)
    Y_X = unpack(X, Y_P, params_unpack, dropout=dropout, rng=rng)
    return Y_X, Y_P


def luna_causal(X: Tensor, P: Tensor, params: AttentionParams,
                pack_omega: str = "softplus") -> Tensor:
    """Causal Luna attention, linear in sequence length.

    Per head, with Q = X W_Q, K = X W_K, V = X W_V and P projected by W_Q::

        A_pack   = omega(P_q K^T / sqrt(d_head))            (l, n)
        A_unpack = softmax_l(f(Q, K, A_pack^T))             (n, l)
        Y        = f(A_unpack, A_pack^T, V)                  (n, d_head)

    where ``f`` is :func:`luna.numerics.functional.causal_f`. Row t of Y uses
    only X[:t+1] and P.
    """
    if pack_omega not in CAUSAL_OMEGAS:
        raise ConfigError(
            f"pack activation {pack_omega!r} is not causal; use one of {CAUSAL_OMEGAS}")
    d = params.d
    if X.shape[-1] != d or P.shape[-1] != d:
        raise DimensionError(f"luna_causal: widths {X.shape[-1]}, {P.shape[-1]} vs params {d}")
    h = params.heads
    q = F.split_heads(F.matmul(X, params.wq), h)
    k = F.split_heads(F.matmul(X, params.wk), h)
    v = F.split_heads(F.matmul(X, params.wv), h)
    pq = F.split_heads(F.matmul(P, params.wq), h)
    # A_pack^T laid out as (..., h, n, l)
    a_pack_t = F.omega(pack_omega, F.scale(F.matmul(k, F.swap_last(pq)), 1.0 / math.sqrt(d // h)))
    a_unpack = F.softmax(F.causal_f(q, k, a_pack_t))
    return F.merge_heads(F.causal_f(a_unpack, a_pack_t, v))
