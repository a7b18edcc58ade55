"""Luna encoder/decoder layers, the post-LN transformer baseline layer, FFN and pooling."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .attention import AttentionParams, attend, luna_attend, luna_causal
from .errors import ConfigError, DimensionError
from .numerics import functional as F
from .numerics import rng as rngmod
from .numerics.tensor import Tensor, parameter

POOLINGS = ("cls", "p_mean")


@dataclass
class DropoutPlan:
    """Dropout rates plus a keyed stream factory; one plan per training step."""

    rate: float
    attn_rate: float
    seed: int
    step: int

    def rng(self, *site) -> np.random.Generator:
        return rngmod.stream(self.seed, "dropout", self.step, *site)


def _attn_drop(plan: Optional[DropoutPlan], site: str):
    if plan is None or plan.attn_rate <= 0:
        return {}
    return {"dropout": plan.attn_rate, "rng": plan.rng(site, "attn")}


def _drop(x: Tensor, plan: Optional[DropoutPlan], site: str) -> Tensor:
    if plan is None:
        return x
    return F.dropout(x, plan.rate, plan.rng(site))


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor

    @classmethod
    def init(cls, d: int, prefix: str, dtype=np.float64) -> "LayerNormParams":
        return cls(parameter(np.ones(d, dtype), f"{prefix}.gamma"),
                   parameter(np.zeros(d, dtype), f"{prefix}.beta"))

    def __call__(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta)

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.gamma": self.gamma, f"{prefix}.beta": self.beta}


@dataclass
class FFNParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, d: int, d_hidden: int, seed: int, prefix: str, dtype=np.float64) -> "FFNParams":
        if d_hidden < d:
            raise ConfigError(f"d_hidden={d_hidden} must be >= d={d}")
        return cls(
            parameter(rngmod.xavier_uniform(seed, f"{prefix}.w1", (d, d_hidden), dtype), f"{prefix}.w1"),
            parameter(np.zeros(d_hidden, dtype), f"{prefix}.b1"),
            parameter(rngmod.xavier_uniform(seed, f"{prefix}.w2", (d_hidden, d), dtype), f"{prefix}.w2"),
            parameter(np.zeros(d, dtype), f"{prefix}.b2"),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
                f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2}


def ffn(X: Tensor, params: FFNParams, plan: Optional[DropoutPlan] = None, site: str = "ffn") -> Tensor:
    """relu(X W1 + b1) W2 + b2, row by row."""
    hidden = F.relu(F.add(F.matmul(X, params.w1), params.b1))
    hidden = _drop(hidden, plan, site + ".hidden")
    return F.add(F.matmul(hidden, params.w2), params.b2)


# -- encoder ------------------------------------------------------------------

@dataclass
class LunaLayerParams:
    pack: AttentionParams
    unpack: AttentionParams
    ffn: FFNParams
    ln_x: LayerNormParams
    ln_p: LayerNormParams
    ln_ffn: LayerNormParams

    @classmethod
    def init(cls, d: int, d_hidden: int, heads: int, tying: str, seed: int, prefix: str,
             dtype=np.float64) -> "LunaLayerParams":
        return cls(
            AttentionParams.init(d, heads, tying, seed, f"{prefix}.pack", dtype),
            AttentionParams.init(d, heads, tying, seed, f"{prefix}.unpack", dtype),
            FFNParams.init(d, d_hidden, seed, f"{prefix}.ffn", dtype),
            LayerNormParams.init(d, f"{prefix}.ln_x", dtype),
            LayerNormParams.init(d, f"{prefix}.ln_p", dtype),
            LayerNormParams.init(d, f"{prefix}.ln_ffn", dtype),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        out.update(self.pack.named(f"{prefix}.pack"))
        out.update(self.unpack.named(f"{prefix}.unpack"))
        out.update(self.ffn.named(f"{prefix}.ffn"))
        for tag in ("ln_x", "ln_p", "ln_ffn"):
            out.update(getattr(self, tag).named(f"{prefix}.{tag}"))
        return out


def luna_encoder_layer(X: Tensor, P: Tensor, params: LunaLayerParams, mask=None,
                       plan: Optional[DropoutPlan] = None, site: str = "enc") -> tuple[Tensor, Tensor]:
    """Post-LN Luna layer over self-attention (C = X). Returns ``(X', P')``."""
    Y_X, Y_P = luna_attend(X, P, X, params.pack, params.unpack, mask, **_attn_drop(plan, site))
    X_A = params.ln_x(F.add(_drop(Y_X, plan, site + ".yx"), X))
    P_A = params.ln_p(F.add(_drop(Y_P, plan, site + ".yp"), P))
    X_out = params.ln_ffn(F.add(_drop(ffn(X_A, params.ffn, plan, site + ".ffn"), plan, site + ".ffo"), X_A))
    return X_out, P_A


@dataclass
class TransformerLayerParams:
    """Baseline post-LN layer with full softmax attention."""

    attn: AttentionParams
    ffn: FFNParams
    ln_attn: LayerNormParams
    ln_ffn: LayerNormParams

    @classmethod
    def init(cls, d: int, d_hidden: int, heads: int, tying: str, seed: int, prefix: str,
             dtype=np.float64) -> "TransformerLayerParams":
        return cls(
            AttentionParams.init(d, heads, tying, seed, f"{prefix}.attn", dtype),
            FFNParams.init(d, d_hidden, seed, f"{prefix}.ffn", dtype),
            LayerNormParams.init(d, f"{prefix}.ln_attn", dtype),
            LayerNormParams.init(d, f"{prefix}.ln_ffn", dtype),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = dict(self.attn.named(f"{prefix}.attn"))
        out.update(self.ffn.named(f"{prefix}.ffn"))
        out.update(self.ln_attn.named(f"{prefix}.ln_attn"))
        out.update(self.ln_ffn.named(f"{prefix}.ln_ffn"))
        return out


def transformer_layer(X: Tensor, C: Tensor, params: TransformerLayerParams, mask=None,
                      plan: Optional[DropoutPlan] = None, site: str = "enc") -> Tensor:
    X_A = params.ln_attn(F.add(_drop(attend(X, C, params.attn, mask, **_attn_drop(plan, site)),
                                     plan, site + ".yx"), X))
    return params.ln_ffn(F.add(_drop(ffn(X_A, params.ffn, plan, site + ".ffn"), plan, site + ".ffo"), X_A))


# -- decoder ------------------------------------------------------------------

@dataclass
class LunaDecoderLayerParams:
    """Causal self-attention, optional Luna cross-attention, FFN.

    ``p`` is the layer's own learnable P (decoder-only mode); ``cross`` is
    present only in encoder-decoder mode.
    """

    self_attn: AttentionParams
    ln_self: LayerNormParams
    ffn: FFNParams
    ln_ffn: LayerNormParams
    p: Optional[Tensor] = None
    cross: Optional[LunaLayerParams] = None

    @classmethod
    def init(cls, d: int, d_hidden: int, heads: int, tying: str, seed: int, prefix: str,
             l: int, cross: bool, dtype=np.float64) -> "LunaDecoderLayerParams":  # noqa: E741
        cross_params = None
        p = None
        if cross:
            # reuses the encoder-layer container; its ffn/ln_ffn slots are unused
            cross_params = LunaLayerParams(
                AttentionParams.init(d, heads, tying, seed, f"{prefix}.cross.pack", dtype),
                AttentionParams.init(d, heads, tying, seed, f"{prefix}.cross.unpack", dtype),
                None, LayerNormParams.init(d, f"{prefix}.cross.ln_x", dtype),
                LayerNormParams.init(d, f"{prefix}.cross.ln_p", dtype), None)
        else:
            p = parameter(rngmod.normal(seed, f"{prefix}.p", (l, d), 0.02, dtype), f"{prefix}.p")
        return cls(
            AttentionParams.init(d, heads, tying, seed, f"{prefix}.self", dtype),
            LayerNormParams.init(d, f"{prefix}.ln_self", dtype),
            FFNParams.init(d, d_hidden, seed, f"{prefix}.ffn", dtype),
            LayerNormParams.init(d, f"{prefix}.ln_ffn", dtype),
            p, cross_params,
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = dict(self.self_attn.named(f"{prefix}.self"))
        out.update(self.ln_self.named(f"{prefix}.ln_self"))
        out.update(self.ffn.named(f"{prefix}.ffn"))
        out.update(self.ln_ffn.named(f"{prefix}.ln_ffn"))
        if self.p is not None:
            out[f"{prefix}.p"] = self.p
        if self.cross is not None:
            out.update(self.cross.pack.named(f"{prefix}.cross.pack"))
            out.update(self.cross.unpack.named(f"{prefix}.cross.unpack"))
            out.update(self.cross.ln_x.named(f"{prefix}.cross.ln_x"))
            out.update(self.cross.ln_p.named(f"{prefix}.cross.ln_p"))
        return out


def luna_decoder_layer(X: Tensor, P: Tensor, enc_mem: Optional[Tensor],
                       params: LunaDecoderLayerParams, pack_omega: str = "softplus",
                       mem_mask=None, plan: Optional[DropoutPlan] = None,
                       site: str = "dec") -> tuple[Tensor, Tensor]:
    """Causal self-attention -> (cross-attention) -> FFN, post-LN around each.

    Causal self-attention passes P through; the cross-attention sublayer, when
    an encoder memory is given, packs the memory with P and updates it.
    """
    if params.cross is None and enc_mem is not None:
        raise ConfigError("decoder-only layer received an encoder memory")
    if params.cross is not None and enc_mem is None:
        raise ConfigError("encoder-decoder layer requires an encoder memory")
    X1 = params.ln_self(F.add(_drop(luna_causal(X, P, params.self_attn, pack_omega),
                                    plan, site + ".self"), X))
    P_out = P
    if enc_mem is not None:
        if enc_mem.shape[-1] != X.shape[-1]:
            raise DimensionError(f"encoder memory width {enc_mem.shape[-1]} vs {X.shape[-1]}")
        cr = params.cross
        Y_X, Y_P = luna_attend(X1, P, enc_mem, cr.pack, cr.unpack, mem_mask,
                               **_attn_drop(plan, site + ".cross"))
        X1 = cr.ln_x(F.add(_drop(Y_X, plan, site + ".cross.yx"), X1))
        P_out = cr.ln_p(F.add(_drop(Y_P, plan, site + ".cross.yp"), P))
    X_out = params.ln_ffn(F.add(_drop(ffn(X1, params.ffn, plan, site + ".ffn"), plan, site + ".ffo"), X1))
    return X_out, P_out


# -- pooling ------------------------------------------------------------------

def pool(H: Tensor, P_final: Optional[Tensor], mode: str) -> Tensor:
    """``cls``: row 0 of H. ``p_mean``: column mean of the final packed state."""
    if mode == "cls":
        return F.getitem(H, (..., 0, slice(None)))
    if mode == "p_mean":
        if P_final is None:
            raise ConfigError("p_mean pooling needs a packed state")
        return F.mean(P_final, axis=-2)
    raise ConfigError(f"unknown pooling {mode!r}; expected one of {POOLINGS}")
