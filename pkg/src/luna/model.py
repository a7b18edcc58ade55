"""Layer stacks, losses, the optimizer step and checkpoints."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .attention import TYINGS, attend
from .errors import ConfigError, InputError
from .layers import (
    POOLINGS,
    DropoutPlan,
    LunaDecoderLayerParams,
    LunaLayerParams,
    TransformerLayerParams,
    _drop,
    ffn,
    luna_decoder_layer,
    luna_encoder_layer,
    pool,
    transformer_layer,
)
from .numerics import functional as F
from .numerics import io as tio
from .numerics import rng as rngmod
from .numerics.tensor import DTYPES, Tensor, no_grad, parameter
from .tasks import CLS, PAD

MODES = ("encoder_classifier", "decoder_lm", "seq2seq")
MECHANISMS = ("luna", "full")


@dataclass
class ModelConfig:
    d: int = 32
    d_hidden: int = 64
    h: int = 2
    l: int = 16  # noqa: E741
    layers: int = 2
    vocab: int = 16
    classes: int = 2
    n_max: int = 256
    tying: str = "none"
    pack_omega: str = "softplus"
    pooling: str = "cls"
    dropout: float = 0.1
    attn_dropout: float = 0.1
    seed: int = 0
    mode: str = "encoder_classifier"
    mechanism: str = "luna"
    dtype: str = "f32"

    def __post_init__(self):
        if self.d % self.h:
            raise ConfigError(f"d={self.d} is not divisible by h={self.h}")
        if self.l < 1:
            raise ConfigError("l must be >= 1")
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        if self.d_hidden < self.d:
            raise ConfigError("d_hidden must be >= d")
        if self.tying not in TYINGS:
            raise ConfigError(f"unknown tying {self.tying!r}")
        if self.pooling not in POOLINGS:
            raise ConfigError(f"unknown pooling {self.pooling!r}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.mechanism not in MECHANISMS:
            raise ConfigError(f"mechanism {self.mechanism!r} cannot be trained; use one of {MECHANISMS}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"unknown dtype {self.dtype!r}")
        if self.mechanism == "full" and self.pooling == "p_mean" and self.mode == "encoder_classifier":
            raise ConfigError("p_mean pooling needs the Luna packed state")
        if self.mechanism == "full" and self.mode == "seq2seq":
            raise ConfigError("seq2seq is only built with Luna layers")
        if self.mode != "encoder_classifier" and self.pack_omega not in ("elu1", "softplus"):
            raise ConfigError(f"pack_omega {self.pack_omega!r} is not causal")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def param_count(cfg: ModelConfig) -> int:
    """Closed-form number of trainable scalars implied by the config."""
    d, dh, V, l = cfg.d, cfg.d_hidden, cfg.vocab, cfg.l
    n_w = 3 if cfg.tying == "none" else 2
    attn = n_w * d * d
    ff = 2 * d * dh + dh + d
    ln = 2 * d
    total = V * d + cfg.n_max * d
    if cfg.mode == "encoder_classifier":
        if cfg.mechanism == "luna":
            total += l * d + cfg.layers * (2 * attn + ff + 3 * ln)
        else:
            total += cfg.layers * (attn + ff + 2 * ln)
        return total + d * cfg.classes + cfg.classes
    if cfg.mode == "decoder_lm":
        if cfg.mechanism == "luna":
            total += cfg.layers * (attn + ff + 2 * ln + l * d)
        else:
            total += cfg.layers * (attn + ff + 2 * ln)
        return total + d * V + V
    enc = l * d + cfg.layers * (2 * attn + ff + 3 * ln)
    dec = cfg.layers * (attn + ff + 2 * ln + 2 * attn + 2 * ln)
    return total + enc + dec + d * V + V


@dataclass
class Batch:
    """Right-padded token batch. ``keep`` marks real (non-pad) positions."""

    tokens: np.ndarray
    keep: np.ndarray
    labels: Optional[np.ndarray] = None
    targets: Optional[np.ndarray] = None
    src: Optional[np.ndarray] = None
    src_keep: Optional[np.ndarray] = None


def pad_batch(seqs, pad: int = PAD) -> tuple[np.ndarray, np.ndarray]:
    n = max(len(s) for s in seqs)
    out = np.full((len(seqs), n), pad, dtype=np.int64)
    keep = np.zeros((len(seqs), n), dtype=bool)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
        keep[i, : len(s)] = True
    return out, keep


class LunaModel:
    """Encoder classifier, decoder-only LM or encoder-decoder built from Luna layers.

    ``mechanism='full'`` swaps every attention for the quadratic softmax baseline.
    """

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        c = cfg
        dt = DTYPES[c.dtype]
        s = c.seed
        emb_std = c.d ** -0.5
        self.tok = parameter(rngmod.normal(s, "emb.tok", (c.vocab, c.d), emb_std, dt), "emb.tok")
        self.pos = parameter(rngmod.normal(s, "emb.pos", (c.n_max, c.d), emb_std, dt), "emb.pos")
        self.p_init = None
        self.enc_layers: list = []
        self.dec_layers: list = []

        def enc_stack():
            self.p_init = parameter(rngmod.normal(s, "emb.p", (c.l, c.d), 0.02, dt), "emb.p")
            return [LunaLayerParams.init(c.d, c.d_hidden, c.h, c.tying, s, f"enc.{i}", dt)
                    for i in range(c.layers)]

        if c.mode == "encoder_classifier":
            if c.mechanism == "luna":
                self.enc_layers = enc_stack()
            else:
                self.enc_layers = [TransformerLayerParams.init(c.d, c.d_hidden, c.h, c.tying, s,
                                                               f"enc.{i}", dt) for i in range(c.layers)]
            self.head_w = parameter(rngmod.xavier_uniform(s, "head.w", (c.d, c.classes), dt), "head.w")
            self.head_b = parameter(np.zeros(c.classes, dt), "head.b")
        else:
            if c.mode == "seq2seq":
                self.enc_layers = enc_stack()
            cross = c.mode == "seq2seq"
            if c.mechanism == "luna":
                self.dec_layers = [LunaDecoderLayerParams.init(c.d, c.d_hidden, c.h, c.tying, s,
                                                               f"dec.{i}", c.l, cross, dt)
                                   for i in range(c.layers)]
            else:
                self.dec_layers = [TransformerLayerParams.init(c.d, c.d_hidden, c.h, c.tying, s,
                                                               f"dec.{i}", dt) for i in range(c.layers)]
            self.head_w = parameter(rngmod.xavier_uniform(s, "head.w", (c.d, c.vocab), dt), "head.w")
            self.head_b = parameter(np.zeros(c.vocab, dt), "head.b")

    # -- parameters -----------------------------------------------------------
    def named_parameters(self) -> dict[str, Tensor]:
        out = {"emb.tok": self.tok, "emb.pos": self.pos}
        if self.p_init is not None:
            out["emb.p"] = self.p_init
        for i, layer in enumerate(self.enc_layers):
            out.update(layer.named(f"enc.{i}"))
        for i, layer in enumerate(self.dec_layers):
            out.update(layer.named(f"dec.{i}"))
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def num_parameters(self) -> int:
        return sum(t.size for t in self.named_parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        if set(state) != set(params):
            raise ConfigError(f"checkpoint tensors do not match model: "
                              f"{sorted(set(state) ^ set(params))}")
        for k, t in params.items():
            if state[k].shape != t.shape:
                raise ConfigError(f"{k}: checkpoint shape {state[k].shape} vs {t.shape}")
            t.data[...] = state[k]

    # -- forward passes -------------------------------------------------------
    def embed(self, tokens: np.ndarray) -> Tensor:
        tokens = np.asarray(tokens)
        n = tokens.shape[-1]
        if n > self.cfg.n_max:
            raise InputError(f"sequence length {n} exceeds n_max={self.cfg.n_max}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.cfg.vocab):
            raise InputError(f"token id outside [0, {self.cfg.vocab})")
        return F.add(F.embedding(self.tok, tokens), F.getitem(self.pos, slice(0, n)))

    def encode(self, tokens, keep=None, plan: Optional[DropoutPlan] = None,
               trace: Optional[list] = None) -> tuple[Tensor, Optional[Tensor]]:
        """Embed and run the encoder stack. Returns ``(H, P_final)``.

        ``trace``, when given, collects the ``(X, P)`` pair entering each layer.
        """
        X = self.embed(tokens)
        if self.cfg.mechanism == "full" and self.cfg.mode == "encoder_classifier":
            for i, layer in enumerate(self.enc_layers):
                X = transformer_layer(X, X, layer, keep, plan, f"enc.{i}")
            return X, None
        P = self.p_init
        for i, layer in enumerate(self.enc_layers):
            if trace is not None:
                trace.append((X, P))
            X, P = luna_encoder_layer(X, P, layer, keep, plan, f"enc.{i}")
        return X, P

    def classify(self, tokens, keep=None, plan: Optional[DropoutPlan] = None) -> Tensor:
        if self.cfg.mode != "encoder_classifier":
            raise ConfigError("classify needs mode=encoder_classifier")
        tokens = np.asarray(tokens)
        if self.cfg.pooling == "cls":
            tokens = np.concatenate([np.full(tokens.shape[:-1] + (1,), CLS), tokens], axis=-1)
            if keep is not None:
                keep = np.concatenate([np.ones(keep.shape[:-1] + (1,), bool), keep], axis=-1)
        H, P = self.encode(tokens, keep, plan)
        return self._head(pool(H, P, self.cfg.pooling))

    def _head(self, x: Tensor) -> Tensor:
        if x.ndim == 1:
            return F.add(F.getitem(F.matmul(F.reshape(x, (1, -1)), self.head_w), 0), self.head_b)
        return F.add(F.matmul(x, self.head_w), self.head_b)

    def _decode(self, X: Tensor, P: Optional[Tensor], mem: Optional[Tensor], mem_keep,
                plan: Optional[DropoutPlan]) -> Tensor:
        c = self.cfg
        for i, layer in enumerate(self.dec_layers):
            site = f"dec.{i}"
            if c.mechanism == "full":
                X = self._full_causal_layer(X, layer, plan, site)
            elif mem is None:
                X, _ = luna_decoder_layer(X, layer.p, None, layer, c.pack_omega, None, plan, site)
            else:
                X, P = luna_decoder_layer(X, P, mem, layer, c.pack_omega, mem_keep, plan, site)
        return self._head(X)

    @staticmethod
    def _full_causal_layer(X, layer: TransformerLayerParams, plan, site) -> Tensor:
        A = attend(X, X, layer.attn, None, causal=True)
        X_A = layer.ln_attn(F.add(_drop(A, plan, site + ".yx"), X))
        return layer.ln_ffn(F.add(_drop(ffn(X_A, layer.ffn, plan, site + ".ffn"), plan, site + ".ffo"), X_A))

    def lm_forward(self, tokens, plan: Optional[DropoutPlan] = None) -> Tensor:
        """Decoder-only logits ``(..., n, V)``; row t depends on tokens <= t only."""
        if self.cfg.mode != "decoder_lm":
            raise ConfigError("lm_forward needs mode=decoder_lm")
        return self._decode(self.embed(tokens), None, None, None, plan)

    def seq2seq_forward(self, src, src_keep, tgt_in, plan: Optional[DropoutPlan] = None) -> Tensor:
        if self.cfg.mode != "seq2seq":
            raise ConfigError("seq2seq_forward needs mode=seq2seq")
        H, P = self.encode(src, src_keep, plan)
        return self._decode(self.embed(tgt_in), P, H, src_keep, plan)

    def loss(self, batch: Batch, plan: Optional[DropoutPlan] = None) -> Tensor:
        m = self.cfg.mode
        if m == "encoder_classifier":
            return F.cross_entropy(self.classify(batch.tokens, batch.keep, plan), batch.labels)
        if m == "decoder_lm":
            return F.cross_entropy(self.lm_forward(batch.tokens, plan), batch.targets)
        return F.cross_entropy(self.seq2seq_forward(batch.src, batch.src_keep, batch.tokens, plan),
                               batch.targets)


def cross_entropy_loss(logits: Tensor, targets, ignore_index: int = -100) -> Tensor:
    return F.cross_entropy(logits, targets, ignore_index)


# -- optimizer ------------------------------------------------------------------

@dataclass
class OptimConfig:
    lr: float = 1e-3
    warmup: int = 100
    total_steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    weight_decay: float = 0.0
    clip: float = 1.0


@dataclass
class OptimizerState:
    """Adam moments keyed by parameter name, plus the step counter."""

    cfg: OptimConfig
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def create(cls, model: LunaModel, cfg: OptimConfig) -> "OptimizerState":
        params = model.named_parameters()
        return cls(cfg, {k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()})

    def lr(self, step: Optional[int] = None) -> float:
        """Linear warmup to ``cfg.lr`` then linear decay to zero at ``total_steps``."""
        s = self.step if step is None else step
        c = self.cfg
        if c.warmup > 0 and s < c.warmup:
            return c.lr * (s + 1) / c.warmup
        span = max(c.total_steps - c.warmup, 1)
        return c.lr * max(0.0, 1.0 - (s - c.warmup) / span)


def train_step(model: LunaModel, batch: Batch, opt: OptimizerState, train: bool = True) -> dict:
    """Forward, backward, global-norm clipping and one Adam update."""
    params = model.named_parameters()
    for p in params.values():
        p.grad = None
    c = model.cfg
    plan = DropoutPlan(c.dropout, c.attn_dropout, c.seed, opt.step) if train else None
    loss = model.loss(batch, plan)
    value = float(loss.data)
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite loss {value} at step {opt.step}")
    loss.backward()
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    oc = opt.cfg
    factor = oc.clip / (norm + 1e-6) if oc.clip > 0 and norm > oc.clip else 1.0
    lr = opt.lr()
    t = opt.step + 1
    bc1 = 1 - oc.beta1 ** t
    bc2 = 1 - oc.beta2 ** t
    for k, p in params.items():
        g = grads[k] * factor
        m = opt.m[k]
        v = opt.v[k]
        m *= oc.beta1
        m += (1 - oc.beta1) * g
        v *= oc.beta2
        v += (1 - oc.beta2) * g * g
        if lr != 0.0:
            update = (m / bc1) / (np.sqrt(v / bc2) + oc.eps)
            if oc.weight_decay:
                update = update + oc.weight_decay * p.data
            p.data -= (lr * update).astype(p.data.dtype)
        p.grad = None
    opt.step += 1
    return {"loss": value, "grad_norm": norm, "lr": lr}


def predict(model: LunaModel, batch: Batch) -> np.ndarray:
    with no_grad():
        if model.cfg.mode == "encoder_classifier":
            return model.classify(batch.tokens, batch.keep).data.argmax(-1)
        if model.cfg.mode == "decoder_lm":
            return model.lm_forward(batch.tokens).data.argmax(-1)
        return model.seq2seq_forward(batch.src, batch.src_keep, batch.tokens).data.argmax(-1)


# -- checkpoints ------------------------------------------------------------------

def save_checkpoint(path, model: LunaModel, opt: Optional[OptimizerState] = None,
                    extra: Optional[dict] = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {"model": asdict(model.cfg), "step": opt.step if opt else 0}
    if opt is not None:
        meta["optim"] = asdict(opt.cfg)
    if extra:
        meta.update(extra)
    (path / "config.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    tio.save_bundle(path / "params.luna", model.state_dict())
    if opt is not None:
        moments = {f"m.{k}": v for k, v in opt.m.items()}
        moments.update({f"v.{k}": v for k, v in opt.v.items()})
        tio.save_bundle(path / "optim.luna", moments)


def load_checkpoint(path) -> tuple[LunaModel, Optional[OptimizerState], dict]:
    path = Path(path)
    meta = json.loads((path / "config.json").read_text())
    model = LunaModel(ModelConfig.from_dict(meta["model"]))
    model.load_state_dict(tio.load_bundle(path / "params.luna"))
    opt = None
    if "optim" in meta and (path / "optim.luna").exists():
        raw = tio.load_bundle(path / "optim.luna")
        opt = OptimizerState(OptimConfig(**meta["optim"]),
                             {k[2:]: v for k, v in raw.items() if k.startswith("m.")},
                             {k[2:]: v for k, v in raw.items() if k.startswith("v.")},
                             meta["step"])
    return model, opt, meta
