"""Command-line entry point: ``luna {gradcheck,train,eval,bench}``.

Configuration is a flat TOML document; every key has a default listed in
:class:`RunConfig`. Command-line flags override the file. Unknown keys are
rejected.
"""
from __future__ import annotations

import argparse
import json
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import bench as benchmod
from . import checks
from .errors import ConfigError, LunaError
from .model import (
    Batch,
    LunaModel,
    ModelConfig,
    OptimConfig,
    OptimizerState,
    load_checkpoint,
    pad_batch,
    predict,
    save_checkpoint,
    train_step,
)
from .numerics import rng as rngmod
from .tasks import BOS, SEP, TaskSpec, copy_lm_sequence, dataset

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


@dataclass
class RunConfig:
    # model
    d: int = 32
    d_hidden: int = 64
    h: int = 2
    l: int = 16  # noqa: E741
    layers: int = 2
    n_max: int = 256
    tying: str = "none"
    pack_omega: str = "softplus"
    pooling: str = "cls"
    dropout: float = 0.0
    attn_dropout: float = 0.0
    mode: str = ""  # derived from the task when empty
    mechanism: str = "luna"
    dtype: str = ""  # f32 for train/bench, f64 for gradcheck when empty
    # task
    task: str = "majority"
    min_len: int = 129
    max_len: int = 129
    depth: int = 3
    max_args: int = 4
    symbols: int = 8
    n_train: int = 2000
    n_val: int = 500
    # optimization
    lr: float = 1e-3
    warmup: int = 100
    steps: int = 1000
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    weight_decay: float = 0.0
    clip: float = 1.0
    # run
    seed: int = 0
    log_every: int = 10
    eval_every: int = 250
    eval_batch: int = 100
    checkpoint_every: int = 0
    out: str = "runs/default"
    # gradcheck
    gradcheck_eps: float = 1e-5
    gradcheck_tol: float = 1e-4
    # bench
    bench_lengths: list = field(default_factory=lambda: [512, 1024, 2048, 4096])
    bench_mechanisms: list = field(default_factory=lambda: ["full", "luna", "fixed_proj"])
    bench_d: int = 64
    bench_d_hidden: int = 128
    bench_h: int = 2
    bench_batch: int = 1
    bench_reps: int = 9
    bench_warmup: int = 3
    bench_memory_budget_gb: float = 3.0

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Optional[dict] = None) -> "RunConfig":
        values: dict = {}
        if path:
            with open(path, "rb") as f:
                values.update(tomllib.load(f))
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**values)

    def task_spec(self) -> TaskSpec:
        return TaskSpec(kind=self.task, min_len=self.min_len, max_len=self.max_len, depth=self.depth,
                        max_args=self.max_args, symbols=self.symbols, seed=self.seed,
                        n_train=self.n_train, n_val=self.n_val)

    def model_config(self, spec: TaskSpec) -> ModelConfig:
        mode = self.mode or ("decoder_lm" if spec.kind == "copy" else "encoder_classifier")
        return ModelConfig(d=self.d, d_hidden=self.d_hidden, h=self.h, l=self.l, layers=self.layers,
                           vocab=spec.vocab, classes=spec.classes, n_max=self.n_max, tying=self.tying,
                           pack_omega=self.pack_omega, pooling=self.pooling, dropout=self.dropout,
                           attn_dropout=self.attn_dropout, seed=self.seed, mode=mode,
                           mechanism=self.mechanism, dtype=self.dtype or "f32")

    def optim_config(self) -> OptimConfig:
        return OptimConfig(lr=self.lr, warmup=self.warmup, total_steps=self.steps, beta1=self.beta1,
                           beta2=self.beta2, eps=self.eps, weight_decay=self.weight_decay, clip=self.clip)

    def bench_config(self) -> benchmod.BenchConfig:
        return benchmod.BenchConfig(d=self.bench_d, d_hidden=self.bench_d_hidden, h=self.bench_h,
                                    l=self.l, batch=self.bench_batch, reps=self.bench_reps,
                                    warmup=self.bench_warmup, seed=self.seed, dtype=self.dtype or "f32",
                                    memory_budget_gb=self.bench_memory_budget_gb)

    def to_toml(self) -> str:
        lines = []
        for k, v in asdict(self).items():
            lines.append(f"{k} = {json.dumps(v)}")
        return "\n".join(lines) + "\n"


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, cwd=Path(__file__).resolve().parent, timeout=10)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


# -- data assembly ------------------------------------------------------------------

class TaskData:
    """Materialized splits plus deterministic batch assembly for one task."""

    def __init__(self, spec: TaskSpec, mode: str):
        self.spec = spec
        self.mode = mode
        self.train = dataset(spec, "train")
        self.val = dataset(spec, "val")

    def batch(self, examples) -> Batch:
        if self.mode == "encoder_classifier":
            tokens, keep = pad_batch([e[0] for e in examples])
            return Batch(tokens, keep, labels=np.array([e[1] for e in examples]))
        if self.mode == "decoder_lm":
            pairs = [copy_lm_sequence(src) for src, _ in examples]
            tokens, keep = pad_batch([p[0] for p in pairs])
            targets, _ = pad_batch([p[1] for p in pairs], pad=-100)
            return Batch(tokens, keep, targets=targets)
        src, src_keep = pad_batch([e[0] for e in examples])
        tgt_in, keep = pad_batch([[BOS] + e[1][:-1] for e in examples])
        targets, _ = pad_batch([e[1] for e in examples], pad=-100)
        return Batch(tgt_in, keep, targets=targets, src=src, src_keep=src_keep)

    def train_batch(self, seed: int, step: int, size: int) -> Batch:
        idx = rngmod.stream(seed, "batch", step).integers(0, len(self.train), size)
        return self.batch([self.train[i] for i in idx])


def evaluate(model: LunaModel, data: TaskData, batch_size: int = 100) -> dict:
    """Validation accuracy: class accuracy, or exact-match of greedy copies for LMs."""
    if model.cfg.mode == "decoder_lm":
        correct = sum(greedy_copy(model, src) == tgt for src, tgt in data.val)
        return {"val_acc": correct / len(data.val), "n": len(data.val)}
    correct = 0
    for s in range(0, len(data.val), batch_size):
        chunk = data.val[s:s + batch_size]
        b = data.batch(chunk)
        pred = predict(model, b)
        if model.cfg.mode == "encoder_classifier":
            correct += int((pred == b.labels).sum())
        else:
            ok = (pred == b.targets) | (b.targets == -100)
            correct += int(ok.all(axis=-1).sum())
    return {"val_acc": correct / len(data.val), "n": len(data.val)}


def greedy_copy(model: LunaModel, src: list[int]) -> list[int]:
    from .numerics.tensor import no_grad

    seq = list(src) + [SEP]
    with no_grad():
        for _ in range(len(src)):
            logits = model.lm_forward(np.array(seq)).data
            seq.append(int(logits[-1].argmax()))
    return seq[len(src) + 1:]


# -- subcommands --------------------------------------------------------------------

def cmd_gradcheck(cfg: RunConfig, suite=None, stream=sys.stdout) -> int:
    if cfg.dtype and cfg.dtype != "f64":
        print(f"gradcheck requires dtype=f64 (got {cfg.dtype})", file=stream)
        return 2
    t0 = time.perf_counter()
    results = checks.run_suite(cfg.seed, cfg.gradcheck_eps, suite)
    failed = {k: v for k, v in results.items() if not v < cfg.gradcheck_tol}
    for name, err in results.items():
        mark = "ok  " if name not in failed else "FAIL"
        print(f"{mark} {name:<28} max_rel_error={err:.3e}", file=stream)
    worst = max(results.items(), key=lambda kv: kv[1])
    print(f"worst: {worst[0]} {worst[1]:.3e} (tol {cfg.gradcheck_tol:g}); "
          f"{time.perf_counter() - t0:.1f}s", file=stream)
    return 1 if failed else 0


def _write_run_header(out: Path, cfg: RunConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(cfg.to_toml())
    (out / "seed").write_text(f"{cfg.seed}\n")
    (out / "git_describe").write_text(git_describe() + "\n")


def cmd_train(cfg: RunConfig, resume: Optional[str] = None, stream=sys.stdout) -> int:
    spec = cfg.task_spec()
    mcfg = cfg.model_config(spec)
    out = Path(cfg.out)
    _write_run_header(out, cfg)
    data = TaskData(spec, mcfg.mode)
    if resume:
        model, opt, meta = load_checkpoint(resume)
        if opt is None:
            raise ConfigError(f"{resume} has no optimizer state")
        opt.cfg = cfg.optim_config()
    else:
        model = LunaModel(mcfg)
        opt = OptimizerState.create(model, cfg.optim_config())
    extra = {"task": asdict(spec), "eval_batch": cfg.eval_batch}
    mode = "a" if resume else "w"
    t_start = time.perf_counter()
    last = {}
    with open(out / "metrics.jsonl", mode) as metrics, open(out / "eval.jsonl", mode) as evals:
        while opt.step < cfg.steps:
            if cfg.checkpoint_every and opt.step % cfg.checkpoint_every == 0 and opt.step > 0:
                save_checkpoint(out / f"checkpoint-{opt.step}", model, opt, extra)
            step = opt.step
            t0 = time.perf_counter()
            last = train_step(model, data.train_batch(cfg.seed, step, cfg.batch_size), opt)
            wall_ms = (time.perf_counter() - t0) * 1e3
            if step % cfg.log_every == 0 or opt.step == cfg.steps:
                rec = {"step": step, "loss": last["loss"], "lr": last["lr"],
                       "grad_norm": last["grad_norm"], "wall_ms": round(wall_ms, 3)}
                metrics.write(json.dumps(rec) + "\n")
                metrics.flush()
            if cfg.eval_every and opt.step % cfg.eval_every == 0 and opt.step < cfg.steps:
                ev = evaluate(model, data, cfg.eval_batch)
                evals.write(json.dumps({"step": opt.step, **ev}) + "\n")
                evals.flush()
                print(f"step {opt.step} loss {last['loss']:.4f} val_acc {ev['val_acc']:.4f}", file=stream)
        final = evaluate(model, data, cfg.eval_batch)
        evals.write(json.dumps({"step": opt.step, **final}) + "\n")
    save_checkpoint(out / "checkpoint", model, opt, extra)
    report = {"steps": opt.step, "final_loss": last.get("loss"), "val_acc": final["val_acc"],
              "mechanism": mcfg.mechanism, "pooling": mcfg.pooling, "task": spec.kind,
              "params": model.num_parameters(), "wall_s": round(time.perf_counter() - t_start, 2)}
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    print(f"done: step {opt.step} val_acc {final['val_acc']:.4f} -> {out}", file=stream)
    return 0


def cmd_eval(cfg: RunConfig, checkpoints: Sequence[str], pooling: Optional[str] = None,
             stream=sys.stdout) -> list[dict]:
    """Evaluate checkpoints on their task's validation split, one row each.

    With checkpoints of both pooling modes, a paired comparison row is added.
    """
    rows = []
    for ck in checkpoints:
        model, _, meta = load_checkpoint(ck)
        if pooling and model.cfg.pooling != pooling:
            continue
        spec = TaskSpec(**meta["task"])
        data = TaskData(spec, model.cfg.mode)
        ev = evaluate(model, data, meta.get("eval_batch", cfg.eval_batch))
        rows.append({"checkpoint": str(ck), "task": spec.kind, "mechanism": model.cfg.mechanism,
                     "pooling": model.cfg.pooling, **ev})
    if not rows:
        raise ConfigError(f"no checkpoint matches pooling={pooling!r}")
    by_pool = {r["pooling"]: r for r in rows if r["mechanism"] == "luna"}
    if {"cls", "p_mean"} <= set(by_pool):
        diff = by_pool["p_mean"]["val_acc"] - by_pool["cls"]["val_acc"]
        rows.append({"comparison": "p_mean - cls", "delta_acc": diff,
                     "within_2_points": abs(diff) <= 0.02})
    for r in rows:
        print(json.dumps(r), file=stream)
    return rows


def cmd_bench(cfg: RunConfig, stream=sys.stdout) -> int:
    bcfg = cfg.bench_config()
    mem = benchmod.memory_count(cfg.bench_lengths, cfg.bench_mechanisms, bcfg)
    tim = benchmod.time_scaling(cfg.bench_lengths, cfg.bench_mechanisms, bcfg.reps, bcfg)
    report = mem.merge(tim)
    out = Path(cfg.out)
    _write_run_header(out, cfg)
    (out / "bench.csv").write_text(report.to_csv())
    (out / "bench.txt").write_text(report.to_text() + "\n")
    print(report.to_text(), file=stream)
    return 0


# -- argument parsing -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="luna", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat TOML config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--mechanism", choices=("luna", "full", "fixed_proj"))
        p.add_argument("--l", type=int, dest="l")
        p.add_argument("--pooling", choices=("cls", "p_mean"))
        p.add_argument("--out")
        return p

    common(sub.add_parser("gradcheck", help="finite-difference gradient suite"))
    tr = common(sub.add_parser("train", help="train on a synthetic task"))
    tr.add_argument("--resume", help="checkpoint directory to continue from")
    ev = common(sub.add_parser("eval", help="evaluate checkpoints"))
    ev.add_argument("--checkpoint", action="append", required=True)
    common(sub.add_parser("bench", help="time and memory scaling"))
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {"seed": args.seed, "mechanism": args.mechanism, "l": args.l, "out": args.out}
    if args.command != "eval":
        overrides["pooling"] = args.pooling
    try:
        cfg = RunConfig.load(args.config, overrides)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg)
        if args.command == "train":
            if cfg.mechanism == "fixed_proj":
                raise ConfigError("fixed_proj is a benchmark-only comparator")
            return cmd_train(cfg, args.resume)
        if args.command == "eval":
            cmd_eval(cfg, args.checkpoint, args.pooling)
            return 0
        if cfg.mechanism != "luna" and args.mechanism:
            cfg.bench_mechanisms = [cfg.mechanism]
        return cmd_bench(cfg)
    except LunaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
