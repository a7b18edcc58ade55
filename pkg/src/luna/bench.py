"""Wall-clock and counted-activation scaling of one encoder layer per mechanism.

Mechanisms:
  full        post-LN transformer layer with softmax attention (n x n scores)
  luna        Luna encoder layer with projected length ``l``
  fixed_proj  full attention over a context linearly projected to ``l`` rows by
              a learned (l x n) matrix; needs a separate matrix per length
"""
from __future__ import annotations

import csv
import io
import platform
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from threadpoolctl import threadpool_limits

from .layers import LunaLayerParams, TransformerLayerParams, luna_encoder_layer, transformer_layer
from .numerics import functional as F
from .numerics import rng as rngmod
from .numerics.tensor import DTYPES, Tensor, parameter, track_memory

MECHANISMS = ("full", "luna", "fixed_proj")
CSV_FIELDS = ("mechanism", "length", "wall_ms_median", "wall_ms_iqr", "peak_elements", "allocs")


@dataclass
class BenchConfig:
    d: int = 64
    d_hidden: int = 128
    h: int = 2
    l: int = 16  # noqa: E741
    batch: int = 1
    reps: int = 9
    warmup: int = 3
    seed: int = 0
    dtype: str = "f32"
    memory_budget_gb: float = 3.0


@dataclass
class BenchRecord:
    mechanism: str
    length: int
    wall_ms_median: Optional[float] = None
    wall_ms_iqr: Optional[float] = None
    trials: int = 0
    peak_elements: Optional[int] = None
    largest_alloc: Optional[int] = None
    allocs: Optional[int] = None
    skipped: str = ""


@dataclass
class BenchReport:
    records: list = field(default_factory=list)
    env: dict = field(default_factory=dict)

    def get(self, mechanism: str, length: int) -> BenchRecord:
        for r in self.records:
            if r.mechanism == mechanism and r.length == length:
                return r
        raise KeyError((mechanism, length))

    def merge(self, other: "BenchReport") -> "BenchReport":
        out = BenchReport([], {**self.env, **other.env})
        keys = []
        table = {}
        for r in self.records + other.records:
            k = (r.mechanism, r.length)
            if k not in table:
                keys.append(k)
                table[k] = BenchRecord(*k)
            dst = table[k]
            for name, value in asdict(r).items():
                if value is not None and value != "" and not (name == "trials" and value == 0):
                    setattr(dst, name, value)
        out.records = [table[k] for k in keys]
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in self.records:
            w.writerow([r.mechanism, r.length,
                        "" if r.wall_ms_median is None else f"{r.wall_ms_median:.3f}",
                        "" if r.wall_ms_iqr is None else f"{r.wall_ms_iqr:.3f}",
                        "" if r.peak_elements is None else r.peak_elements,
                        "" if r.allocs is None else r.allocs])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"{'mechanism':<11}{'length':>7}{'median ms':>12}{'iqr ms':>9}"
                 f"{'peak elems':>14}{'allocs':>8}  note"]
        for r in self.records:
            med = "-" if r.wall_ms_median is None else f"{r.wall_ms_median:.2f}"
            iqr = "-" if r.wall_ms_iqr is None else f"{r.wall_ms_iqr:.2f}"
            peak = "-" if r.peak_elements is None else str(r.peak_elements)
            allocs = "-" if r.allocs is None else str(r.allocs)
            lines.append(f"{r.mechanism:<11}{r.length:>7}{med:>12}{iqr:>9}{peak:>14}{allocs:>8}  {r.skipped}")
        if self.env:
            lines.append("env: " + ", ".join(f"{k}={v}" for k, v in self.env.items()))
        return "\n".join(lines)


def environment() -> dict:
    return {"python": platform.python_version(), "numpy": np.__version__,
            "machine": platform.machine(), "threads": 1}


class _Layer:
    """One encoder layer of a given mechanism with its parameters and input."""

    def __init__(self, mechanism: str, n: int, cfg: BenchConfig):
        if mechanism not in MECHANISMS:
            raise ValueError(f"unknown mechanism {mechanism!r}; expected one of {MECHANISMS}")
        dt = DTYPES[cfg.dtype]
        self.mechanism = mechanism
        s = cfg.seed
        self.x = Tensor(rngmod.normal(s, f"bench.x.{n}", (cfg.batch, n, cfg.d), 1.0, dt))
        if mechanism == "luna":
            self.params = LunaLayerParams.init(cfg.d, cfg.d_hidden, cfg.h, "none", s, "bench", dt)
            self.p = parameter(rngmod.normal(s, "bench.p", (cfg.l, cfg.d), 0.02, dt), "bench.p")
        else:
            self.params = TransformerLayerParams.init(cfg.d, cfg.d_hidden, cfg.h, "none", s, "bench", dt)
        if mechanism == "fixed_proj":
            self.e = parameter(rngmod.xavier_uniform(s, f"bench.e.{n}", (cfg.l, n), dt), "bench.e")

    def forward_backward(self) -> float:
        x = self.x
        if self.mechanism == "luna":
            out, p_out = luna_encoder_layer(x, self.p, self.params)
            loss = F.add(F.sum(out), F.sum(p_out))
        elif self.mechanism == "full":
            loss = F.sum(transformer_layer(x, x, self.params))
        else:
            # shared projection for keys and values: E (C W) == (E C) W
            loss = F.sum(transformer_layer(x, F.matmul(self.e, x), self.params))
        loss.backward()
        return float(loss.data)


def _estimate_ok(mechanism: str, n: int, cfg: BenchConfig) -> bool:
    item = np.dtype(DTYPES[cfg.dtype]).itemsize
    if mechanism == "full":
        need = 8 * cfg.batch * cfg.h * n * n * item
    else:
        need = 64 * cfg.batch * n * max(cfg.d_hidden, cfg.l * cfg.h) * item
    return need <= cfg.memory_budget_gb * 1e9


def time_scaling(lengths, mechanisms, reps: Optional[int] = None,
                 cfg: Optional[BenchConfig] = None) -> BenchReport:
    """Median forward+backward wall time of one layer, single-threaded."""
    cfg = cfg or BenchConfig()
    reps = reps or cfg.reps
    report = BenchReport(env=environment())
    with threadpool_limits(limits=1):
        for mech in mechanisms:
            for n in lengths:
                rec = BenchRecord(mech, int(n))
                if not _estimate_ok(mech, n, cfg):
                    rec.skipped = "skipped: exceeds memory budget"
                    report.records.append(rec)
                    continue
                layer = _Layer(mech, n, cfg)
                for _ in range(cfg.warmup):
                    layer.forward_backward()
                times = []
                for _ in range(reps):
                    t0 = time.perf_counter()
                    layer.forward_backward()
                    times.append((time.perf_counter() - t0) * 1e3)
                q1, med, q3 = np.percentile(times, [25, 50, 75])
                rec.wall_ms_median, rec.wall_ms_iqr, rec.trials = float(med), float(q3 - q1), reps
                report.records.append(rec)
                del layer
    return report


def memory_count(lengths, mechanisms, cfg: Optional[BenchConfig] = None) -> BenchReport:
    """Peak live activation elements (forward and backward) counted per tensor allocation."""
    cfg = cfg or BenchConfig()
    report = BenchReport(env=environment())
    for mech in mechanisms:
        for n in lengths:
            rec = BenchRecord(mech, int(n))
            if not _estimate_ok(mech, n, cfg):
                rec.skipped = "skipped: exceeds memory budget"
                report.records.append(rec)
                continue
            layer = _Layer(mech, n, cfg)
            with track_memory() as tr:
                layer.forward_backward()
            rec.peak_elements, rec.allocs, rec.largest_alloc = tr.peak, tr.allocs, tr.largest
            report.records.append(rec)
            del layer
    return report


def fit_relative_residual(lengths, values, degree: int) -> float:
    """Max |residual| / value of a least-squares polynomial fit of the given degree."""
    x = np.asarray(lengths, dtype=np.float64)
    y = np.asarray(values, dtype=np.float64)
    coef = np.polyfit(x, y, degree)
    return float(np.max(np.abs(np.polyval(coef, x) - y) / np.abs(y)))
