"""Acceptance criteria, one test (and one printed PASS/FAIL line) each.

Training criteria run the real CLI on the configs in ``configs/`` and take
several minutes each on one CPU core.
"""
import json
import time
from pathlib import Path

import numpy as np
import pytest

from luna import bench, checks
from luna.attention import AttentionParams, luna_attend, luna_causal
from luna.cli import RunConfig, cmd_eval, cmd_train
from luna.model import Batch, LunaModel, ModelConfig, OptimConfig, OptimizerState, pad_batch, train_step
from luna.numerics import functional as F
from luna.numerics.tensor import Tensor, track_memory

from conftest import attend_np, luna_causal_prefix_np

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"
RESULTS: list[str] = []


@pytest.fixture
def verdict(capsys, request):
    def emit(ok: bool, detail: str):
        line = f"[{'PASS' if ok else 'FAIL'}] {request.node.name}: {detail}"
        RESULTS.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok
    return emit


# -- 1 ---------------------------------------------------------------------------------

def test_criterion_1_gradient_suite(verdict):
    t0 = time.process_time()
    errs = checks.run_suite(seed=0)
    cpu = time.process_time() - t0
    worst = max(errs, key=errs.get)
    ok = all(v < 1e-4 for v in errs.values()) and cpu < 60
    assert verdict(ok, f"{len(errs)} ops, worst {worst}={errs[worst]:.2e} (< 1e-4), {cpu:.1f}s CPU (< 60s)")


# -- 2 ---------------------------------------------------------------------------------

def test_criterion_2_causal_correctness(verdict):
    g = np.random.default_rng(2)
    worst, bit_exact = 0.0, True
    for i in range(50):
        kind = ("elu1", "softplus")[i % 2]
        heads = int(g.choice([1, 2]))
        d = int(g.choice([4, 8]))
        n, l = int(g.integers(1, 17)), int(g.integers(1, 5))
        p = AttentionParams.init(d, heads, "none", int(g.integers(1 << 30)))
        X, P = g.standard_normal((n, d)), g.standard_normal((l, d))
        out = luna_causal(Tensor(X), Tensor(P), p, kind).data
        ref = luna_causal_prefix_np(X, P, p.wq.data, p.wk.data, p.wv.data, heads, kind)
        worst = max(worst, float(np.abs(out - ref).max()))
        if n > 1:
            t = int(g.integers(1, n))
            X2 = X.copy()
            X2[t:] += g.standard_normal((n - t, d))
            bit_exact &= np.array_equal(luna_causal(Tensor(X2), Tensor(P), p, kind).data[:t], out[:t])
    ok = worst < 1e-10 and bit_exact
    assert verdict(ok, f"50 instances, max |err| {worst:.1e} (< 1e-10), past rows bit-identical: {bit_exact}")


# -- 3 ---------------------------------------------------------------------------------

def test_criterion_3_nested_attention(verdict):
    g = np.random.default_rng(3)
    worst, largest_ratio = 0.0, 0.0
    for _ in range(50):
        heads = int(g.choice([1, 2, 4]))
        d = 4 * int(g.integers(1, 3))
        n, l, m = int(g.integers(1, 40)), int(g.integers(1, 5)), int(g.integers(1, 40))
        pp = AttentionParams.init(d, heads, "none", int(g.integers(1 << 30)))
        pu = AttentionParams.init(d, heads, "none", int(g.integers(1 << 30)))
        X, P, C = g.standard_normal((n, d)), g.standard_normal((l, d)), g.standard_normal((m, d))
        keep = g.random(m) < 0.8
        keep[0] = True
        Xt, Ct = Tensor(X, requires_grad=True), Tensor(C, requires_grad=True)
        with track_memory() as tr:
            yx, yp = luna_attend(Xt, Tensor(P), Ct, pp, pu, keep)
            F.add(F.sum(yx), F.sum(yp)).backward()
        yp_ref = attend_np(P, C, pp.wq.data, pp.wk.data, pp.wv.data, heads, keep)
        yx_ref = attend_np(X, yp_ref, pu.wq.data, pu.wk.data, pu.wv.data, heads)
        worst = max(worst, float(np.abs(yp.data - yp_ref).max()), float(np.abs(yx.data - yx_ref).max()))
        if n * m > max(n, m) * d * 4:  # only meaningful when n*m dominates the linear-size tensors
            largest_ratio = max(largest_ratio, tr.largest / (n * m))
    # a large instance where an (n, m) tensor would dwarf everything else
    n, m = 2000, 1500
    pp, pu = AttentionParams.init(8, 2, seed=1), AttentionParams.init(8, 2, seed=2)
    with track_memory() as tr:
        yx, yp = luna_attend(Tensor(g.standard_normal((n, 8)), requires_grad=True), Tensor(g.standard_normal((4, 8))),
                             Tensor(g.standard_normal((m, 8)), requires_grad=True), pp, pu)
        F.add(F.sum(yx), F.sum(yp)).backward()
    no_nm = tr.largest < n * m and largest_ratio < 1
    ok = worst < 1e-12 and no_nm
    assert verdict(ok, f"50 instances, max |err| {worst:.1e} (< 1e-12); largest tensor at n=2000,m=1500: "
                       f"{tr.largest} elements vs n*m={n * m}")


# -- 4 ---------------------------------------------------------------------------------

def test_criterion_4_complexity_scaling(verdict, tmp_path):
    t0 = time.process_time()
    lengths = [512, 1024, 2048, 4096]
    cfg = bench.BenchConfig()
    mem = bench.memory_count(lengths, ["full", "luna"], cfg)
    tim = bench.time_scaling(lengths, ["full", "luna"], 9, cfg)
    cpu = time.process_time() - t0
    report = mem.merge(tim)
    (tmp_path / "bench.csv").write_text(report.to_csv())
    print(report.to_text())
    luna = [mem.get("luna", n).peak_elements for n in lengths]
    full = [mem.get("full", n).peak_elements for n in lengths]
    lin_luna = bench.fit_relative_residual(lengths, luna, 1)
    lin_full = bench.fit_relative_residual(lengths, full, 1)
    quad_full = bench.fit_relative_residual(lengths, full, 2)
    ratio = luna[-1] / full[-1]
    speedup = tim.get("full", 4096).wall_ms_median / tim.get("luna", 4096).wall_ms_median
    ok = lin_luna < 0.05 and lin_full >= 0.05 and quad_full < 0.05 and ratio <= 0.20 and speedup >= 3 and cpu < 600
    assert verdict(ok, f"luna linear residual {lin_luna:.3f} (< 0.05); full linear {lin_full:.3f} (fails), "
                       f"quadratic {quad_full:.3f}; peak ratio @4096 {ratio:.3f} (<= 0.20); "
                       f"speedup @4096 {speedup:.1f}x (>= 3); {cpu:.0f}s CPU")


# -- 5, 6 --------------------------------------------------------------------------------

_RUNS: dict = {}


def _train(tmp_root: Path, name: str, config: str, **overrides) -> dict:
    """Train once per (config, overrides) and cache the report plus CPU time."""
    key = (config, tuple(sorted(overrides.items())))
    if key not in _RUNS:
        out = tmp_root / name
        cfg = RunConfig.load(str(CONFIGS / config), {"out": str(out), **overrides})
        t0 = time.process_time()
        assert cmd_train(cfg) == 0
        report = json.loads((out / "report.json").read_text())
        report["cpu_s"] = time.process_time() - t0
        report["checkpoint"] = str(out / "checkpoint")
        _RUNS[key] = report
    return _RUNS[key]


@pytest.fixture(scope="module")
def run_root(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance_runs")


def _pair(run_root, config, floor):
    luna = _train(run_root, f"{config}-luna", config, mechanism="luna")
    full = _train(run_root, f"{config}-full", config, mechanism="full")
    gap = luna["val_acc"] - full["val_acc"]
    ok = (abs(gap) <= 0.02 and luna["val_acc"] > floor and full["val_acc"] > floor
          and luna["cpu_s"] < 600 and full["cpu_s"] < 600)
    detail = (f"luna {luna['val_acc']:.3f} vs full {full['val_acc']:.3f} (gap {100 * gap:+.1f} pts, |gap| <= 2; "
              f"both > {floor:.2f}); CPU {luna['cpu_s']:.0f}s / {full['cpu_s']:.0f}s (< 600s)")
    return ok, detail


def test_criterion_5_trainability_majority(verdict, run_root):
    ok, detail = _pair(run_root, "majority.toml", 0.95)
    assert verdict(ok, detail)


def test_criterion_5_trainability_listops(verdict, run_root):
    ok, detail = _pair(run_root, "listops.toml", 0.60)
    assert verdict(ok, detail)


def test_criterion_6_pooling_study(verdict, run_root):
    cls = _train(run_root, "listops.toml-luna", "listops.toml", mechanism="luna")
    pm = _train(run_root, "listops-p_mean", "listops.toml", mechanism="luna", pooling="p_mean")
    rows = cmd_eval(RunConfig(), [cls["checkpoint"], pm["checkpoint"]])
    pair = rows[-1]
    trained = cls["val_acc"] > 0.5 and pm["val_acc"] > 0.5
    ok = trained and pair.get("within_2_points") is True
    assert verdict(ok, f"cls {rows[0]['val_acc']:.3f}, p_mean {rows[1]['val_acc']:.3f}, "
                       f"delta {100 * pair['delta_acc']:+.1f} pts (|delta| <= 2)")


# -- 7 ---------------------------------------------------------------------------------

def test_criterion_7_variable_length(verdict):
    cfg = ModelConfig(d=32, d_hidden=64, h=2, l=16, layers=2, vocab=6, classes=2, n_max=1024,
                      dropout=0.0, attn_dropout=0.0, pooling="p_mean")
    model = LunaModel(cfg)
    opt = OptimizerState.create(model, OptimConfig(lr=1e-3, warmup=0, total_steps=10))
    g = np.random.default_rng(7)
    shapes = []
    for n in (37, 129, 1024):
        seqs = [list(g.integers(4, 6, n)), list(g.integers(4, 6, max(1, n - 5)))]
        tokens, keep = pad_batch(seqs)
        logits = model.classify(tokens, keep)
        metrics = train_step(model, Batch(tokens, keep, labels=np.array([0, 1])), opt)
        shapes.append((n, logits.shape, np.isfinite(metrics["loss"])))
    ok = all(s == (2, 2) and fin for _, s, fin in shapes)
    assert verdict(ok, "one instance, lengths 37/129/1024: " +
                   ", ".join(f"n={n} logits {s}" for n, s, _ in shapes))


# -- 8 ---------------------------------------------------------------------------------

def test_criterion_8_determinism(verdict, tmp_path):
    cfg = dict(steps=120, dropout=0.1, attn_dropout=0.1, eval_every=60, n_train=400, n_val=100)
    for name in ("a", "b"):
        assert cmd_train(RunConfig.load(str(CONFIGS / "majority.toml"), {"out": str(tmp_path / name), **cfg})) == 0
    files = ("params.luna", "optim.luna", "config.json")
    same = {f: (tmp_path / "a/checkpoint" / f).read_bytes() == (tmp_path / "b/checkpoint" / f).read_bytes()
            for f in files}
    logs_same = [json.loads(x)["loss"] for x in (tmp_path / "a/metrics.jsonl").read_text().splitlines()] == \
        [json.loads(x)["loss"] for x in (tmp_path / "b/metrics.jsonl").read_text().splitlines()]
    ok = all(same.values()) and logs_same
    assert verdict(ok, f"two seeded runs with dropout: checkpoint files identical {same}, loss streams identical {logs_same}")


def test_acceptance_summary():
    print("\n".join(RESULTS))
