"""Memory and time scaling table for one layer at lengths 512..4096.

    python scripts/bench_table.py runs/bench
"""
import sys
from pathlib import Path

from luna import bench

LENGTHS = [512, 1024, 2048, 4096]
MECHS = ["full", "luna", "fixed_proj"]

if __name__ == "__main__":
    out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/bench")
    out.mkdir(parents=True, exist_ok=True)
    cfg = bench.BenchConfig()
    mem = bench.memory_count(LENGTHS, MECHS, cfg)
    report = mem.merge(bench.time_scaling(LENGTHS, MECHS, cfg.reps, cfg))
    (out / "bench.csv").write_text(report.to_csv())
    (out / "bench.txt").write_text(report.to_text())
    print(report.to_text())
    for m in MECHS:
        peaks = [mem.get(m, n).peak_elements for n in LENGTHS]
        print(f"{m:10s} linear-fit residual {bench.fit_relative_residual(LENGTHS, peaks, 1):.3f}  "
              f"quadratic {bench.fit_relative_residual(LENGTHS, peaks, 2):.3f}")
    ratio = mem.get("luna", 4096).peak_elements / mem.get("full", 4096).peak_elements
    speed = report.get("full", 4096).wall_ms_median / report.get("luna", 4096).wall_ms_median
    print(f"peak ratio luna/full @4096 = {ratio:.3f}; speedup @4096 = {speed:.1f}x")
