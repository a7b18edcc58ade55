"""Train Luna and the full-attention baseline on one config and compare final accuracy.

    python scripts/train_pair.py configs/majority.toml runs/majority
"""
import argparse
import json
import time
from pathlib import Path

from luna.cli import main


def run(config: str, out: Path, **flags) -> dict:
    argv = ["train", "--config", config, "--out", str(out)]
    for k, v in flags.items():
        argv += [f"--{k}", str(v)]
    t0 = time.perf_counter()
    if main(argv) != 0:
        raise SystemExit(f"training failed: {argv}")
    report = json.loads((out / "report.json").read_text())
    report["wall_s"] = round(time.perf_counter() - t0, 1)
    return report


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("config")
    ap.add_argument("out", type=Path)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rows = {m: run(args.config, args.out / m, mechanism=m, seed=args.seed) for m in ("luna", "full")}
    for m, r in rows.items():
        print(f"{m:5s} val_acc={r['val_acc']:.4f} wall={r['wall_s']}s")
    print(f"gap (luna - full) = {100 * (rows['luna']['val_acc'] - rows['full']['val_acc']):+.1f} points")
