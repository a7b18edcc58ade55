"""Luna with cls pooling vs mean over the final packed state, then a paired eval.

    python scripts/pooling_study.py configs/listops.toml runs/pooling
"""
import argparse
from pathlib import Path

from luna.cli import RunConfig, cmd_eval
from train_pair import run

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("config")
    ap.add_argument("out", type=Path)
    args = ap.parse_args()
    for pooling in ("cls", "p_mean"):
        run(args.config, args.out / pooling, mechanism="luna", pooling=pooling)
    cmd_eval(RunConfig(), [str(args.out / p / "checkpoint") for p in ("cls", "p_mean")])
