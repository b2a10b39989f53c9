#!/usr/bin/env python3
"""Run the full Van der Pol study: meta-train iMAML and first-order MAML on
every seed, adapt all three initializations to the per-seed target, track the
reference circle, and aggregate a report.

Usage:
    python3 scripts/run_vdp_study.py [--config configs/vdp_study.json] [--out DIR]
"""
import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from metanssm.cli import main as cli
from metanssm.config import load_config

ALGORITHMS = ("imaml", "maml", "supervised")


def run(argv):
    code = cli(argv)
    if code != 0:
        raise SystemExit(f"command {' '.join(argv)} exited with {code}")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="configs/vdp_study.json")
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    config = load_config(args.config)
    out = args.out or config.out_dir
    base = ["--config", args.config, "--out", out]

    t0 = time.perf_counter()
    for seed in config.seeds:
        seed_args = base + ["--seed", str(seed)]
        run(["make-source"] + seed_args)
        for algorithm in ("imaml", "maml"):
            run(["meta-train"] + seed_args + ["--algorithm", algorithm])
        for algorithm in ALGORITHMS:
            run(["adapt"] + seed_args + ["--algorithm", algorithm])
            run(["track"] + seed_args + ["--algorithm", algorithm])
        print(f"[seed {seed}] done ({time.perf_counter() - t0:.0f}s elapsed)", flush=True)
    run(["report", "--config", args.config, "--out", out])
    print(f"study complete in {time.perf_counter() - t0:.0f}s; report at {out}/report.csv")


if __name__ == "__main__":
    main()
