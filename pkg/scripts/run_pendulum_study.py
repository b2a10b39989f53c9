#!/usr/bin/env python3
"""Run the pendulum stabilization study: meta-train on the source masses,
adapt to each target mass, and hold the pendulum upright closed-loop.

Usage:
    python3 scripts/run_pendulum_study.py [--config configs/pendulum_study.json] [--out DIR]
"""
import argparse
import json
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from metanssm.cli import main as cli
from metanssm.config import load_config
from metanssm.experiments import run_dir


def run(argv):
    code = cli(argv)
    if code != 0:
        raise SystemExit(f"command {' '.join(argv)} exited with {code}")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="configs/pendulum_study.json")
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    config = load_config(args.config)
    out = args.out or config.out_dir
    t0 = time.perf_counter()
    for seed in config.seeds:
        seed_args = ["--config", args.config, "--out", out, "--seed", str(seed)]
        run(["make-source"] + seed_args)
        run(["meta-train"] + seed_args + ["--algorithm", "imaml"])
        run(["adapt"] + seed_args + ["--algorithm", "imaml"])
        run(["track"] + seed_args + ["--algorithm", "imaml"])
        step = max(config.adapt_steps)
        print(f"[seed {seed}] closed-loop |angle| at episode end, {step} adaptation steps:")
        for j in range(config.target_count):
            summary = json.loads(
                (run_dir(out, seed, "imaml") / "track"
                 / f"imaml_target{j}_step{step}_trace.csv.json").read_text()
            )
            print(f"  target {j}: {summary['final_err']:.3e}")
    run(["report", "--config", args.config, "--out", out])
    print(f"study complete in {time.perf_counter() - t0:.0f}s; report at {out}/report.csv")


if __name__ == "__main__":
    main()
