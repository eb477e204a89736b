"""Test RMSE as a function of the number of training respondents."""

from __future__ import annotations

import argparse
from pathlib import Path

from ability_trace.evaluation import elbow, size_table
from ability_trace.experiments import TRAINING_SIZE, training_size_run


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--sizes", type=int, nargs="+", default=[50, 100, 200, 400, 600])
    ap.add_argument("--methods", nargs="+", default=["growth", "elo", "glmm_fixed", "glmm_ml"])
    ap.add_argument("--out", type=Path, default=Path("results/training_size"))
    args = ap.parse_args(argv)
    args.out.mkdir(parents=True, exist_ok=True)

    for seed in args.seeds:
        rows = training_size_run(TRAINING_SIZE, seed, args.sizes, args.methods)
        (args.out / f"sizes_seed{seed}.csv").write_text(size_table(rows))
        for m in args.methods:
            curve = " ".join(f"{r.size}:{r.mean_rmse:.4f}" for r in rows if r.method == m)
            print(f"seed {seed} {m:<11} {curve} elbow={elbow(rows, m)}")


if __name__ == "__main__":
    main()
