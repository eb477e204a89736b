"""Write the miniature chess-format fixture used by the pipeline tests.

20 eligible players with 50 decisive months each, plus two players with
too few months (dropped at ingestion) and a handful of draws (rejected).
"""

from __future__ import annotations

import argparse
import csv
from pathlib import Path

import numpy as np

from ability_trace.core import logistic, rating_to_theta

N_PLAYERS = 20
N_MONTHS = 50


def make_rows(seed: int = 2024):
    rng = np.random.default_rng(seed)
    rows = []

    def player(pid, n_months, start, gain):
        month = 0
        for i in range(n_months):
            month += 1 + int(rng.random() < 0.2)  # some inactive months in between
            rating = start + gain * i / max(n_months - 1, 1) + rng.normal(0, 15)
            opp = rating + rng.normal(0, 150)
            if rng.random() < 0.05:
                rows.append((pid, month, round(rating), round(opp), "draw"))
            p = logistic(rating_to_theta(rating) - rating_to_theta(opp))
            rows.append((pid, month, round(rating), round(opp), "win" if rng.random() < p else "loss"))

    for j in range(N_PLAYERS):
        player(f"P{j + 1:02d}", N_MONTHS, rng.normal(1700, 150), rng.uniform(0, 400))
    player("SHORT1", 12, 1800.0, 50.0)
    player("SHORT2", 49, 1900.0, 100.0)
    return rows


def main(argv=None):
    here = Path(__file__).resolve().parent.parent
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=Path, default=here / "tests" / "fixtures" / "chess_mini.csv")
    parser.add_argument("--seed", type=int, default=2024)
    args = parser.parse_args(argv)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["player_id", "month_index", "player_rating_pre", "opponent_rating", "outcome"])
        w.writerows(make_rows(args.seed))
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
