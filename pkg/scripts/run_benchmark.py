"""Full benchmark of all five methods on a synthetic panel or a chess file.

Without ``--input`` the scenario-contrast design is simulated. Outputs match
the ``benchmark`` CLI command.
"""

from __future__ import annotations

import argparse
from pathlib import Path

from ability_trace import cli
from ability_trace.data import write_panel, write_truth
from ability_trace.experiments import SCENARIO_CONTRAST


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--input", type=Path, default=None, help="chess-format file; simulated if omitted")
    ap.add_argument("--scenario", type=int, choices=(1, 2), default=1)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--respondents", type=int, default=SCENARIO_CONTRAST.n_respondents)
    ap.add_argument("--out", type=Path, default=Path("results/benchmark"))
    args = ap.parse_args(argv)
    args.out.mkdir(parents=True, exist_ok=True)

    if args.input is None:
        synth = SCENARIO_CONTRAST.with_(n_respondents=args.respondents).generate(args.seed)
        panel_path, truth_path = args.out / "panel.csv", args.out / "truth.csv"
        write_panel(synth.panel, panel_path)
        write_truth(synth.panel, synth.true_theta, truth_path)
        source = ["--input", panel_path, "--format", "generic", "--truth", truth_path]
    else:
        source = ["--input", args.input, "--format", "chess"]
    argv = ["benchmark", *source, "--scenario", args.scenario, "--seed", args.seed, "--out", args.out]
    return cli.main([str(a) for a in argv])


if __name__ == "__main__":
    raise SystemExit(main())
