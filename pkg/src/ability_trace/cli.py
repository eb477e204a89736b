"""Command-line driver: ingest, simulate, fit, estimate, sweep-k and benchmark.

Exit codes: 0 success, 2 usage or parse error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from ability_trace import __version__
from ability_trace.core import ConvergenceError, InvalidArgumentError, ResponsePanel
from ability_trace.data import (
    CURVES,
    DEFAULT_MIN_ACTIVE_MONTHS,
    ITEM_POLICIES,
    IngestError,
    ScenarioSpec,
    build_scenario,
    generate_synthetic,
    ingest_game_records,
    read_generic_panel,
    read_truth,
    write_panel,
    write_truth,
)
from ability_trace.elo import DEFAULT_K_GRID, EloConfig, elo_trace, fit_start_theta
from ability_trace.evaluation import METHODS, BenchmarkConfig, benchmark, sweep_k
from ability_trace.glmm import DEFAULT_NODES, GlmmModel, estimate_random_effect, fit_glmm
from ability_trace.growth import DEFAULT_WEIGHT_SD, GrowthModel, estimate_new_respondent, fit_growth_model

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 2, 3
FIT_METHODS = ("growth", "elo", "glmm")

log = logging.getLogger("ability_trace")


class UsageError(Exception):
    pass


def _k_grid(text: str) -> tuple[float, ...]:
    try:
        grid = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None
    if not grid or any(not k > 0 for k in grid):
        raise argparse.ArgumentTypeError("K grid must be non-empty with positive values")
    return grid


def _positive(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return v


def _fraction(text: str) -> float:
    v = float(text)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError(f"must lie strictly between 0 and 1, got {text}")
    return v


def _add_input(p, truth: bool = False):
    p.add_argument("--input", required=True, type=Path, help="response file")
    p.add_argument("--format", choices=("chess", "generic"), default="generic")
    p.add_argument("--min-months", type=int, default=DEFAULT_MIN_ACTIVE_MONTHS, help="chess eligibility filter")
    if truth:
        p.add_argument("--truth", type=Path, help="truth side table (generic format only)")


def _add_split(p):
    p.add_argument("--scenario", type=int, choices=(1, 2), default=1)
    p.add_argument("--seed", type=int, default=0, help="train/test split seed")
    p.add_argument("--test-fraction", type=_fraction, default=0.30)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ability-trace", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="turn a response log into panel and truth files")
    _add_input(p)
    p.add_argument("--max-iterations", type=int, default=None)
    p.add_argument("--out", required=True, type=Path, help="output directory")

    p = sub.add_parser("simulate", help="draw a synthetic panel with known abilities")
    p.add_argument("--respondents", type=int, default=600)
    p.add_argument("--iterations", type=int, default=50)
    p.add_argument("--growth", choices=CURVES, default="logistic")
    p.add_argument("--ability-sd", type=float, default=0.5)
    p.add_argument("--spread-slope", type=float, default=0.0)
    p.add_argument("--item-policy", choices=ITEM_POLICIES, default="matched")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, type=Path, help="output directory")

    p = sub.add_parser("fit", help="fit one model to the training split")
    _add_input(p, truth=True)
    _add_split(p)
    p.add_argument("--method", required=True, help="one of " + ", ".join(FIT_METHODS))
    p.add_argument("--k", type=_positive, default=None, help="Elo step size (default per scenario)")
    p.add_argument("--weight-sd", type=_positive, default=DEFAULT_WEIGHT_SD)
    p.add_argument("--nodes", type=int, default=DEFAULT_NODES)
    p.add_argument("--all", action="store_true", help="fit on every respondent instead of the training split")
    p.add_argument("--out", required=True, type=Path, help="model file")

    p = sub.add_parser("estimate", help="estimate abilities of respondents with a fitted model")
    p.add_argument("--model", required=True, type=Path)
    _add_input(p)
    p.add_argument("--prefix", type=int, default=None, help="use only the first N responses")
    p.add_argument("--out", required=True, type=Path, help="estimates file")

    p = sub.add_parser("sweep-k", help="training RMSE and Spearman over a grid of step sizes")
    _add_input(p, truth=True)
    _add_split(p)
    p.add_argument("--method", default="growth", help="elo or growth")
    p.add_argument("--k-grid", type=_k_grid, default=DEFAULT_K_GRID)
    p.add_argument("--weight-sd", type=_positive, default=DEFAULT_WEIGHT_SD)
    p.add_argument("--out", required=True, type=Path, help="output directory")

    p = sub.add_parser("benchmark", help="fit every method and report per-iteration test RMSE")
    _add_input(p, truth=True)
    _add_split(p)
    p.add_argument("--method", default=",".join(METHODS), help="comma-separated subset of " + ", ".join(METHODS))
    p.add_argument("--k", type=_positive, default=None, help="Elo step size (default per scenario)")
    p.add_argument("--k-rank", type=_positive, default=None, help="growth-model rank step size")
    p.add_argument("--weight-sd", type=_positive, default=DEFAULT_WEIGHT_SD)
    p.add_argument("--nodes", type=int, default=DEFAULT_NODES)
    p.add_argument("--repeats", type=int, default=3, help="timing repeats (median is reported)")
    p.add_argument("--out", required=True, type=Path, help="output directory")
    return parser


# --- helpers --------------------------------------------------------------


def _load(args, need_truth: bool = False):
    """Panel and (optionally) truth from ``--input``."""
    if not args.input.is_file():
        raise UsageError(f"input file not found: {args.input}")
    if args.format == "chess":
        result = ingest_game_records(args.input, min_active_months=args.min_months)
        if result.rejected:
            log.info("rejected %d rows", len(result.rejected))
        return result.panel, result.truth
    panel = read_generic_panel(args.input)
    truth_path = getattr(args, "truth", None)
    if truth_path is None:
        if need_truth:
            raise UsageError("--truth is required with --format generic")
        return panel, None
    if not truth_path.is_file():
        raise UsageError(f"truth file not found: {truth_path}")
    return panel, read_truth(truth_path, panel)


def _scenario(args, panel, truth):
    spec = ScenarioSpec.scenario(args.scenario, split_fraction_test=args.test_fraction, split_seed=args.seed)
    return build_scenario(panel, spec, truth)


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _metadata(args, **extra) -> dict:
    doc = {"command": args.command, "version": __version__}
    for key, value in sorted(vars(args).items()):
        if key in ("command", "verbose"):
            continue
        doc[key] = str(value) if isinstance(value, Path) else value
    doc.update(extra)
    return doc


def _elo_doc(config: EloConfig) -> dict:
    return {"version": 1, "model": "elo", "k": config.policy.k, "start_theta": config.start_theta}


def _default_k(scenario: int, which: str) -> float:
    cfg = BenchmarkConfig.for_scenario(scenario)
    return cfg.k_elo if which == "elo" else cfg.k_growth


# --- commands -------------------------------------------------------------


def cmd_ingest(args) -> int:
    if not args.input.is_file():
        raise UsageError(f"input file not found: {args.input}")
    args.out.mkdir(parents=True, exist_ok=True)
    if args.format == "chess":
        result = ingest_game_records(args.input, args.min_months, args.max_iterations)
        panel, truth = result.panel, result.truth
        rejected, dropped = len(result.rejected), len(result.dropped_players)
    else:
        panel, truth, rejected, dropped = read_generic_panel(args.input), None, 0, 0
    write_panel(panel, args.out / "panel.csv")
    if truth is not None:
        write_truth(panel, truth, args.out / "truth.csv")
    summary = {
        "respondents": panel.n_respondents,
        "iterations": panel.n_iterations,
        "responses": int(panel.mask.sum()),
        "rejected_rows": rejected,
        "dropped_players": dropped,
    }
    _write_json(args.out / "metadata.json", _metadata(args, summary=summary))
    print(" ".join(f"{k}={v}" for k, v in summary.items()))
    return EXIT_OK


def cmd_simulate(args) -> int:
    synth = generate_synthetic(
        args.respondents,
        args.iterations,
        growth=args.growth,
        ability_sd=args.ability_sd,
        item_policy=args.item_policy,
        seed=args.seed,
        spread_slope=args.spread_slope,
        item_pool=list(np.linspace(-3, 3, 13)) if args.item_policy == "fixed_pool" else None,
    )
    args.out.mkdir(parents=True, exist_ok=True)
    write_panel(synth.panel, args.out / "panel.csv")
    write_truth(synth.panel, synth.true_theta, args.out / "truth.csv")
    _write_json(args.out / "metadata.json", _metadata(args))
    print(f"respondents={synth.panel.n_respondents} iterations={synth.panel.n_iterations}")
    return EXIT_OK


def cmd_fit(args) -> int:
    if args.method not in FIT_METHODS:
        raise UsageError(f"unknown method {args.method!r}; expected one of {', '.join(FIT_METHODS)}")
    panel, truth = _load(args)
    train = panel if args.all else _scenario(args, panel, truth).train
    t0 = time.perf_counter()
    if args.method == "growth":
        k = args.k if args.k is not None else _default_k(args.scenario, "growth")
        doc = fit_growth_model(train, k, args.weight_sd).to_dict()
    elif args.method == "elo":
        k = args.k if args.k is not None else _default_k(args.scenario, "elo")
        doc = _elo_doc(EloConfig.constant(k, fit_start_theta(train)))
    else:
        doc = fit_glmm(train, args.nodes).to_dict()
    elapsed = time.perf_counter() - t0
    _write_json(args.out, doc)
    print(f"method={args.method} respondents={train.n_respondents} iterations={train.n_iterations} fit_seconds={elapsed:.3f}")
    return EXIT_OK


def _load_model(path: Path):
    if not path.is_file():
        raise UsageError(f"model file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"model file is not valid JSON: {exc}") from None
    kind = doc.get("model")
    if kind == "growth":
        return kind, GrowthModel.from_dict(doc)
    if kind == "glmm":
        return kind, GlmmModel.from_dict(doc)
    if kind == "elo":
        return kind, EloConfig.constant(float(doc["k"]), float(doc["start_theta"]))
    raise UsageError(f"unknown model type {kind!r} in {path}")


def estimate_rows(kind: str, model, panel: ResponsePanel, prefix: int | None = None):
    """``(respondent_id, iteration, theta)`` rows, one per observed response."""
    rows = []
    for rid, responses in panel.sequences():
        responses = list(responses)[:prefix] if prefix is not None else list(responses)
        if kind == "growth":
            rows += [(e.respondent_id, e.iteration, e.theta_hat) for e in estimate_new_respondent(model, responses)]
        elif kind == "elo":
            trace = elo_trace(responses, model)
            rows += [(rid, r.iteration, v) for r, v in zip(responses, trace.estimates)]
        else:
            for t in range(1, len(responses) + 1):
                if t > model.n_iterations:
                    raise IndexError(f"responses reach iteration {t} beyond the model's {model.n_iterations}")
                u = estimate_random_effect(model, responses[:t]).u
                rows.append((rid, t, model.beta[t - 1] + u))
    return rows


def cmd_estimate(args) -> int:
    kind, model = _load_model(args.model)
    panel, _ = _load(args)
    if args.prefix is not None and args.prefix < 1:
        raise UsageError("--prefix must be >= 1")
    rows = estimate_rows(kind, model, panel, args.prefix)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        fh.write("respondent_id,iteration,theta\n")
        for rid, t, v in rows:
            fh.write(f"{rid},{t},{float(v)!r}\n")
    print(f"model={kind} estimates={len(rows)}")
    return EXIT_OK


def cmd_sweep_k(args) -> int:
    if args.method not in ("elo", "growth"):
        raise UsageError(f"sweep-k method must be elo or growth, got {args.method!r}")
    panel, truth = _load(args, need_truth=True)
    sc = _scenario(args, panel, truth)
    result = sweep_k(sc.train, sc.train_truth, args.k_grid, args.method, args.weight_sd)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / f"sweep_{args.method}.csv").write_text(result.to_csv(), encoding="utf-8")
    meta = _metadata(args, best_k_rmse=result.best_k_rmse, best_k_spearman=result.best_k_spearman)
    _write_json(args.out / f"sweep_{args.method}.json", meta)
    print(f"rows={len(result.rows)} best_k_rmse={result.best_k_rmse} best_k_spearman={result.best_k_spearman}")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    methods = tuple(m.strip() for m in args.method.split(",") if m.strip())
    bad = [m for m in methods if m not in METHODS]
    if bad or not methods:
        raise UsageError(f"unknown methods {bad}; expected a subset of {', '.join(METHODS)}")
    panel, truth = _load(args, need_truth=True)
    sc = _scenario(args, panel, truth)
    overrides = {"weight_sd": args.weight_sd, "nodes": args.nodes, "timing_repeats": args.repeats}
    if args.k is not None:
        overrides["k_elo"] = args.k
    if args.k_rank is not None:
        overrides["k_growth"] = args.k_rank
    config = BenchmarkConfig.for_scenario(args.scenario, **overrides)
    report = benchmark(sc.train, sc.test, sc.test_truth, methods, args.scenario, config, {"split_seed": args.seed})
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "rmse_table.csv").write_text(report.rmse_table(), encoding="utf-8")
    (args.out / "rmse_long.csv").write_text(report.long_table(), encoding="utf-8")
    (args.out / "report.json").write_text(report.to_json(), encoding="utf-8")
    # Wall times differ between runs, so they live apart from the reproducible outputs.
    (args.out / "timings.csv").write_text(report.timings_table(), encoding="utf-8")
    for m, v in report.mean_rmse.items():
        print(f"{m}: mean_rmse={v:.4f}")
    for m, why in report.failures.items():
        print(f"{m}: FAILED {why}", file=sys.stderr)
    return EXIT_NUMERICAL if report.failures else EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "estimate": cmd_estimate,
    "sweep-k": cmd_sweep_k,
    "benchmark": cmd_benchmark,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, IngestError, InvalidArgumentError, IndexError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConvergenceError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
