"""Command-line entry point: ``patrolplan {fit,synth,run,grid,eval,summary}``.

Exit codes: 0 success, 1 unexpected failure, 2 invalid configuration or
usage, 3 unreadable or malformed input data, 4 training or numerical failure.
"""

from __future__ import annotations

import os

# deterministic single-threaded linear algebra unless the caller says otherwise
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

from .agent_oracle import TrainingDivergedError  # noqa: E402
from .config import ConfigError, load_config, validate_config  # noqa: E402
from .deterrence_fit import (  # noqa: E402
    DeterrenceCoefficients,
    PanelFormatError,
    SeparationError,
    SingularDesignError,
    coefficients_from_dict,
    fit_logistic,
    normalize_efforts,
    read_panel_csv,
    synth_panel,
    write_coefficients,
    write_panel_csv,
)
from .matrix_game import NashSolverError  # noqa: E402
from .seeding import derive_rng  # noqa: E402

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4

log = logging.getLogger("patrolplan")


class UsageError(Exception):
    pass


def _load(args) -> "object":
    if args.config is None:
        cfg = validate_config({"schema_version": 1})
    else:
        cfg = load_config(args.config)
    return cfg.with_overrides(seed=args.seed, eval_episodes=getattr(args, "episodes_eval", None))


def cmd_fit(args) -> int:
    panel = read_panel_csv(args.panel)
    if not args.no_normalize:
        panel = normalize_efforts(panel)
    coeffs = fit_logistic(panel, include_neighbors=args.neighbors, per_target_intercepts=args.per_target)
    out = Path(args.out) if args.out else Path(args.panel).with_suffix(".coefficients.json")
    write_coefficients(coeffs, out)
    line = f"intercept {coeffs.mean_attractiveness:.6g}  gamma {coeffs.gamma:.6g}  beta {coeffs.beta:.6g}"
    if coeffs.eta is not None:
        line += f"  eta {coeffs.eta:.6g}"
    print(f"{line}  (log-likelihood {coeffs.log_likelihood:.6g}, {coeffs.n_iter} iterations) -> {out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.coefficients:
        try:
            coeffs = coefficients_from_dict(json.loads(Path(args.coefficients).read_text(encoding="utf-8")))
        except (OSError, ValueError, KeyError) as exc:
            raise PanelFormatError(f"{args.coefficients}: cannot read coefficients ({exc})") from exc
    else:
        coeffs = DeterrenceCoefficients(args.intercept, args.gamma, args.beta, args.eta)
    seed = 0 if args.seed is None else args.seed
    panel = synth_panel(coeffs, args.targets, args.periods, rng=derive_rng(seed, "synth"))
    if args.out is None:
        raise UsageError("synth needs --out")
    write_panel_csv(panel, args.out)
    print(f"{len(panel)} rows, {int(panel.observed.sum())} positive -> {args.out}")
    return EXIT_OK


def _require_out(args) -> Path:
    if args.out is None:
        raise UsageError(f"{args.command} needs --out")
    return Path(args.out)


def cmd_run(args) -> int:
    from .runner import run_setting, write_manifest

    cfg = _load(args)
    out = _require_out(args)
    if cfg.grid is not None and cfg.grid.axes:
        raise UsageError("config has a grid section; use the grid subcommand")
    write_manifest(out, "run", cfg, args.config)
    failures = run_setting(cfg, out, threads=args.threads)
    print(f"results -> {out / 'results.csv'}")
    return _report_failures(failures)


def cmd_grid(args) -> int:
    from .runner import run_grid, write_manifest

    cfg = _load(args)
    out = _require_out(args)
    write_manifest(out, "grid", cfg, args.config)
    failures = run_grid(cfg, out, threads=args.threads)
    print(f"results -> {out / 'results.csv'}")
    return _report_failures(failures)


def _report_failures(failures: list[str]) -> int:
    for f in failures:
        print(f"FAILED {f}", file=sys.stderr)
    return EXIT_NUMERIC if failures else EXIT_OK


def cmd_eval(args) -> int:
    from .baselines_eval import write_results_csv
    from .runner import evaluate_run

    rundir = Path(args.rundir)
    cfg_path = rundir / "config.yaml"
    if not cfg_path.exists():
        raise PanelFormatError(f"{rundir}: not a run directory (no config.yaml)")
    cfg = load_config(cfg_path)
    n = args.episodes_eval or cfg.mirror.eval_episodes
    rows = evaluate_run(cfg, rundir, n)
    if not rows:
        raise PanelFormatError(f"{rundir}: no completed trials to evaluate")
    out = Path(args.out) if args.out else rundir / "eval.csv"
    write_results_csv(out, rows)
    print(f"{len(rows)} rows -> {out}")
    return EXIT_OK


def cmd_summary(args) -> int:
    from .baselines_eval import format_summary, read_results_csv, summarize

    try:
        rows = read_results_csv(args.results)
    except OSError as exc:
        raise PanelFormatError(f"{args.results}: {exc.strerror}") from exc
    if not rows:
        raise PanelFormatError(f"{args.results}: no result rows")
    print(format_summary(summarize(rows)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON run configuration")
    common.add_argument("--seed", type=int, help="root seed (overrides experiment.seed)")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--threads", type=int, default=1, help="worker processes (results do not depend on it)")
    common.add_argument("--episodes-eval", type=int, dest="episodes_eval", help="evaluation episodes per table cell")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="patrolplan", description="Minimax-regret patrol planning.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", parents=[common], help="fit the deterrence regression to a panel CSV")
    p.add_argument("panel")
    p.add_argument("--neighbors", action="store_true", help="include the neighbour-effort term")
    p.add_argument("--per-target", action="store_true", help="per-target intercepts instead of a shared one")
    p.add_argument("--no-normalize", action="store_true", help="panel efforts are already standardized")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("synth", parents=[common], help="simulate a panel CSV from known coefficients")
    p.add_argument("--coefficients", help="coefficients JSON (as written by fit)")
    p.add_argument("--intercept", type=float, default=-9.285)
    p.add_argument("--gamma", type=float, default=1.074)
    p.add_argument("--beta", type=float, default=-0.165)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--targets", type=int, default=100)
    p.add_argument("--periods", type=int, default=500)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", parents=[common], help="run every trial of one setting")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("grid", parents=[common], help="run all settings of a grid (resumable)")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("eval", parents=[common], help="re-score the saved strategies of a run directory")
    p.add_argument("rundir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("summary", parents=[common], help="rank methods per setting from a results CSV")
    p.add_argument("results")
    p.set_defaults(func=cmd_summary)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    if args.episodes_eval is not None and args.episodes_eval < 2:
        print("error: --episodes-eval must be >= 2", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PanelFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (SeparationError, SingularDesignError, NashSolverError, TrainingDivergedError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # pragma: no cover - last resort
        log.exception("unexpected failure")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
