"""Run directories: executing trials, writing their artifacts, resuming grids.

Layout of a run (or of one grid cell)::

    manifest.json            subcommand, seed, resolved config, package version
    config.yaml              the resolved config (replayable with ``--config``)
    results.csv              method,setting,trial,max_regret,stderr,runtime_s
    audit.csv                same scores with the extra random-theta audit columns
    timing.csv               wall-clock seconds per method (not deterministic)
    trial_000/
        park.json            the instance and its uncertainty set
        epochs.csv           per-epoch log of the double-oracle loop
        thetas.csv           final parameter set, one row per point
        policies/NNN.npz     every policy of the shared table
        methods.json         method family -> variants -> [(policy index, weight)]
        results.csv          this trial's rows
        DONE                 marker written last; completed trials are skipped
"""

from __future__ import annotations

import csv
import json
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .baselines_eval import (

    MethodScore,
    TrialOutcome,
    audit_rows,
    evaluate_max_regret,
    make_instance,
    run_trial,
    write_results_csv,
)
from .config import RunConfig, dump_config, validate_config
from .mirror_loop import Evaluator, StrategySets, write_epoch_log
from .park_env import Mixture, park_to_dict, uncertainty_to_dict
from .policies import load_policy, save_policy
from .seeding import derive_seed

log = logging.getLogger(__name__)

DONE = "DONE"


def write_manifest(outdir: Path, subcommand: str, cfg: RunConfig, config_path: str | None) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "subcommand": subcommand,
        "config_path": config_path,
        "seed": cfg.experiment.seed,
        "out": str(outdir),
        "version": __version__,
        "config": cfg.model_dump(),
    }
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (outdir / "config.yaml").write_text(dump_config(cfg), encoding="utf-8")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _read_rows(path: Path) -> list[list[str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[1:]


def save_trial(trial_dir: Path, cfg: RunConfig, outcome: TrialOutcome) -> None:
    trial_dir.mkdir(parents=True, exist_ok=True)
    exp = cfg.to_experiment()
    park, unc = make_instance(exp, outcome.trial)
    (trial_dir / "park.json").write_text(
        json.dumps({"park": park_to_dict(park), "uncertainty": uncertainty_to_dict(unc)}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    write_epoch_log(trial_dir / "epochs.csv", outcome.mirror.reports)
    sets = outcome.sets
    _write_csv(trial_dir / "thetas.csv", ["index"] + [f"t{i}" for i in range(park.n_targets)],
               [[k] + [repr(float(v)) for v in th] for k, th in enumerate(sets.thetas)])
    pol_dir = trial_dir / "policies"
    pol_dir.mkdir(exist_ok=True)
    index = {p.policy_id: k for k, p in enumerate(sets.policies)}
    for k, p in enumerate(sets.policies):
        save_policy(p, pol_dir / f"{k:03d}.npz")
    methods = {}
    for name, variants in outcome.families.items():
        methods[name] = []
        for v in variants:
            mix = v if isinstance(v, Mixture) else Mixture([v])
            methods[name].append([[index[mix.items[i].policy_id], float(mix.probs[i])] for i in mix.support()])
    (trial_dir / "methods.json").write_text(json.dumps(methods, indent=2) + "\n", encoding="utf-8")
    _write_csv(trial_dir / "mixture.csv", ["policy_index", "policy_id", "probability"],
               [[index[pid], pid, repr(w)] for pid, w in _mixture_pairs(outcome)])
    rows = outcome.result_rows(cfg.output.report_runtime)
    write_results_csv(trial_dir / "results.csv", rows)
    _write_csv(trial_dir / "audit.csv", ("method", "setting", "trial", "max_regret", "stderr"), audit_rows(outcome))
    _write_csv(trial_dir / "timing.csv", ("method", "setting", "trial", "runtime_s"),
               [[m, outcome.setting, outcome.trial, f"{t:.3f}"] for m, t in outcome.runtimes.items()])
    (trial_dir / DONE).write_text("ok\n", encoding="utf-8")


def _mixture_pairs(outcome: TrialOutcome):
    mix = outcome.families["mirror"][0]
    return [(mix.items[i].policy_id, float(mix.probs[i])) for i in mix.support()]


def _trial_job(args) -> tuple[int, str | None]:
    cfg_data, trial, trial_dir = args
    cfg = validate_config(cfg_data)
    try:
        outcome = run_trial(cfg.to_experiment(), trial)
        save_trial(Path(trial_dir), cfg, outcome)
        return trial, None
    except Exception:  # recorded per cell; the grid carries on
        return trial, traceback.format_exc()


def run_setting(cfg: RunConfig, outdir: Path, threads: int = 1, resume: bool = True) -> list[str]:
    """Run (or resume) every trial of one setting; returns failure messages."""
    outdir.mkdir(parents=True, exist_ok=True)
    jobs = []
    for trial in range(cfg.experiment.trials):
        trial_dir = outdir / f"trial_{trial:03d}"
        if resume and (trial_dir / DONE).exists():
            log.info("%s: already complete, skipping", trial_dir)
            continue
        jobs.append((cfg.model_dump(), trial, str(trial_dir)))
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            finished = list(pool.map(_trial_job, jobs))
    else:
        finished = [_trial_job(j) for j in jobs]
    failures = []
    for trial, err in finished:
        if err is not None:
            log.error("trial %d failed:\n%s", trial, err)
            (outdir / f"trial_{trial:03d}").mkdir(parents=True, exist_ok=True)
            (outdir / f"trial_{trial:03d}" / "ERROR").write_text(err, encoding="utf-8")
            failures.append(f"trial {trial}: {err.strip().splitlines()[-1]}")
    collect_setting(cfg, outdir)
    return failures


def collect_setting(cfg: RunConfig, outdir: Path) -> list[list[str]]:
    rows, audit, timing = [], [], []
    for trial in range(cfg.experiment.trials):
        trial_dir = outdir / f"trial_{trial:03d}"
        if not (trial_dir / DONE).exists():
            continue
        rows += _read_rows(trial_dir / "results.csv")
        audit += _read_rows(trial_dir / "audit.csv")
        timing += _read_rows(trial_dir / "timing.csv")
    write_results_csv(outdir / "results.csv", rows)
    _write_csv(outdir / "audit.csv", ("method", "setting", "trial", "max_regret", "stderr"), audit)
    _write_csv(outdir / "timing.csv", ("method", "setting", "trial", "runtime_s"), timing)
    return rows


def run_grid(cfg: RunConfig, outdir: Path, threads: int = 1) -> list[str]:
    """All cells of the grid, one subdirectory each, then one combined results CSV."""
    cells = cfg.grid_cells()
    failures = []
    rows, timing = [], []
    for cell in cells:
        label = cell.to_experiment().setting
        cell_dir = outdir / "cells" / label
        if (cell_dir / DONE).exists():
            log.info("cell %s already complete, skipping", label)
        else:
            write_manifest(cell_dir, "grid-cell", cell, None)
            cell_fail = run_setting(cell, cell_dir, threads)
            failures += [f"{label} {msg}" for msg in cell_fail]
            if not cell_fail:
                (cell_dir / DONE).write_text("ok\n", encoding="utf-8")
        if (cell_dir / "results.csv").exists():
            rows += _read_rows(cell_dir / "results.csv")
            timing += _read_rows(cell_dir / "timing.csv")
    write_results_csv(outdir / "results.csv", rows)
    _write_csv(outdir / "timing.csv", ("method", "setting", "trial", "runtime_s"), timing)
    _write_csv(outdir / "failures.csv", ("failure",), [[f] for f in failures])
    return failures


# ---------------------------------------------------------------------------
# re-evaluation of saved runs


def load_trial(trial_dir: Path):
    """Policies, parameter points and method families saved by :func:`save_trial`."""
    pol_files = sorted((trial_dir / "policies").glob("*.npz"))
    policies = [load_policy(f) for f in pol_files]
    thetas = [np.array([float(v) for v in row[1:]]) for row in _read_rows(trial_dir / "thetas.csv")]
    methods_raw = json.loads((trial_dir / "methods.json").read_text(encoding="utf-8"))
    families = {}
    for name, variants in methods_raw.items():
        families[name] = [Mixture([policies[i] for i, _ in v], [w for _, w in v]) for v in variants]
    sets = StrategySets()
    for p in policies:
        sets.add_policy(p)
    for th in thetas:
        sets.add_theta(th)
    return sets, families


def evaluate_run(cfg: RunConfig, rundir: Path, n_episodes: int) -> list[list]:
    """Re-score every saved trial of a run on fresh evaluation episodes."""
    exp = cfg.to_experiment()
    rows = []
    for trial in range(exp.trials):
        trial_dir = rundir / f"trial_{trial:03d}"
        if not (trial_dir / DONE).exists():
            continue
        park, _ = make_instance(exp, trial)
        sets, families = load_trial(trial_dir)
        evaluator = Evaluator(park, n_episodes, derive_seed(exp.seed, "trial", trial, "re-evaluator"))
        scores: dict[str, MethodScore] = evaluate_max_regret(evaluator, families, sets)
        for m, s in scores.items():
            rows.append([m, exp.setting, trial, repr(s.max_regret), repr(s.stderr), ""])
    return rows

