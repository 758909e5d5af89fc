"""Baseline defenders, the shared max-regret evaluation, and experiment trials.

Max regret of a method is ``max_theta [max_pi' r(pi', theta) - r(method, theta)]``
over one augmented table: every policy any method produced (the double-oracle
set, every baseline and every perturbation-trained variant) against the final
parameter set.  All methods are scored on the same table with the same
episode streams, so their numbers are directly comparable.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .agent_oracle import DDPG, TrainConfig, run_training_episode, train_agent
from .mirror_loop import Evaluator, MirrorConfig, StrategySets, perturb, run_mirror
from .nature_oracle import NatureConfig, NatureTrainer, wake_sleep_mode
from .park_env import Mixture, ParkInstance, UncertaintySet, initial_wildlife, random_uncertainty
from .policies import NetPolicy, Policy, RandomPolicy, ZeroPolicy
from .seeding import derive_rng, derive_seed

log = logging.getLogger(__name__)

METHODS = ("mirror", "middle", "random", "rarl_maximin", "rarl_regret")
RESULT_COLUMNS = ("method", "setting", "trial", "max_regret", "stderr", "runtime_s")


# ---------------------------------------------------------------------------
# baselines


def middle_baseline(park: ParkInstance, uncertainty: UncertaintySet, config: TrainConfig, theta=None) -> Policy:
    """Best response to the box midpoint (or to ``theta`` for a perturbed variant)."""
    return train_agent(park, uncertainty.midpoint if theta is None else theta, config)


def random_baseline(park: ParkInstance, seed: int) -> Policy:
    return RandomPolicy(park.n_targets, park.budget, seed)


def _rarl(park, uncertainty, config: TrainConfig, nature: NatureConfig, kappa: int, regret: bool, theta0=None):
    """Protagonist DDPG against an adversary moving ``theta`` every ``kappa`` episodes."""
    protagonist = DDPG(2 * park.n_targets + 1, park.n_targets, park.budget, config, derive_rng(config.seed, "rarl-init"))
    live = NetPolicy.for_park(protagonist.actor, park)
    rng = derive_rng(config.seed, "rarl-train")
    adversary = NatureTrainer(
        park, live, uncertainty, replace(nature, train=replace(nature.train, seed=derive_seed(config.seed, "rarl-adv"))),
        theta0=uncertainty.midpoint if theta0 is None else theta0, with_alt=regret, n_starts=1,
    )
    fixed_point = bool(np.all(uncertainty.width == 0))
    for j in range(1, config.episodes + 1):
        theta = adversary.theta
        if uncertainty.is_discrete:
            theta = uncertainty.points[int(np.argmin(np.abs(uncertainty.points - theta).sum(axis=1)))]
        run_training_episode(park, protagonist, theta, live.features, config.noise_scale(j - 1, park.budget), rng)
        if fixed_point:
            continue
        if regret:
            mode = wake_sleep_mode(j, kappa)
            adversary.policy_episode(j - 1, learn=mode != "theta_only", theta=theta)
            if mode != "policy_only":
                adversary.theta_step()
        elif j % kappa == 0:
            adversary.theta_step()
    return NetPolicy.for_park(protagonist.actor.copy(), park)


def rarl_maximin(park, uncertainty, config: TrainConfig, nature: NatureConfig | None = None, kappa: int = 10, theta0=None):
    """Adversary lowers the protagonist's return; returns the protagonist."""
    return _rarl(park, uncertainty, config, nature or NatureConfig(), kappa, regret=False, theta0=theta0)


def rarl_regret(park, uncertainty, config: TrainConfig, nature: NatureConfig | None = None, kappa: int = 10, theta0=None):
    """Adversary raises the protagonist's regret against its own alternative policy."""
    return _rarl(park, uncertainty, config, nature or NatureConfig(), kappa, regret=True, theta0=theta0)


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class MethodScore:
    max_regret: float
    stderr: float
    variant: int
    worst_theta: int


def _as_mixture(item) -> Mixture:
    return item if isinstance(item, Mixture) else Mixture([item])


def evaluate_max_regret(evaluator: Evaluator, methods: dict, sets: StrategySets) -> dict[str, MethodScore]:
    """Max regret per method family over the shared table ``sets.policies x sets.thetas``.

    ``methods`` maps a family name to a list of variants (policies or policy
    mixtures); the best variant is reported.  The standard error is that of
    the paired per-episode regret at the worst ``theta``.
    """
    if not sets.policies or not sets.thetas:
        raise ValueError("strategy sets must be nonempty")
    known = {p.policy_id for p in sets.policies}
    for name, variants in methods.items():
        for v in variants:
            for k in _as_mixture(v).support():
                pid = _as_mixture(v).items[k].policy_id
                if pid not in known:
                    raise ValueError(f"method {name!r}: policy {pid} is missing from the shared table")
    best_rows = []
    for th in sets.thetas:
        means = [evaluator.mean(p, th) for p in sets.policies]
        best_rows.append(evaluator.episode_returns(sets.policies[int(np.argmax(means))], th))
    scores = {}
    for name, variants in methods.items():
        best = None
        for vi, v in enumerate(variants):
            mix = _as_mixture(v)
            regrets = []
            for th, top in zip(sets.thetas, best_rows):
                regrets.append(top - evaluator.mixture_returns(mix, th))
            means = np.array([r.mean() for r in regrets])
            worst = int(np.argmax(means))
            d = regrets[worst]
            se = float(d.std(ddof=1) / math.sqrt(d.size))
            score = MethodScore(max(0.0, float(means[worst])), se, vi, worst)
            if best is None or score.max_regret < best.max_regret:
                best = score
        scores[name] = best
    return scores


# ---------------------------------------------------------------------------
# experiments


@dataclass(frozen=True)
class ExperimentConfig:
    horizon: int = 5
    n_targets: int = 25
    budget: float = 5.0
    interval: float = 3.0
    deterrence: float = 5.0
    wildlife: str = "random"
    layout: str = "square"
    alpha: float = 1.0
    psi: float = 1.05
    eta: float = 0.696
    discrete_points: int = 0
    trials: int = 5
    seed: int = 0
    kappa: int = 10
    audit_points: int = 20
    methods: tuple = METHODS
    mirror: MirrorConfig = field(default_factory=MirrorConfig)

    def __post_init__(self) -> None:
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}")
        if "mirror" not in self.methods:
            raise ValueError("the mirror method supplies the shared strategy sets and cannot be dropped")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")

    @property
    def beta(self) -> float:
        # deterrence strength k is read as beta = -k
        return -float(self.deterrence)

    @property
    def setting(self) -> str:
        label = f"H{self.horizon}-N{self.n_targets}-B{self.budget:g}-I{self.interval:g}-D{self.deterrence:g}-{self.wildlife}"
        return label + (f"-P{self.discrete_points}" if self.discrete_points else "")


def make_instance(exp: ExperimentConfig, trial: int) -> tuple[ParkInstance, UncertaintySet]:
    rng = derive_rng(exp.seed, "trial", trial, "instance")
    w0 = initial_wildlife(exp.n_targets, exp.wildlife, rng)
    park = ParkInstance(exp.n_targets, exp.horizon, exp.budget, w0, exp.alpha, exp.psi, exp.beta, exp.eta,
                        layout=exp.layout)
    box = random_uncertainty(exp.n_targets, exp.interval, rng)
    if exp.discrete_points:
        box = UncertaintySet.from_points(np.stack([box.sample(rng) for _ in range(exp.discrete_points)]))
    return park, box


@dataclass
class TrialOutcome:
    setting: str
    trial: int
    scores: dict[str, MethodScore]
    audit: dict[str, MethodScore]
    runtimes: dict[str, float]
    mirror_value: float
    n_epochs: int
    converged: bool
    sets: StrategySets = field(repr=False)
    families: dict = field(repr=False, default_factory=dict)
    mirror: object = field(repr=False, default=None)

    def result_rows(self, report_runtime: bool = False) -> list[list]:
        rows = []
        for method, s in self.scores.items():
            runtime = f"{self.runtimes[method]:.3f}" if report_runtime else ""
            rows.append([method, self.setting, self.trial, repr(s.max_regret), repr(s.stderr), runtime])
        return rows


def run_trial(exp: ExperimentConfig, trial: int) -> TrialOutcome:
    park, unc = make_instance(exp, trial)
    mcfg = replace(exp.mirror, seed=derive_seed(exp.seed, "trial", trial, "mirror"))
    root = derive_seed(exp.seed, "trial", trial, "baselines")
    O = mcfg.n_perturb
    prng = derive_rng(root, "perturb")
    starts = [unc.midpoint] + [perturb(unc.midpoint, unc, mcfg.perturb_scale, prng) for _ in range(O)]
    runtimes: dict[str, float] = {}
    families: dict[str, list] = {}

    def timed(name, build):
        t0 = time.perf_counter()
        families[name] = build()
        runtimes[name] = time.perf_counter() - t0

    timed("middle", lambda: [middle_baseline(park, unc, replace(mcfg.agent, seed=derive_seed(root, "middle", k)), th)
                             for k, th in enumerate(starts)])
    timed("random", lambda: [random_baseline(park, derive_seed(root, "random", k)) for k in range(O + 1)])
    for name, fn in (("rarl_maximin", rarl_maximin), ("rarl_regret", rarl_regret)):
        if name in exp.methods:
            timed(name, lambda fn=fn, name=name: [
                fn(park, unc, replace(mcfg.agent, seed=derive_seed(root, name, k)), mcfg.nature, exp.kappa, th)
                for k, th in enumerate(starts)])

    evaluator = Evaluator(park, mcfg.eval_episodes, derive_seed(exp.seed, "trial", trial, "evaluator"))
    initial = families["middle"] + [families["random"][0], ZeroPolicy(park.n_targets)]
    extra = [p for name in ("random", "rarl_maximin", "rarl_regret") if name in families for p in families[name]]
    t0 = time.perf_counter()
    result = run_mirror(park, unc, mcfg, initial_policies=initial, evaluator=evaluator)
    runtimes["mirror"] = time.perf_counter() - t0 + runtimes["middle"]
    families["mirror"] = [result.agent_mixture()]

    # augmented table: the double-oracle set plus every baseline variant
    sets = result.sets.copy()
    for pol in extra:
        sets.add_policy(pol)
    if unc.is_discrete:
        for pt in unc.points:
            sets.add_theta(pt)
    methods = {m: families[m] for m in METHODS if m in exp.methods}
    scores = evaluate_max_regret(evaluator, methods, sets)

    audit = {}
    if exp.audit_points and not unc.is_discrete:
        arng = derive_rng(exp.seed, "trial", trial, "audit")
        audit_sets = sets.copy()
        for _ in range(exp.audit_points):
            audit_sets.add_theta(unc.sample(arng))
        audit = evaluate_max_regret(evaluator, methods, audit_sets)
    rep = result.reports
    return TrialOutcome(exp.setting, trial, scores, audit, runtimes, -result.value, len(rep),
                        bool(rep and rep[-1].converged), sets, methods, result)


# ---------------------------------------------------------------------------
# CSV output


def write_results_csv(path: str | Path, rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RESULT_COLUMNS)
        writer.writerows(rows)


def read_results_csv(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != RESULT_COLUMNS:
            raise ValueError(f"{path}: expected header {','.join(RESULT_COLUMNS)}")
        return list(reader)


def audit_rows(outcome: TrialOutcome) -> list[list]:
    return [[m, outcome.setting, outcome.trial, repr(s.max_regret), repr(s.stderr)] for m, s in outcome.audit.items()]


def summarize(rows: list[dict]) -> list[dict]:
    """Mean max regret and its standard error across trials, ranked per setting."""
    groups: dict[tuple[str, str], list[float]] = {}
    for r in rows:
        groups.setdefault((r["setting"], r["method"]), []).append(float(r["max_regret"]))
    out = []
    for (setting, method), vals in groups.items():
        v = np.array(vals)
        se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else float("nan")
        out.append({"setting": setting, "method": method, "trials": int(v.size), "mean": float(v.mean()), "stderr": se})
    out.sort(key=lambda d: (d["setting"], d["mean"], d["method"]))
    rank = 0
    last = None
    for d in out:
        rank = rank + 1 if d["setting"] == last else 1
        last = d["setting"]
        d["rank"] = rank
    return out


def format_summary(summary: list[dict]) -> str:
    lines = [f"{'setting':<40} {'rank':>4} {'method':<14} {'trials':>6} {'mean':>12} {'stderr':>12}"]
    for d in summary:
        se = "n/a" if math.isnan(d["stderr"]) else f"{d['stderr']:.6f}"
        lines.append(f"{d['setting']:<40} {d['rank']:>4} {d['method']:<14} {d['trials']:>6} {d['mean']:>12.6f} {se:>12}")
    return "\n".join(lines)
