"""Double-oracle search for a minimax-regret patrol strategy.

Each epoch solves the restricted game whose payoff for policy ``pi`` against
parameters ``theta`` is ``r(pi, theta) - max_{pi'} r(pi', theta)`` (minus the
regret), asks the agent oracle for a best response to nature's mixture and
the nature oracle for a regret-maximizing ``theta`` against the agent's
mixture, and grows both strategy sets.  Perturbed copies of each new
``theta`` get their own best responses so that the column maxima, which
stand in for the unknown optimal return at each ``theta``, stay tight.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .agent_oracle import TrainConfig, TrainingDivergedError, train_agent
from .matrix_game import MixedStrategy, solve_zero_sum
from .nature_oracle import NatureConfig, WakeSleepSchedule, train_nature
from .park_env import Mixture, ParkInstance, UncertaintySet, as_theta, attack_uniforms, rollout
from .policies import Policy, RandomPolicy, ZeroPolicy
from .seeding import array_key, derive_rng, derive_seed

log = logging.getLogger(__name__)


def perturb(theta, uncertainty: UncertaintySet, scale: float, rng: np.random.Generator) -> np.ndarray:
    """Gaussian jitter with per-coordinate std ``scale * width``, clipped to the box."""
    theta = as_theta(theta)
    if scale < 0:
        raise ValueError(f"scale must be >= 0, got {scale}")
    noise = rng.standard_normal(theta.shape) * (scale * uncertainty.width)
    return uncertainty.clip(theta + noise)


def build_regret_payoffs(returns) -> np.ndarray:
    """``r(pi, theta) - max_pi' r(pi', theta)`` for every cell; each column max is exactly 0."""
    r = np.asarray(returns, dtype=np.float64)
    if r.ndim != 2 or r.size == 0:
        raise ValueError(f"return table must be a nonempty 2-D array, got shape {r.shape}")
    if not np.all(np.isfinite(r)):
        raise ValueError("return table is incomplete (non-finite entries)")
    return r - r.max(axis=0, keepdims=True)


# ---------------------------------------------------------------------------
# payoff cache


class Evaluator:
    """Cache of per-episode Monte Carlo returns ``r(pi, theta)``.

    Every cell for a given ``theta`` uses the same attack uniforms and policy
    stream, derived from the root seed and the ``theta`` bytes only, so
    estimates share common random numbers across policies and a cell's value
    does not depend on when (or in which order) it is computed.
    """

    def __init__(self, park: ParkInstance, n_episodes: int = 100, seed: int = 0):
        if n_episodes < 2:
            raise ValueError("n_episodes must be >= 2 to report standard errors")
        self.park = park
        self.n_episodes = int(n_episodes)
        self.seed = int(seed)
        self._cells: dict[tuple[str, str], np.ndarray] = {}
        self._uniforms: dict[str, np.ndarray] = {}

    def _stream(self, theta: np.ndarray) -> tuple[np.ndarray, int]:
        key = array_key(theta)
        if key not in self._uniforms:
            self._uniforms[key] = attack_uniforms(self.park, self.n_episodes, derive_rng(self.seed, "eval", key))
        return self._uniforms[key], derive_seed(self.seed, "eval-policy", key)

    def episode_returns(self, policy: Policy, theta) -> np.ndarray:
        theta = as_theta(theta)
        cell = (policy.policy_id, array_key(theta))
        if cell not in self._cells:
            uniforms, pseed = self._stream(theta)
            out = rollout(self.park, theta, policy, uniforms, np.random.default_rng(pseed))
            out.setflags(write=False)
            self._cells[cell] = out
        return self._cells[cell]

    def mixture_returns(self, mixture: Mixture, theta) -> np.ndarray:
        """Probability-weighted per-episode returns of a policy mixture."""
        out = np.zeros(self.n_episodes)
        for k in mixture.support():
            out = out + mixture.probs[k] * self.episode_returns(mixture.items[k], theta)
        return out

    def mean(self, policy: Policy, theta) -> float:
        return float(self.episode_returns(policy, theta).mean())

    def table(self, policies, thetas) -> np.ndarray:
        return np.array([[self.mean(p, th) for th in thetas] for p in policies])

    def __len__(self) -> int:
        return len(self._cells)


@dataclass
class StrategySets:
    """Ordered, duplicate-free policy and parameter sets."""

    policies: list = field(default_factory=list)
    thetas: list = field(default_factory=list)

    def add_policy(self, policy: Policy) -> bool:
        if any(p.policy_id == policy.policy_id for p in self.policies):
            return False
        self.policies.append(policy)
        return True

    def add_theta(self, theta) -> bool:
        theta = np.array(as_theta(theta), dtype=np.float64)
        if any(np.array_equal(theta, t) for t in self.thetas):
            return False
        theta.setflags(write=False)
        self.thetas.append(theta)
        return True

    def copy(self) -> "StrategySets":
        return StrategySets(list(self.policies), list(self.thetas))


@dataclass(frozen=True)
class EpochReport:
    epoch: int
    value: float
    agent_strategy: tuple
    nature_strategy: tuple
    nature_regret: float
    agent_gain: float
    nature_gain: float
    n_policies: int
    n_thetas: int
    seconds: float
    converged: bool

    @property
    def max_regret(self) -> float:
        return -self.value


EPOCH_COLUMNS = ("epoch", "value", "agent_delta", "nature_delta", "n_policies", "n_thetas", "seconds")


def write_epoch_log(path: str | Path, reports: list[EpochReport]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(EPOCH_COLUMNS)
        for r in reports:
            writer.writerow([r.epoch, repr(r.value), repr(r.agent_gain), repr(r.nature_gain),
                             r.n_policies, r.n_thetas, f"{r.seconds:.3f}"])


@dataclass(frozen=True)
class MirrorConfig:
    epsilon: float = 0.5
    n_perturb: int = 3
    perturb_scale: float = 0.1
    max_epochs: int = 10
    eval_episodes: int = 100
    agent: TrainConfig = field(default_factory=TrainConfig)
    nature: NatureConfig = field(default_factory=NatureConfig)
    schedule: WakeSleepSchedule = field(default_factory=WakeSleepSchedule)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.n_perturb < 0 or self.max_epochs < 1:
            raise ValueError("n_perturb must be >= 0 and max_epochs >= 1")
        if self.perturb_scale < 0:
            raise ValueError(f"perturb_scale must be >= 0, got {self.perturb_scale}")

    def agent_config(self, *keys) -> TrainConfig:
        return replace(self.agent, seed=derive_seed(self.seed, *keys))

    def nature_config(self, *keys) -> NatureConfig:
        return replace(self.nature, train=replace(self.nature.train, seed=derive_seed(self.seed, *keys)))


@dataclass
class MirrorResult:
    mixture: MixedStrategy
    reports: list[EpochReport]
    sets: StrategySets
    evaluator: Evaluator
    value: float

    def __iter__(self):
        # allows ``mixture, reports = run_mirror(...)``
        yield self.mixture
        yield self.reports

    def agent_mixture(self) -> Mixture:
        return Mixture(self.sets.policies, self.mixture.probabilities)


def trivial_policies(park: ParkInstance, seed: int) -> list[Policy]:
    return [RandomPolicy(park.n_targets, park.budget, derive_seed(seed, "random-baseline")), ZeroPolicy(park.n_targets)]


def _solve(evaluator: Evaluator, sets: StrategySets):
    table = evaluator.table(sets.policies, sets.thetas)
    payoffs = build_regret_payoffs(table)
    x, y, value = solve_zero_sum(payoffs)
    return table, x, y, value


def _restricted(items, strategy: MixedStrategy) -> Mixture:
    support = strategy.support()
    probs = strategy.probabilities[support]
    return Mixture([items[i] for i in support], probs / probs.sum())


def run_mirror(
    park: ParkInstance,
    uncertainty: UncertaintySet,
    config: MirrorConfig | None = None,
    initial_policies: list[Policy] | None = None,
    extra_policies: list[Policy] | None = None,
    evaluator: Evaluator | None = None,
) -> MirrorResult:
    """Run the epoch loop and return the final agent mixture with per-epoch reports.

    ``initial_policies`` seed the policy set (defaults to a midpoint-trained
    policy, the random policy and the zero policy).  ``extra_policies`` are
    appended as well; they are never counted as the loop's own additions.
    """
    config = config or MirrorConfig()
    evaluator = evaluator or Evaluator(park, config.eval_episodes, derive_seed(config.seed, "evaluator"))
    sets = StrategySets()
    if initial_policies is None:
        initial_policies = [train_agent(park, uncertainty.midpoint, config.agent_config("middle"))]
        initial_policies += trivial_policies(park, config.seed)
    for pol in list(initial_policies) + list(extra_policies or []):
        sets.add_policy(pol)
    sets.add_theta(uncertainty.sample(derive_rng(config.seed, "theta0")))

    reports: list[EpochReport] = []
    converged = False
    for epoch in range(1, config.max_epochs + 1):
        start = time.perf_counter()
        _, x, y, value = _solve(evaluator, sets)
        nature_mix = _restricted(sets.thetas, y)
        agent_mix = _restricted(sets.policies, x)

        new_policy = new_theta = alt_policy = None
        try:
            new_policy = train_agent(park, nature_mix, config.agent_config("epoch", epoch, "agent"))
        except TrainingDivergedError as exc:
            log.warning("epoch %d: agent oracle failed (%s); skipping its addition", epoch, exc)
        try:
            new_theta, alt_policy = train_nature(
                park, agent_mix, uncertainty, config.schedule, config.nature_config("epoch", epoch, "nature")
            )
        except TrainingDivergedError as exc:
            log.warning("epoch %d: nature oracle failed (%s); skipping its addition", epoch, exc)

        # agent: does the best response beat the equilibrium mixture against nature's mixture?
        mix_value = sum(p * float(evaluator.mixture_returns(agent_mix, th).mean()) for th, p in zip(nature_mix.items, nature_mix.probs))
        agent_gain = 0.0
        if new_policy is not None:
            br_value = sum(p * evaluator.mean(new_policy, th) for th, p in zip(nature_mix.items, nature_mix.probs))
            agent_gain = br_value - mix_value
        # nature: does the new theta raise the mixture's regret above the equilibrium value?
        nature_regret = -value
        nature_gain = 0.0
        if new_theta is not None:
            column = [evaluator.mean(p, new_theta) for p in sets.policies + [alt_policy]]
            nature_regret = max(column) - float(evaluator.mixture_returns(agent_mix, new_theta).mean())
            nature_gain = nature_regret - (-value)
        converged = agent_gain <= config.epsilon and nature_gain <= config.epsilon

        if new_policy is not None:
            sets.add_policy(new_policy)
        if new_theta is not None:
            sets.add_theta(new_theta)
            sets.add_policy(alt_policy)
            if not converged:
                _add_perturbations(park, uncertainty, config, epoch, new_theta, sets)

        reports.append(
            EpochReport(
                epoch=epoch,
                value=float(value),
                agent_strategy=tuple(x.pairs()),
                nature_strategy=tuple(y.pairs()),
                nature_regret=float(nature_regret),
                agent_gain=float(agent_gain),
                nature_gain=float(nature_gain),
                n_policies=len(sets.policies),
                n_thetas=len(sets.thetas),
                seconds=time.perf_counter() - start,
                converged=converged,
            )
        )
        log.info("epoch %d: max regret %.4f, deltas (%.4f, %.4f), |Pi|=%d |Z|=%d",
                 epoch, -value, agent_gain, nature_gain, len(sets.policies), len(sets.thetas))
        if converged:
            break

    _, x, _, value = _solve(evaluator, sets)
    return MirrorResult(x, reports, sets, evaluator, float(value))


def _add_perturbations(park, uncertainty, config, epoch, theta, sets: StrategySets) -> None:
    rng = derive_rng(config.seed, "epoch", epoch, "perturb")
    for o in range(config.n_perturb):
        theta_o = perturb(theta, uncertainty, config.perturb_scale, rng)
        # a finite nature set only admits its own points; the response still helps the column maxima
        if not uncertainty.is_discrete:
            sets.add_theta(theta_o)
        try:
            sets.add_policy(train_agent(park, theta_o, config.agent_config("epoch", epoch, "perturb", o)))
        except TrainingDivergedError as exc:
            log.warning("epoch %d: perturbation response %d failed (%s)", epoch, o, exc)
