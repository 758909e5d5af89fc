"""Regret-maximizing nature oracle.

Nature searches the uncertainty box for an attractiveness vector ``theta``
at which the defender's current mixed strategy does worst relative to an
alternative policy ``pi_hat`` trained for that ``theta``.  ``pi_hat`` reads
``theta`` as an extra input, so one network can follow ``theta`` as it moves.
The two are trained by a wake-sleep alternation:

* ``policy_only``: ``theta`` frozen, ``pi_hat`` takes DDPG updates;
* ``theta_only``: ``pi_hat`` frozen, ``theta`` takes a gradient step on regret;
* ``both``: both move.

``theta`` is stored as unconstrained logits mapped through a sigmoid onto
``[lower, upper]``, so it can never leave the box.  Its gradient flows through
the stochastic attack draws by the straight-through expectation relaxation
(see :func:`patrolplan.park_env.rollout_theta_grad`).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .agent_oracle import DDPG, TrainConfig, TrainingDivergedError, run_training_episode
from .nn import MLP, Adam
from .park_env import Mixture, ParkInstance, UncertaintySet, as_theta, attack_uniforms, rollout, rollout_theta_grad
from .policies import NetPolicy, Policy, effort_from_preaction, effort_vjp
from .seeding import derive_rng

log = logging.getLogger(__name__)

MODES = ("both", "theta_only", "policy_only")


def wake_sleep_mode(episode: int, kappa: int) -> str:
    """Which side learns in ``episode``: every 2k-th both, every k-th ``theta``, else ``pi_hat``."""
    if kappa < 1:
        raise ValueError(f"kappa must be >= 1, got {kappa}")
    if episode % (2 * kappa) == 0:
        return "both"
    if episode % kappa == 0:
        return "theta_only"
    return "policy_only"


@dataclass(frozen=True)
class WakeSleepSchedule:
    kappa: int = 10
    episodes: int = 2000

    def __post_init__(self) -> None:
        if self.kappa < 1 or self.episodes < 1:
            raise ValueError("kappa and episodes must be positive")

    def modes(self) -> list[str]:
        return [wake_sleep_mode(j, self.kappa) for j in range(1, self.episodes + 1)]


@dataclass(frozen=True)
class NatureConfig:
    train: TrainConfig = field(default_factory=lambda: TrainConfig(updates_per_step=2))
    theta_lr: float = 0.05
    theta_batch: int = 32
    relaxation: str = "straight_through"
    # share of pi_hat training episodes played at a uniform draw from the box
    # rather than the current theta, so pi_hat stays sensible away from theta
    theta_explore: float = 0.5
    n_starts: int = 4

    def __post_init__(self) -> None:
        if not self.theta_lr > 0 or self.theta_batch < 1:
            raise ValueError("theta_lr and theta_batch must be positive")
        if self.n_starts < 1:
            raise ValueError(f"n_starts must be >= 1, got {self.n_starts}")
        if not 0.0 <= self.theta_explore <= 1.0:
            raise ValueError(f"theta_explore must lie in [0, 1], got {self.theta_explore}")
        if self.relaxation not in ("straight_through", "expected"):
            raise ValueError(f"unknown relaxation {self.relaxation!r}")


# ---------------------------------------------------------------------------
# theta parameterization


class BoxParam:
    """``theta = lower + width * sigmoid(u)`` with Adam on ``u``."""

    def __init__(self, uncertainty: UncertaintySet, theta0, lr: float):
        self.lower = uncertainty.lower
        self.width = uncertainty.width
        frac = np.where(self.width > 0, (as_theta(theta0) - self.lower) / np.where(self.width > 0, self.width, 1.0), 0.5)
        frac = np.clip(frac, 1e-6, 1 - 1e-6)
        self.u = np.log(frac) - np.log1p(-frac)
        self.opt = Adam([self.u], lr)

    @property
    def theta(self) -> np.ndarray:
        s = 0.5 * (1.0 + np.tanh(0.5 * self.u))
        return self.lower + self.width * s

    def ascend(self, d_theta: np.ndarray) -> None:
        s = 0.5 * (1.0 + np.tanh(0.5 * self.u))
        self.opt.step([d_theta * self.width * s * (1.0 - s)], ascend=True)


class LiveThetaPolicy(Policy):
    """A parameter-conditioned actor evaluated at a ``theta`` the caller controls.

    ``act_vjp`` also returns the gradient with respect to ``theta`` through the
    network's feature input, which :func:`rollout_theta_grad` adds to the
    dynamics gradient.
    """

    kind = "live"

    def __init__(self, actor: MLP, park: ParkInstance, uncertainty: UncertaintySet, theta):
        self.actor = actor
        self.park = park
        self.uncertainty = uncertainty
        self.n_targets = park.n_targets
        self.budget = park.budget
        half = 0.5 * uncertainty.width
        self._inv_half = np.where(half > 0, 1.0 / np.where(half > 0, half, 1.0), 0.0)
        self.set_theta(theta)

    def set_theta(self, theta) -> None:
        self.theta = as_theta(theta).copy()
        self.theta_features = self.uncertainty.theta_features(self.theta)

    def features(self, past, wildlife, t) -> np.ndarray:
        n_ep = np.shape(past)[0]
        return np.concatenate(
            [
                np.broadcast_to(self.theta_features, (n_ep, self.n_targets)),
                past,
                wildlife / self.park.wildlife_scale,
                np.full((n_ep, 1), t / self.park.horizon),
            ],
            axis=1,
        )

    def act_batch(self, past, wildlife, t, ctx=None):
        return effort_from_preaction(self.actor.forward(self.features(past, wildlife, t)), self.budget)

    def act_vjp(self, past, wildlife, t, ctx=None):
        pre, cache = self.actor.forward_cached(self.features(past, wildlife, t))
        action = effort_from_preaction(pre, self.budget)
        n = self.n_targets
        scale = self.park.wildlife_scale

        def vjp(d_action):
            _, dx = self.actor.backward(cache, effort_vjp(pre, self.budget, d_action), need_params=False)
            d_theta = dx[:, :n].sum(axis=0) * self._inv_half
            return dx[:, n:2 * n], dx[:, 2 * n:3 * n] / scale, d_theta

        return action, vjp

    def frozen(self) -> NetPolicy:
        """Snapshot with the current ``theta`` baked into the input."""
        return NetPolicy.for_park(self.actor.copy(), self.park, self.theta_features.copy(), self.theta.copy())

    @property
    def policy_id(self) -> str:
        return self.frozen().policy_id


# ---------------------------------------------------------------------------
# regret estimates and gradients


def regret_estimate(
    park: ParkInstance,
    theta,
    alt_policy,
    agent_mixture,
    n_episodes: int = 100,
    rng: np.random.Generator | None = None,
) -> float:
    """``r(alt, theta) - E_{pi~mixture} r(pi, theta)`` with common random numbers.

    Every policy (the alternative and each support policy of the mixture)
    faces the same attack uniforms; the mixture term is its exact
    probability-weighted average.
    """
    value, _ = regret_estimate_with_error(park, theta, alt_policy, agent_mixture, n_episodes, rng)
    return value


def regret_estimate_with_error(park, theta, alt_policy, agent_mixture, n_episodes=100, rng=None):
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    mix = agent_mixture if isinstance(agent_mixture, Mixture) else Mixture([agent_mixture])
    theta = as_theta(theta)
    uniforms = attack_uniforms(park, n_episodes, rng)
    policy_seed = int(rng.integers(2**63))
    diff = rollout(park, theta, alt_policy, uniforms, np.random.default_rng([policy_seed, 0]))
    for k in mix.support():
        diff = diff - mix.probs[k] * rollout(park, theta, mix.items[k], uniforms, np.random.default_rng([policy_seed, 0]))
    stderr = float(diff.std(ddof=1) / np.sqrt(n_episodes)) if n_episodes > 1 else 0.0
    return float(diff.mean()), stderr


def objective_theta_grad(
    park: ParkInstance,
    theta: np.ndarray,
    alt_policy,
    agent_mixture: Mixture,
    uniforms: np.ndarray,
    relaxation: str = "straight_through",
    policy_rng_seed: int = 0,
) -> tuple[float, np.ndarray]:
    """Mean of ``r(alt, theta) - E r(pi, theta)`` and its ``theta`` gradient.

    With ``alt_policy=None`` the first term is dropped, which turns the
    objective into the maximin adversary's ``-E r(pi, theta)``.
    """
    value = 0.0
    grad = np.zeros(park.n_targets)
    if alt_policy is not None:
        ret, g = rollout_theta_grad(park, theta, alt_policy, uniforms, np.random.default_rng(policy_rng_seed), relaxation)
        value += float(ret.mean())
        grad += g
    for k in agent_mixture.support():
        ret, g = rollout_theta_grad(
            park, theta, agent_mixture.items[k], uniforms, np.random.default_rng(policy_rng_seed), relaxation
        )
        value -= agent_mixture.probs[k] * float(ret.mean())
        grad -= agent_mixture.probs[k] * g
    return value, grad


# ---------------------------------------------------------------------------
# the trainer


class NatureTrainer:
    """State of one nature-oracle run; the RARL baselines drive it step by step.

    ``n_starts`` independent ``theta`` particles share one conditioned
    ``pi_hat``; each follows its own gradient path which makes the search less
    dependent on where it starts.
    """

    def __init__(
        self,
        park: ParkInstance,
        agent_mixture,
        uncertainty: UncertaintySet,
        config: NatureConfig,
        theta0=None,
        with_alt: bool = True,
        n_starts: int | None = None,
    ):
        if uncertainty.n != park.n_targets:
            raise ValueError(f"uncertainty set has {uncertainty.n} coordinates, park has {park.n_targets} targets")
        self.park = park
        self.uncertainty = uncertainty
        self.config = config
        self.agent_mixture = agent_mixture if isinstance(agent_mixture, Mixture) else Mixture([agent_mixture])
        cfg = config.train
        self.rng = derive_rng(cfg.seed, "nature-train")
        init_rng = derive_rng(cfg.seed, "nature-theta0")
        n_starts = config.n_starts if n_starts is None else int(n_starts)
        starts = [] if theta0 is None else [as_theta(theta0)]
        while len(starts) < n_starts:
            starts.append(uncertainty.sample(init_rng))
        self.params = [BoxParam(uncertainty, th, config.theta_lr) for th in starts]
        self.with_alt = with_alt
        self.learner = None
        self.alt = None
        if with_alt:
            obs_dim = 3 * park.n_targets + 1
            self.learner = DDPG(obs_dim, park.n_targets, park.budget, cfg, derive_rng(cfg.seed, "nature-init"))
            self.alt = LiveThetaPolicy(self.learner.actor, park, uncertainty, self.theta)
        self.theta_steps = 0

    @property
    def theta(self) -> np.ndarray:
        return self.params[0].theta

    @property
    def thetas(self) -> list[np.ndarray]:
        return [p.theta for p in self.params]

    def policy_episode(self, episode: int, learn: bool = True, theta=None) -> float:
        theta = self.theta if theta is None else as_theta(theta)
        self.alt.set_theta(theta)
        sigma = self.config.train.noise_scale(episode, self.park.budget)
        ret = run_training_episode(self.park, self.learner, theta, self.alt.features, sigma, self.rng, learn=learn)
        if learn and not self.learner.healthy():
            raise FloatingPointError("non-finite alternative-policy parameters")
        return ret

    def theta_step(self, particle: int = 0) -> float:
        """One gradient-ascent step on the objective; returns its batch estimate."""
        if np.all(self.uncertainty.width == 0):
            return float("nan")
        param = self.params[particle]
        theta = param.theta
        uniforms = attack_uniforms(self.park, self.config.theta_batch, self.rng)
        alt = None
        if self.with_alt:
            self.alt.set_theta(theta)
            alt = self.alt
        value, grad = objective_theta_grad(
            self.park, theta, alt, self.agent_mixture, uniforms, self.config.relaxation, int(self.rng.integers(2**63))
        )
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError("non-finite theta gradient")
        param.ascend(grad)
        self.theta_steps += 1
        return value


def _best_alternative(park, theta, candidates, agent_mixture, uniforms, seed):
    """Index and regret of the candidate with the highest CRN return at ``theta``."""
    base = sum(
        agent_mixture.probs[k] * float(rollout(park, theta, agent_mixture.items[k], uniforms, np.random.default_rng(seed)).mean())
        for k in agent_mixture.support()
    )
    values = [float(rollout(park, theta, c, uniforms, np.random.default_rng(seed)).mean()) for c in candidates]
    best = int(np.argmax(values))
    return best, values[best] - base


def train_nature(
    park: ParkInstance,
    agent_mixture,
    uncertainty: UncertaintySet,
    schedule: WakeSleepSchedule | None = None,
    config: NatureConfig | None = None,
    theta0=None,
) -> tuple[np.ndarray, Policy]:
    """Approximately regret-maximizing ``(theta, pi_hat)`` against ``agent_mixture``.

    On a box the wake-sleep schedule drives ``theta``; periodic greedy
    checkpoints of ``(theta, pi_hat)`` are scored by regret on fixed evaluation
    episodes and the best one is returned.  On a finite set of points one
    conditioned ``pi_hat`` is trained across all of them and the point of
    largest regret is returned.  Either way the returned alternative is the
    better of ``pi_hat`` and the support policies of the mixture, so the
    reported regret is never negative.
    """
    schedule = schedule or WakeSleepSchedule()
    config = config or NatureConfig()
    mixture = agent_mixture if isinstance(agent_mixture, Mixture) else Mixture([agent_mixture])
    cfg = config.train
    eval_rng = derive_rng(cfg.seed, "nature-eval")
    eval_u = attack_uniforms(park, cfg.eval_episodes, eval_rng)
    eval_seed = int(eval_rng.integers(2**63))
    support_policies = [mixture.items[k] for k in mixture.support()]

    if uncertainty.is_discrete:
        return _train_nature_discrete(park, mixture, uncertainty, schedule, config, eval_u, eval_seed, support_policies)

    trainer = NatureTrainer(park, mixture, uncertainty, config, theta0)
    fixed_point = bool(np.all(uncertainty.width == 0))
    n_starts = 1 if fixed_point else len(trainer.params)

    def checkpoint(best):
        for theta in trainer.thetas[:n_starts]:
            trainer.alt.set_theta(theta)
            alt = trainer.alt.frozen()
            _, regret = _best_alternative(park, theta, [alt], mixture, eval_u, eval_seed)
            if best is None or regret > best[2]:
                best = (theta.copy(), alt, regret)
        return best

    best = checkpoint(None)
    for j in range(1, schedule.episodes + 1):
        mode = "policy_only" if fixed_point else wake_sleep_mode(j, schedule.kappa)
        try:
            if not fixed_point and trainer.rng.random() < config.theta_explore:
                played = uncertainty.sample(trainer.rng)
            else:
                played = trainer.thetas[j % n_starts]
            trainer.policy_episode(j - 1, learn=mode != "theta_only", theta=played)
            if mode != "policy_only":
                for k in range(n_starts):
                    trainer.theta_step(k)
        except FloatingPointError as exc:
            raise TrainingDivergedError(f"nature oracle diverged at episode {j}: {exc}", best[1], {"episode": j}) from exc
        if j % cfg.eval_every == 0 or j == schedule.episodes:
            best = checkpoint(best)
    theta, alt, _ = best
    idx, regret = _best_alternative(park, theta, [alt] + support_policies, mixture, eval_u, eval_seed)
    log.debug("nature oracle: regret %.6g at theta %s (alternative %d)", regret, np.round(theta, 4), idx)
    return theta, ([alt] + support_policies)[idx]


def _train_nature_discrete(park, mixture, uncertainty, schedule, config, eval_u, eval_seed, support_policies):
    trainer = NatureTrainer(park, mixture, uncertainty, config, theta0=uncertainty.midpoint)
    points = uncertainty.points
    for j in range(1, schedule.episodes + 1):
        theta = points[trainer.rng.integers(len(points))]
        try:
            trainer.policy_episode(j - 1, theta=theta)
        except FloatingPointError as exc:
            raise TrainingDivergedError(f"nature oracle diverged at episode {j}: {exc}", None, {"episode": j}) from exc
    best = None
    for theta in points:
        trainer.alt.set_theta(theta)
        candidates = [trainer.alt.frozen()] + support_policies
        idx, regret = _best_alternative(park, theta, candidates, mixture, eval_u, eval_seed)
        if best is None or regret > best[2]:
            best = (theta.copy(), candidates[idx], regret)
    return best[0], best[1]
