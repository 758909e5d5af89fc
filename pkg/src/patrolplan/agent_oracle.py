"""Best-response learner for the defender: DDPG against a mixture of parameters.

Given a nature mixed strategy over attractiveness vectors, the oracle trains a
deterministic actor that maximizes the expected terminal wildlife.  Every
training episode draws one parameter vector from the mixture and keeps it for
the whole trajectory.

The learner itself (:class:`DDPG`) works on precomputed feature vectors so
that the nature oracle can reuse it for its parameter-conditioned policy.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .nn import MLP, Adam
from .park_env import Mixture, ParkInstance, as_theta, attack_logits, attack_uniforms, logistic, rollout, wildlife_step
from .policies import NetPolicy, effort_from_preaction, effort_vjp, project_feasible
from .seeding import derive_rng

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """A loss or parameter became non-finite.

    ``best_policy`` holds the best checkpoint seen before the failure (or
    ``None`` if none was evaluated yet) and ``diagnostics`` a few numbers
    describing the state of training at the time.
    """

    def __init__(self, message: str, best_policy=None, diagnostics: dict | None = None):
        super().__init__(message)
        self.best_policy = best_policy
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class TrainConfig:
    episodes: int = 2000
    buffer_size: int = 50_000
    batch_size: int = 64
    noise_start: float = 0.1
    noise_end: float = 0.01
    tau: float = 0.005
    discount: float = 1.0
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    hidden: tuple[int, int] = (16, 32)
    updates_per_step: int = 1
    eval_every: int = 100
    eval_episodes: int = 32
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("episodes", "buffer_size", "batch_size", "updates_per_step", "eval_every", "eval_episodes"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer, got {getattr(self, name)!r}")
        for name in ("noise_start", "noise_end", "tau", "actor_lr", "critic_lr"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)!r}")
        if self.tau > 1:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        # finite horizon with a terminal reward: no discounting
        if self.discount != 1.0:
            raise ValueError(f"discount is fixed at 1.0, got {self.discount}")
        if len(self.hidden) < 1 or any(int(h) < 1 for h in self.hidden):
            raise ValueError(f"hidden sizes must be positive, got {self.hidden!r}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hidden"] = list(self.hidden)
        return out

    def noise_scale(self, episode: int, budget: float) -> float:
        """Exploration std: linear decay from ``noise_start*B`` to ``noise_end*B``."""
        frac = episode / max(1, self.episodes - 1)
        return budget * (self.noise_start + (self.noise_end - self.noise_start) * frac)


# ---------------------------------------------------------------------------
# losses with hand-written gradients (checked against finite differences)


def critic_loss_grads(critic: MLP, obs, act, target) -> tuple[float, list[np.ndarray]]:
    """``0.5 * mean((Q(obs, act) - target)**2)`` and its parameter gradients."""
    q, cache = critic.forward_cached(np.concatenate([obs, act], axis=1))
    err = q[:, 0] - target
    loss = 0.5 * float(np.mean(err * err))
    grads, _ = critic.backward(cache, (err / err.size)[:, None])
    return loss, grads


def actor_loss_grads(actor: MLP, critic: MLP, obs, budget: float) -> tuple[float, list[np.ndarray]]:
    """``-mean Q(obs, mu(obs))`` and its gradients w.r.t. the actor parameters."""
    pre, a_cache = actor.forward_cached(obs)
    act = effort_from_preaction(pre, budget)
    q, c_cache = critic.forward_cached(np.concatenate([obs, act], axis=1))
    n = obs.shape[0]
    _, dx = critic.backward(c_cache, np.full((n, 1), -1.0 / n), need_params=False)
    d_act = dx[:, obs.shape[1]:]
    grads, _ = actor.backward(a_cache, effort_vjp(pre, budget, d_act))
    return -float(np.mean(q)), grads


def td_targets(target_actor: MLP, target_critic: MLP, rew, next_obs, done, budget: float, discount: float = 1.0):
    next_act = effort_from_preaction(target_actor.forward(next_obs), budget)
    q_next = target_critic.forward(np.concatenate([next_obs, next_act], axis=1))[:, 0]
    return rew + discount * (1.0 - done) * q_next


class ReplayBuffer:
    """Fixed-capacity ring buffer of feature-space transitions."""

    def __init__(self, capacity: int, obs_dim: int, act_dim: int):
        self.capacity = int(capacity)
        self.obs = np.zeros((capacity, obs_dim))
        self.act = np.zeros((capacity, act_dim))
        self.rew = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self.done = np.zeros(capacity)
        self.size = 0
        self._head = 0

    def add(self, obs, act, rew, next_obs, done) -> None:
        k = obs.shape[0]
        idx = (self._head + np.arange(k)) % self.capacity
        self.obs[idx] = obs
        self.act[idx] = act
        self.rew[idx] = rew
        self.next_obs[idx] = next_obs
        self.done[idx] = done
        self._head = int((self._head + k) % self.capacity)
        self.size = min(self.capacity, self.size + k)

    def sample(self, batch_size: int, rng: np.random.Generator):
        idx = rng.integers(self.size, size=batch_size)
        return self.obs[idx], self.act[idx], self.rew[idx], self.next_obs[idx], self.done[idx]


class DDPG:
    """Actor, critic, their target copies, optimizers and replay memory."""

    def __init__(self, obs_dim: int, n_targets: int, budget: float, config: TrainConfig, rng: np.random.Generator):
        self.obs_dim = int(obs_dim)
        self.n_targets = int(n_targets)
        self.budget = float(budget)
        self.config = config
        self.actor = MLP((obs_dim, *config.hidden, n_targets), rng)
        self.critic = MLP((obs_dim + n_targets, *config.hidden, 1), rng)
        self.target_actor = self.actor.copy()
        self.target_critic = self.critic.copy()
        self.actor_opt = Adam(self.actor.params, config.actor_lr)
        self.critic_opt = Adam(self.critic.params, config.critic_lr)
        self.buffer = ReplayBuffer(config.buffer_size, obs_dim, n_targets)
        self.n_updates = 0

    def act(self, obs: np.ndarray) -> np.ndarray:
        return effort_from_preaction(self.actor.forward(obs), self.budget)

    def explore(self, obs: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
        """Greedy action plus Gaussian noise, projected back onto the feasible set."""
        a = self.act(obs)
        return project_feasible(a + sigma * rng.standard_normal(a.shape), self.budget)

    def update(self, rng: np.random.Generator) -> tuple[float, float]:
        cfg = self.config
        obs, act, rew, next_obs, done = self.buffer.sample(cfg.batch_size, rng)
        y = td_targets(self.target_actor, self.target_critic, rew, next_obs, done, self.budget, cfg.discount)
        c_loss, c_grads = critic_loss_grads(self.critic, obs, act, y)
        a_loss, a_grads = actor_loss_grads(self.actor, self.critic, obs, self.budget)
        if not (np.isfinite(c_loss) and np.isfinite(a_loss)):
            raise FloatingPointError(f"non-finite loss (critic {c_loss}, actor {a_loss})")
        self.critic_opt.step(c_grads)
        self.actor_opt.step(a_grads)
        self.target_actor.soft_update(self.actor, cfg.tau)
        self.target_critic.soft_update(self.critic, cfg.tau)
        self.n_updates += 1
        return c_loss, a_loss

    def healthy(self) -> bool:
        return self.actor.all_finite() and self.critic.all_finite()


# ---------------------------------------------------------------------------
# episode driver shared by both oracles

FeatureFn = Callable[[np.ndarray, np.ndarray, int], np.ndarray]


def run_training_episode(
    park: ParkInstance,
    learner: DDPG,
    theta: np.ndarray,
    features: FeatureFn,
    sigma: float,
    rng: np.random.Generator,
    learn: bool = True,
) -> float:
    """Play one exploratory episode, store its transitions and (optionally) learn.

    Returns the unscaled terminal return.
    """
    n = park.n_targets
    past = np.zeros((1, n))
    wild = park.initial_wildlife[None].copy()
    obs = features(past, wild, 0)
    cfg = learner.config
    scale = park.reward_scale
    for t in range(park.horizon):
        action = learner.explore(obs, sigma, rng)
        p = logistic(attack_logits(park, theta, past))
        attacks = (rng.random((1, n)) < p).astype(np.float64)
        wild = wildlife_step(park, wild, attacks, action)
        past = action
        last = t + 1 == park.horizon
        next_obs = features(past, wild, t + 1)
        reward = float(wild.sum()) / scale if last else 0.0
        learner.buffer.add(obs, action, reward, next_obs, 1.0 if last else 0.0)
        obs = next_obs
        if learn and learner.buffer.size >= cfg.batch_size:
            for _ in range(cfg.updates_per_step):
                learner.update(rng)
    return float(wild.sum())


def _diverged(learner: DDPG, episode: int, best, message: str) -> TrainingDivergedError:
    diag = {"episode": episode, "updates": learner.n_updates}
    return TrainingDivergedError(f"training diverged at episode {episode}: {message}", best, diag)


def train_agent(
    park: ParkInstance,
    nature_mixture,
    config: TrainConfig | None = None,
) -> NetPolicy:
    """Deterministic policy approximately maximizing ``E_{theta~mixture} r(pi, theta)``.

    The returned actor is the best of the periodic greedy checkpoints, scored
    on a fixed batch of evaluation episodes with common random numbers.
    """
    config = config or TrainConfig()
    nature = nature_mixture if isinstance(nature_mixture, Mixture) else Mixture([nature_mixture])
    thetas = [as_theta(item) for item in nature.items]
    if any(th.shape != (park.n_targets,) for th in thetas):
        raise ValueError(f"every parameter vector must have length {park.n_targets}")
    rng = derive_rng(config.seed, "agent-train")
    obs_dim = 2 * park.n_targets + 1
    learner = DDPG(obs_dim, park.n_targets, park.budget, config, derive_rng(config.seed, "agent-init"))
    template = NetPolicy.for_park(learner.actor, park)

    eval_rng = derive_rng(config.seed, "agent-eval")
    eval_idx = nature.sample_indices(config.eval_episodes, eval_rng)
    eval_u = attack_uniforms(park, config.eval_episodes, eval_rng)

    def score(actor: MLP) -> float:
        pol = NetPolicy.for_park(actor, park)
        total = 0.0
        for k in np.unique(eval_idx):
            mask = eval_idx == k
            total += float(rollout(park, thetas[k], pol, eval_u[mask]).sum())
        return total / config.eval_episodes

    best_actor, best_score = learner.actor.copy(), score(learner.actor)
    for j in range(config.episodes):
        theta = thetas[nature.sample_indices(1, rng)[0]]
        try:
            run_training_episode(park, learner, theta, template.features, config.noise_scale(j, park.budget), rng)
        except FloatingPointError as exc:
            raise _diverged(learner, j, NetPolicy.for_park(best_actor, park), str(exc)) from exc
        if not learner.healthy():
            raise _diverged(learner, j, NetPolicy.for_park(best_actor, park), "non-finite parameters")
        if (j + 1) % config.eval_every == 0 or j + 1 == config.episodes:
            s = score(learner.actor)
            if s > best_score:
                best_actor, best_score = learner.actor.copy(), s
    log.debug("agent oracle: best checkpoint score %.6g after %d updates", best_score, learner.n_updates)
    return NetPolicy.for_park(best_actor, park)
