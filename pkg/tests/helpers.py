"""Shared numerical checks for the test modules."""

import numpy as np

from patrolplan.agent_oracle import actor_loss_grads, critic_loss_grads
from patrolplan.nature_oracle import LiveThetaPolicy
from patrolplan.nn import MLP
from patrolplan.park_env import ParkInstance, UncertaintySet, attack_uniforms, rollout_theta_grad
from patrolplan.policies import NetPolicy


def rel_error(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)


def central_diff(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x)
    for i in range(x.size):
        old = x.flat[i]
        x.flat[i] = old + eps
        hi = f()
        x.flat[i] = old - eps
        lo = f()
        x.flat[i] = old
        g.flat[i] = (hi - lo) / (2 * eps)
    return g


def critic_check(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    obs_dim, n = 11, 5
    critic = MLP((obs_dim + n, 16, 32, 1), rng)
    obs, act, target = rng.normal(size=(64, obs_dim)), rng.random((64, n)), rng.normal(size=64)
    _, grads = critic_loss_grads(critic, obs, act, target)
    worst = 0.0
    for p, g in zip(critic.params, grads):
        fd = central_diff(lambda: critic_loss_grads(critic, obs, act, target)[0], p)
        worst = max(worst, rel_error(g, fd))
    return worst


def actor_check(seed: int = 0, budget: float = 2.0) -> float:
    rng = np.random.default_rng(seed)
    obs_dim, n = 11, 5
    actor = MLP((obs_dim, 16, 32, n), rng)
    critic = MLP((obs_dim + n, 16, 32, 1), rng)
    obs = rng.normal(size=(64, obs_dim))
    _, grads = actor_loss_grads(actor, critic, obs, budget)
    worst = 0.0
    for p, g in zip(actor.params, grads):
        fd = central_diff(lambda: actor_loss_grads(actor, critic, obs, budget)[0], p)
        worst = max(worst, rel_error(g, fd))
    return worst


def theta_path_check(seed: int = 0, live: bool = True) -> float:
    """Gradient of the deterministic ("expected") mean return w.r.t. theta."""
    rng = np.random.default_rng(seed)
    n = 4
    park = ParkInstance(n, 3, 1.5, rng.uniform(0.5, 2.0, n), beta=-2.0, eta=0.7)
    unc = UncertaintySet(np.full(n, -3.0), np.full(n, 1.0))
    theta = rng.uniform(-2.5, 0.5, n)
    if live:
        actor = MLP((3 * n + 1, 16, 32, n), rng)
        policy = LiveThetaPolicy(actor, park, unc, theta)
    else:
        actor = MLP((2 * n + 1, 16, 32, n), rng)
        policy = NetPolicy.for_park(actor, park)
    uniforms = attack_uniforms(park, 16, rng)

    def value():
        if live:
            policy.set_theta(theta)
        return float(rollout_theta_grad(park, theta, policy, uniforms, relaxation="expected")[0].mean())

    if live:
        policy.set_theta(theta)
    _, grad = rollout_theta_grad(park, theta, policy, uniforms, relaxation="expected")
    return rel_error(grad, central_diff(value, theta))
