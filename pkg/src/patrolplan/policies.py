"""Defender policies and their on-disk checkpoint format.

Every policy maps batches of states ``(past_effort, wildlife, t)`` to
budget-feasible effort vectors.  Batches are ``(E, N)`` arrays, one row per
episode.  ``begin`` is called once per batch of episodes and returns a context
object handed back to every ``act_batch`` call (the random baseline keeps its
per-episode draws there).

Checkpoints are ``.npz`` archives of shape-tagged float64 arrays:

* ``meta``      -- JSON string (kind, n_targets, budget, horizon, ...)
* ``actor.<k>`` -- network weights/biases in layer order (``NetPolicy``)
* ``theta``     -- the attractiveness baked into a nature alternative policy
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .nn import MLP


def effort_from_preaction(pre: np.ndarray, budget: float) -> np.ndarray:
    """``clip(budget * softmax(pre), 0, 1)``: feasible for any real input."""
    if budget <= 0:
        return np.zeros_like(pre)
    z = pre - pre.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    return np.minimum(budget * s, 1.0)


def effort_vjp(pre: np.ndarray, budget: float, d_effort: np.ndarray) -> np.ndarray:
    if budget <= 0:
        return np.zeros_like(pre)
    z = pre - pre.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    g = d_effort * budget * (budget * s < 1.0)
    return s * (g - (g * s).sum(axis=-1, keepdims=True))


def project_feasible(action: np.ndarray, budget: float) -> np.ndarray:
    """Clip to [0, 1] and scale rows down onto the budget if they exceed it."""
    a = np.clip(action, 0.0, 1.0)
    if budget <= 0:
        return np.zeros_like(a)
    total = a.sum(axis=-1, keepdims=True)
    scale = np.where(total > budget, budget / np.where(total > 0, total, 1.0), 1.0)
    return a * scale


class Policy:
    """Base class; subclasses implement ``act_batch`` (and ``act_vjp``)."""

    kind = "base"
    n_targets: int
    budget: float

    def begin(self, n_episodes: int, rng: np.random.Generator):
        return None

    def act_batch(self, past, wildlife, t, ctx=None) -> np.ndarray:
        raise NotImplementedError

    def act_vjp(self, past, wildlife, t, ctx=None):
        """Actions plus a closure mapping d_action to (d_past, d_wildlife)."""
        action = self.act_batch(past, wildlife, t, ctx)
        zeros = np.zeros_like(past)

        def vjp(d_action):
            return zeros, zeros

        return action, vjp

    @property
    def policy_id(self) -> str:
        raise NotImplementedError

    def meta(self) -> dict:
        return {"kind": self.kind, "n_targets": self.n_targets, "budget": self.budget}


class ZeroPolicy(Policy):
    """Never patrols."""

    kind = "zero"

    def __init__(self, n_targets: int, budget: float = 0.0):
        self.n_targets = int(n_targets)
        self.budget = float(budget)

    def act_batch(self, past, wildlife, t, ctx=None):
        return np.zeros((np.shape(past)[0], self.n_targets))

    @property
    def policy_id(self) -> str:
        return f"zero-{self.n_targets}"


class FixedPolicy(Policy):
    """Plays the same effort vector at every state."""

    kind = "fixed"

    def __init__(self, effort, budget: float):
        effort = np.asarray(effort, dtype=np.float64)
        if np.any(effort < 0) or np.any(effort > 1) or effort.sum() > budget + 1e-9:
            raise ValueError("fixed effort must lie in [0, 1] per target and respect the budget")
        self.effort = effort
        self.n_targets = effort.size
        self.budget = float(budget)

    def act_batch(self, past, wildlife, t, ctx=None):
        return np.broadcast_to(self.effort, (np.shape(past)[0], self.n_targets)).copy()

    @property
    def policy_id(self) -> str:
        return "fixed-" + hashlib.sha1(self.effort.tobytes()).hexdigest()[:16]

    def meta(self) -> dict:
        return {**super().meta(), "effort": [float(v) for v in self.effort]}


class RandomPolicy(Policy):
    """State-independent: one Dirichlet(1) effort split per episode, scaled by the budget."""

    kind = "random"

    def __init__(self, n_targets: int, budget: float, seed: int = 0):
        self.n_targets = int(n_targets)
        self.budget = float(budget)
        self.seed = int(seed)

    def begin(self, n_episodes, rng):
        if self.budget <= 0:
            return np.zeros((n_episodes, self.n_targets))
        draw_rng = np.random.default_rng([self.seed, int(rng.integers(2**63))])
        split = draw_rng.dirichlet(np.ones(self.n_targets), size=n_episodes)
        return np.minimum(self.budget * split, 1.0)

    def act_batch(self, past, wildlife, t, ctx=None):
        if ctx is None:
            ctx = self.begin(np.shape(past)[0], np.random.default_rng(self.seed))
        return np.array(ctx, copy=True)

    @property
    def policy_id(self) -> str:
        return f"random-{self.n_targets}-{self.budget!r}-{self.seed}"

    def meta(self) -> dict:
        return {**super().meta(), "seed": self.seed}


class NetPolicy(Policy):
    """Deterministic actor network over ``[theta?, past, wildlife / scale, t / T]``.

    ``theta_features`` (optional) is a constant input block, used when a
    parameter-conditioned network is frozen at one attractiveness vector.
    """

    kind = "net"

    def __init__(
        self,
        actor: MLP,
        n_targets: int,
        budget: float,
        horizon: int,
        wildlife_scale: float,
        theta_features: np.ndarray | None = None,
        theta: np.ndarray | None = None,
    ):
        self.actor = actor
        self.n_targets = int(n_targets)
        self.budget = float(budget)
        self.horizon = int(horizon)
        self.wildlife_scale = float(wildlife_scale)
        self.theta_features = None if theta_features is None else np.asarray(theta_features, dtype=np.float64)
        self.theta = None if theta is None else np.asarray(theta, dtype=np.float64)
        self._id = None

    @classmethod
    def for_park(cls, actor, park, theta_features=None, theta=None) -> "NetPolicy":
        return cls(actor, park.n_targets, park.budget, park.horizon, park.wildlife_scale, theta_features, theta)

    def features(self, past, wildlife, t, theta_features=None) -> np.ndarray:
        n_ep = np.shape(past)[0]
        blocks = []
        tf = self.theta_features if theta_features is None else theta_features
        if tf is not None:
            blocks.append(np.broadcast_to(tf, (n_ep, tf.shape[-1])))
        blocks += [past, wildlife / self.wildlife_scale, np.full((n_ep, 1), t / self.horizon)]
        return np.concatenate(blocks, axis=1)

    def act_batch(self, past, wildlife, t, ctx=None):
        return effort_from_preaction(self.actor.forward(self.features(past, wildlife, t)), self.budget)

    def act_vjp(self, past, wildlife, t, ctx=None):
        pre, cache = self.actor.forward_cached(self.features(past, wildlife, t))
        action = effort_from_preaction(pre, self.budget)
        n = self.n_targets
        offset = 0 if self.theta_features is None else self.theta_features.size

        def vjp(d_action):
            _, dx = self.actor.backward(cache, effort_vjp(pre, self.budget, d_action), need_params=False)
            return dx[:, offset:offset + n], dx[:, offset + n:offset + 2 * n] / self.wildlife_scale

        return action, vjp

    @property
    def policy_id(self) -> str:
        if self._id is None:
            h = hashlib.sha1()
            h.update(json.dumps(self.meta(), sort_keys=True).encode())
            for p in self.actor.params:
                h.update(np.ascontiguousarray(p).tobytes())
            if self.theta_features is not None:
                h.update(self.theta_features.tobytes())
            self._id = "net-" + h.hexdigest()[:16]
        return self._id

    def meta(self) -> dict:
        return {
            **super().meta(),
            "horizon": self.horizon,
            "wildlife_scale": self.wildlife_scale,
            "has_theta": self.theta_features is not None,
        }


def act(policy: Policy, state, ctx=None) -> np.ndarray:
    """Effort vector for a single :class:`~patrolplan.park_env.EnvState`."""
    if ctx is None:
        ctx = policy.begin(1, np.random.default_rng(getattr(policy, "seed", 0)))
    past = np.asarray(state.past_effort, dtype=np.float64)[None]
    wild = np.asarray(state.wildlife, dtype=np.float64)[None]
    return policy.act_batch(past, wild, state.timestep, ctx)[0]


def save_policy(policy: Policy, path: str | Path) -> None:
    arrays: dict[str, np.ndarray] = {"meta": np.array(json.dumps(policy.meta(), sort_keys=True))}
    if isinstance(policy, NetPolicy):
        arrays.update(policy.actor.state_dict("actor"))
        if policy.theta_features is not None:
            arrays["theta_features"] = policy.theta_features
        if policy.theta is not None:
            arrays["theta"] = policy.theta
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_policy(path: str | Path) -> Policy:
    with np.load(path, allow_pickle=False) as data:
        state = {k: data[k] for k in data.files}
    meta = json.loads(str(state["meta"]))
    kind = meta["kind"]
    if kind == "zero":
        return ZeroPolicy(meta["n_targets"], meta["budget"])
    if kind == "fixed":
        return FixedPolicy(meta["effort"], meta["budget"])
    if kind == "random":
        return RandomPolicy(meta["n_targets"], meta["budget"], meta["seed"])
    if kind == "net":
        return NetPolicy(
            MLP.from_state_dict(state, "actor"),
            meta["n_targets"],
            meta["budget"],
            meta["horizon"],
            meta["wildlife_scale"],
            state.get("theta_features"),
            state.get("theta"),
        )
    raise ValueError(f"{path}: unknown policy kind {kind!r}")
