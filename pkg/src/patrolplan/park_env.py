"""Green-security patrol simulator.

A park is a square grid of targets.  Each timestep the defender spreads at
most ``budget`` units of effort over the targets, the poacher attacks each
target independently with a logistic probability driven by the target's
attractiveness and the defender's effort in the previous timestep, and the
wildlife at attacked targets is reduced unless it was protected by the
current effort.  The defender is rewarded with the total wildlife left at the
horizon.

Policies are duck-typed: anything with ``begin(n, rng)``, ``act_batch(past,
wildlife, t, ctx)`` (and ``act_vjp`` for the differentiable rollout) works.
See :mod:`patrolplan.policies`.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .seeding import array_key

FEASIBILITY_TOL = 1e-9


class TerminalStateError(RuntimeError):
    """Raised when stepping a state that already reached the horizon."""


def logistic(x):
    x = np.asarray(x, dtype=np.float64)
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ParkInstance:
    """Static description of a protected area and its dynamics constants."""

    n_targets: int
    horizon: int
    budget: float
    initial_wildlife: np.ndarray
    alpha: float = 1.0
    psi: float = 1.05
    beta: float = -5.0
    eta: float = 0.696
    neighbor_window: int = 3
    layout: str = "square"
    neighbor_matrix: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        n = self.n_targets
        if not isinstance(n, (int, np.integer)) or n < 1:
            raise ValueError(f"n_targets must be a positive integer, got {n!r}")
        if self.layout not in ("square", "strip"):
            raise ValueError(f"layout must be 'square' or 'strip', got {self.layout!r}")
        side = math.isqrt(int(n))
        if self.layout == "square" and side * side != n:
            raise ValueError(f"n_targets must be a perfect square, got {n}")
        if not isinstance(self.horizon, (int, np.integer)) or self.horizon < 1:
            raise ValueError(f"horizon must be a positive integer, got {self.horizon!r}")
        if not (0.0 <= self.budget <= n):
            raise ValueError(f"budget must lie in [0, n_targets={n}], got {self.budget}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if not self.psi > 1:
            raise ValueError(f"psi must be > 1, got {self.psi}")
        if not self.beta < 0:
            raise ValueError(f"beta must be < 0, got {self.beta}")
        if not self.eta > 0:
            raise ValueError(f"eta must be > 0, got {self.eta}")
        if self.neighbor_window < 1 or self.neighbor_window % 2 == 0:
            raise ValueError(f"neighbor_window must be a positive odd integer, got {self.neighbor_window}")
        w0 = np.asarray(self.initial_wildlife, dtype=np.float64)
        if w0.shape != (n,):
            raise ValueError(f"initial_wildlife must have length {n}, got shape {w0.shape}")
        if np.any(w0 < 0) or not np.all(np.isfinite(w0)):
            raise ValueError("initial_wildlife must be finite and nonnegative")
        object.__setattr__(self, "n_targets", int(n))
        object.__setattr__(self, "horizon", int(self.horizon))
        object.__setattr__(self, "budget", float(self.budget))
        object.__setattr__(self, "initial_wildlife", _readonly(w0))
        mat = np.zeros((n, n))
        for i in range(n):
            mat[i, neighbors(self, i)] = 1.0
        object.__setattr__(self, "neighbor_matrix", _readonly(mat))

    @property
    def side(self) -> int:
        return math.isqrt(self.n_targets)

    @property
    def grid_shape(self) -> tuple[int, int]:
        """``(rows, cols)``; a ``strip`` park is a single row, used for tiny instances."""
        if self.layout == "strip":
            return 1, self.n_targets
        return self.side, self.side

    @property
    def wildlife_scale(self) -> float:
        """Normalizer for wildlife features: the largest initial density."""
        top = float(np.max(self.initial_wildlife))
        return top if top > 0 else 1.0

    @property
    def reward_scale(self) -> float:
        """Total wildlife at the horizon if nothing is ever poached."""
        total = float(np.sum(self.initial_wildlife ** (self.psi ** self.horizon)))
        return total if total > 0 else 1.0


@dataclass(frozen=True)
class EnvParams:
    """Per-target attractiveness vector."""

    attractiveness: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "attractiveness", _readonly(np.atleast_1d(self.attractiveness)))

    @property
    def key(self) -> str:
        return array_key(self.attractiveness)


def as_theta(params) -> np.ndarray:
    if isinstance(params, EnvParams):
        return params.attractiveness
    return np.asarray(params, dtype=np.float64)


@dataclass(frozen=True)
class UncertaintySet:
    """Box ``[lower, upper]`` of attractiveness values.

    When ``points`` is given the set is the finite collection of those rows
    (each of which must lie in the box); the box is then their bounding box.
    """

    lower: np.ndarray
    upper: np.ndarray
    points: np.ndarray | None = None

    def __post_init__(self) -> None:
        lo = np.atleast_1d(np.asarray(self.lower, dtype=np.float64))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=np.float64))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("lower and upper must be vectors of equal length")
        if np.any(lo > hi):
            bad = int(np.argmax(lo > hi))
            raise ValueError(f"lower[{bad}]={lo[bad]} exceeds upper[{bad}]={hi[bad]}")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("uncertainty bounds must be finite")
        object.__setattr__(self, "lower", _readonly(lo))
        object.__setattr__(self, "upper", _readonly(hi))
        if self.points is not None:
            pts = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
            if pts.shape[1] != lo.size or pts.shape[0] < 1:
                raise ValueError("points must be a nonempty (k, n_targets) array")
            if np.any(pts < lo - 1e-12) or np.any(pts > hi + 1e-12):
                raise ValueError("every point must lie inside [lower, upper]")
            object.__setattr__(self, "points", _readonly(pts))

    @classmethod
    def from_points(cls, points) -> "UncertaintySet":
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return cls(pts.min(axis=0), pts.max(axis=0), pts)

    @property
    def n(self) -> int:
        return int(self.lower.size)

    @property
    def is_discrete(self) -> bool:
        return self.points is not None

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def contains(self, theta, tol: float = 1e-12) -> bool:
        theta = as_theta(theta)
        if self.points is not None:
            return bool(np.any(np.all(np.abs(self.points - theta) <= tol, axis=1)))
        return bool(np.all(theta >= self.lower - tol) and np.all(theta <= self.upper + tol))

    def clip(self, theta) -> np.ndarray:
        return np.clip(as_theta(theta), self.lower, self.upper)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        if self.points is not None:
            return self.points[rng.integers(len(self.points))].copy()
        return self.lower + self.width * rng.random(self.n)

    def theta_features(self, theta) -> np.ndarray:
        """Map the box onto ``[-1, 1]`` per coordinate (0 on zero-width coordinates)."""
        half = 0.5 * self.width
        safe = np.where(half > 0, half, 1.0)
        return np.where(half > 0, (as_theta(theta) - self.midpoint) / safe, 0.0)


@dataclass(frozen=True)
class EnvState:
    past_effort: np.ndarray
    wildlife: np.ndarray
    timestep: int

    @classmethod
    def initial(cls, park: ParkInstance) -> "EnvState":
        return cls(np.zeros(park.n_targets), np.array(park.initial_wildlife), 0)


# ---------------------------------------------------------------------------
# core dynamics


def neighbors(park: ParkInstance, i: int, window: int | None = None) -> list[int]:
    """Targets inside the square window centred on ``i`` (excluding ``i``)."""
    n = park.n_targets
    if not (0 <= i < n):
        raise IndexError(f"target index {i} out of range [0, {n})")
    window = park.neighbor_window if window is None else window
    n_rows, n_cols = park.grid_shape
    r = window // 2
    row, col = divmod(i, n_cols)
    out = []
    for rr in range(max(0, row - r), min(n_rows, row + r + 1)):
        for cc in range(max(0, col - r), min(n_cols, col + r + 1)):
            j = rr * n_cols + cc
            if j != i:
                out.append(j)
    return out


def attack_logits(park: ParkInstance, theta: np.ndarray, past_effort: np.ndarray) -> np.ndarray:
    """Logits of the attack probability for (batches of) past effort vectors."""
    past_effort = np.asarray(past_effort, dtype=np.float64)
    return theta + park.beta * past_effort + park.eta * (past_effort @ park.neighbor_matrix.T)


def attack_probability(park: ParkInstance, params, state: EnvState, i: int) -> float:
    if not (0 <= i < park.n_targets):
        raise IndexError(f"target index {i} out of range [0, {park.n_targets})")
    theta = as_theta(params)
    past = np.asarray(state.past_effort, dtype=np.float64)
    z = theta[i] + park.beta * past[i] + park.eta * past[neighbors(park, i)].sum()
    return float(logistic(z))


def wildlife_step(park: ParkInstance, wildlife_i, attack_i, current_effort_i):
    """Wildlife after growth and poaching; works elementwise on arrays."""
    grown = np.power(wildlife_i, park.psi)
    return np.maximum(0.0, grown - park.alpha * attack_i * (1.0 - current_effort_i))


def check_action(park: ParkInstance, action: np.ndarray) -> None:
    action = np.asarray(action)
    if action.shape[-1] != park.n_targets:
        raise ValueError(f"action must have {park.n_targets} components")
    if np.any(action < -FEASIBILITY_TOL) or np.any(action > 1 + FEASIBILITY_TOL):
        raise ValueError("effort components must lie in [0, 1]")
    if np.any(action.sum(axis=-1) > park.budget + FEASIBILITY_TOL):
        raise ValueError(f"total effort exceeds budget {park.budget}")


def env_step(
    park: ParkInstance, params, state: EnvState, action, rng: np.random.Generator
) -> tuple[EnvState, float]:
    """Advance one timestep; the reward is nonzero only on reaching the horizon."""
    if state.timestep >= park.horizon:
        raise TerminalStateError(f"state at t={state.timestep} is terminal (horizon {park.horizon})")
    action = np.asarray(action, dtype=np.float64)
    check_action(park, action)
    p = logistic(attack_logits(park, as_theta(params), state.past_effort))
    attacks = (rng.random(park.n_targets) < p).astype(np.float64)
    wildlife = wildlife_step(park, state.wildlife, attacks, action)
    t = state.timestep + 1
    reward = float(wildlife.sum()) if t == park.horizon else 0.0
    return EnvState(action.copy(), wildlife, t), reward


# ---------------------------------------------------------------------------
# batched rollouts


def attack_uniforms(park: ParkInstance, n_episodes: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draws deciding every attack of ``n_episodes`` episodes, shape (E, T, N)."""
    return rng.random((n_episodes, park.horizon, park.n_targets))


def rollout(
    park: ParkInstance,
    theta,
    policy,
    uniforms: np.ndarray,
    policy_rng: np.random.Generator | None = None,
    noise=None,
) -> np.ndarray:
    """Terminal returns of ``len(uniforms)`` episodes played by one policy.

    ``theta`` is either one parameter vector or one per episode.  ``noise`` is an
    optional callable ``(actions, t) -> actions`` used by trainers.
    """
    theta = as_theta(theta)
    n_ep = uniforms.shape[0]
    past = np.zeros((n_ep, park.n_targets))
    wild = np.broadcast_to(park.initial_wildlife, (n_ep, park.n_targets)).copy()
    ctx = policy.begin(n_ep, policy_rng if policy_rng is not None else np.random.default_rng(0))
    for t in range(park.horizon):
        action = policy.act_batch(past, wild, t, ctx)
        if noise is not None:
            action = noise(action, t)
        p = logistic(attack_logits(park, theta, past))
        attacks = (uniforms[:, t, :] < p).astype(np.float64)
        wild = wildlife_step(park, wild, attacks, action)
        past = action
    return wild.sum(axis=1)


def rollout_theta_grad(
    park: ParkInstance,
    theta: np.ndarray,
    policy,
    uniforms: np.ndarray,
    policy_rng: np.random.Generator | None = None,
    relaxation: str = "straight_through",
) -> tuple[np.ndarray, np.ndarray]:
    """Episode returns and the gradient of their mean w.r.t. ``theta``.

    ``relaxation="straight_through"`` samples attacks in the forward pass and
    differentiates them as if they were their probabilities.  ``"expected"``
    replaces every attack by its probability in the forward pass too, giving a
    deterministic surrogate (used for finite-difference checks).

    The policy's ``act_vjp`` may return a third gradient block for policies
    that read ``theta`` as an input (the nature oracle's alternative policy).
    """
    theta = np.asarray(theta, dtype=np.float64)
    n_ep = uniforms.shape[0]
    n = park.n_targets
    past = np.zeros((n_ep, n))
    wild = np.broadcast_to(park.initial_wildlife, (n_ep, n)).copy()
    ctx = policy.begin(n_ep, policy_rng if policy_rng is not None else np.random.default_rng(0))
    tape = []
    for t in range(park.horizon):
        action, vjp = policy.act_vjp(past, wild, t, ctx)
        p = logistic(attack_logits(park, theta, past))
        if relaxation == "expected":
            attacks = p
        elif relaxation == "straight_through":
            attacks = (uniforms[:, t, :] < p).astype(np.float64)
        else:
            raise ValueError(f"unknown relaxation {relaxation!r}")
        grown = np.power(wild, park.psi)
        pre = grown - park.alpha * attacks * (1.0 - action)
        new_wild = np.maximum(0.0, pre)
        tape.append((past, wild, p, action, attacks, pre, vjp))
        past, wild = action, new_wild
    returns = wild.sum(axis=1)

    d_theta = np.zeros(n)
    d_wild = np.full((n_ep, n), 1.0 / n_ep)
    d_past = np.zeros((n_ep, n))
    for past_t, wild_t, p, action, attacks, pre, vjp in reversed(tape):
        # d_past currently holds the gradient w.r.t. this step's action
        d_action = d_past
        d_pre = d_wild * (pre > 0.0)
        d_action = d_action + d_pre * park.alpha * attacks
        d_attack = -d_pre * park.alpha * (1.0 - action)
        d_z = d_attack * p * (1.0 - p)
        d_theta += d_z.sum(axis=0)
        d_past_prev = park.beta * d_z + park.eta * (d_z @ park.neighbor_matrix)
        with np.errstate(divide="ignore", invalid="ignore"):
            dgrow = np.where(wild_t > 0, park.psi * np.power(wild_t, park.psi - 1.0), 0.0)
        d_wild_prev = d_pre * dgrow
        grads = vjp(d_action)
        d_past_prev = d_past_prev + grads[0]
        d_wild_prev = d_wild_prev + grads[1]
        if len(grads) > 2 and grads[2] is not None:
            d_theta += grads[2]
        d_past, d_wild = d_past_prev, d_wild_prev
    return returns, d_theta


@dataclass(frozen=True)
class Mixture:
    """A finite distribution over strategies (policies or parameter vectors)."""

    items: tuple
    probs: np.ndarray

    def __init__(self, items, probs=None):
        items = tuple(items)
        if not items:
            raise ValueError("mixture must contain at least one strategy")
        probs = np.full(len(items), 1.0 / len(items)) if probs is None else np.asarray(probs, dtype=np.float64)
        if probs.shape != (len(items),) or np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError("mixture probabilities must be nonnegative and sum to 1")
        object.__setattr__(self, "items", items)
        object.__setattr__(self, "probs", _readonly(probs / probs.sum()))

    def __len__(self) -> int:
        return len(self.items)

    def sample_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if len(self.items) == 1:
            return np.zeros(n, dtype=int)
        return rng.choice(len(self.items), size=n, p=self.probs)

    def support(self, tol: float = 0.0) -> list[int]:
        return [i for i, p in enumerate(self.probs) if p > tol]


def estimate_return(
    park: ParkInstance,
    params_or_mixture,
    policy_or_mixture,
    n_episodes: int = 100,
    rng: np.random.Generator | None = None,
) -> tuple[float, float]:
    """Monte Carlo mean terminal return and its standard error.

    Either argument may be a single strategy or a :class:`Mixture`; each
    episode then draws its own parameter vector and policy before rolling out.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    nature = params_or_mixture if isinstance(params_or_mixture, Mixture) else Mixture([params_or_mixture])
    agent = policy_or_mixture if isinstance(policy_or_mixture, Mixture) else Mixture([policy_or_mixture])
    thetas = [as_theta(t) for t in nature.items]
    policies = agent.items
    theta_idx = nature.sample_indices(n_episodes, rng)
    pol_idx = agent.sample_indices(n_episodes, rng)
    uniforms = attack_uniforms(park, n_episodes, rng)
    policy_seed = int(rng.integers(2**63))
    returns = np.empty(n_episodes)
    for ti in np.unique(theta_idx):
        for pi in np.unique(pol_idx):
            mask = (theta_idx == ti) & (pol_idx == pi)
            if mask.any():
                returns[mask] = rollout(
                    park, thetas[ti], policies[pi], uniforms[mask],
                    np.random.default_rng([policy_seed, int(ti), int(pi)]),
                )
    stderr = float(returns.std(ddof=1) / math.sqrt(n_episodes)) if n_episodes > 1 else 0.0
    return float(returns.mean()), stderr


def expected_return_exact(park: ParkInstance, params, policy, policy_rng=None) -> float:
    """Exact expected return by enumerating every attack outcome (tiny instances only).

    The policy must be deterministic given the state.
    """
    theta = as_theta(params)
    n, horizon = park.n_targets, park.horizon
    if n * horizon > 16:
        raise ValueError("exact enumeration limited to n_targets * horizon <= 16")
    ctx = policy.begin(1, policy_rng if policy_rng is not None else np.random.default_rng(0))
    outcomes = ((np.arange(2**n)[:, None] >> np.arange(n)) & 1).astype(np.float64)

    def recurse(past, wild, t):
        if t == horizon:
            return float(wild.sum())
        action = policy.act_batch(past[None], wild[None], t, ctx)[0]
        p = logistic(attack_logits(park, theta, past))
        total = 0.0
        for k in outcomes:
            prob = float(np.prod(np.where(k > 0, p, 1.0 - p)))
            if prob == 0.0:
                continue
            total += prob * recurse(action, wildlife_step(park, wild, k, action), t + 1)
        return total

    return recurse(np.zeros(n), np.array(park.initial_wildlife), 0)


# ---------------------------------------------------------------------------
# instance construction


def initial_wildlife(n_targets: int, kind: str, rng: np.random.Generator | None = None) -> np.ndarray:
    """``random`` (iid uniform on [0, 3]), ``peaked`` or ``flatter`` Gaussian bumps."""
    if kind == "random":
        rng = rng if rng is not None else np.random.default_rng(0)
        return rng.uniform(0.0, 3.0, size=n_targets)
    if kind not in ("peaked", "flatter"):
        raise ValueError(f"unknown wildlife initialization {kind!r}")
    side = math.isqrt(n_targets)
    if side * side != n_targets:
        raise ValueError(f"kernel initializations need a square grid, got n_targets={n_targets}")
    width, height = (0.1, 5.0) if kind == "peaked" else (0.4, 3.0)
    sigma = width * side
    centre = (side - 1) / 2.0
    rows, cols = np.divmod(np.arange(n_targets), side)
    d2 = (rows - centre) ** 2 + (cols - centre) ** 2
    return height * np.exp(-d2 / (2.0 * sigma**2))


def random_uncertainty(
    n_targets: int,
    interval_size: float,
    rng: np.random.Generator,
    centre_range: tuple[float, float] = (-10.0, 0.0),
) -> UncertaintySet:
    """Box of width ``interval_size`` around uniformly drawn centres."""
    if interval_size < 0:
        raise ValueError("interval_size must be >= 0")
    centres = rng.uniform(centre_range[0], centre_range[1], size=n_targets)
    return UncertaintySet(centres - interval_size / 2.0, centres + interval_size / 2.0)


# ---------------------------------------------------------------------------
# serialization

PARK_SCHEMA_VERSION = 1


def park_to_dict(park: ParkInstance) -> dict[str, Any]:
    return {
        "schema_version": PARK_SCHEMA_VERSION,
        "n_targets": park.n_targets,
        "horizon": park.horizon,
        "budget": park.budget,
        "alpha": park.alpha,
        "psi": park.psi,
        "beta": park.beta,
        "eta": park.eta,
        "neighbor_window": park.neighbor_window,
        "layout": park.layout,
        "initial_wildlife": [float(v) for v in park.initial_wildlife],
    }


_PARK_KEYS = {"schema_version", "n_targets", "horizon", "budget", "alpha", "psi", "beta", "eta",
              "neighbor_window", "layout", "initial_wildlife"}


def park_from_dict(data: dict[str, Any]) -> ParkInstance:
    unknown = set(data) - _PARK_KEYS
    if unknown:
        raise ValueError(f"unknown park keys: {sorted(unknown)}")
    if data.get("schema_version", PARK_SCHEMA_VERSION) != PARK_SCHEMA_VERSION:
        raise ValueError(f"unsupported park schema_version {data.get('schema_version')}")
    kwargs = {k: v for k, v in data.items() if k != "schema_version"}
    kwargs["initial_wildlife"] = np.asarray(kwargs["initial_wildlife"], dtype=np.float64)
    return ParkInstance(**kwargs)


def uncertainty_to_dict(unc: UncertaintySet) -> dict[str, Any]:
    out: dict[str, Any] = {"lower": [float(v) for v in unc.lower], "upper": [float(v) for v in unc.upper]}
    if unc.points is not None:
        out["points"] = [[float(v) for v in row] for row in unc.points]
    return out


def uncertainty_from_dict(data: dict[str, Any]) -> UncertaintySet:
    unknown = set(data) - {"lower", "upper", "points"}
    if unknown:
        raise ValueError(f"unknown uncertainty keys: {sorted(unknown)}")
    if "points" in data and data["points"] is not None and ("lower" not in data):
        return UncertaintySet.from_points(data["points"])
    return UncertaintySet(data["lower"], data["upper"], data.get("points"))


def write_vector_csv(path: str | Path, values: Sequence[float]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["target_index", "value"])
        for i, v in enumerate(values):
            writer.writerow([i, repr(float(v))])


def read_vector_csv(path: str | Path, n_targets: int | None = None) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["target_index", "value"]:
            raise ValueError(f"{path}: expected header 'target_index,value'")
        entries = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                idx, val = int(row[0]), float(row[1])
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed row {row!r}") from exc
            if idx in entries:
                raise ValueError(f"{path}:{lineno}: duplicate target_index {idx}")
            entries[idx] = val
    n = n_targets if n_targets is not None else len(entries)
    if sorted(entries) != list(range(n)):
        raise ValueError(f"{path}: target indices must cover 0..{n - 1} exactly once")
    return np.array([entries[i] for i in range(n)])
