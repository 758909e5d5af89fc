"""Logistic regressions of observed illegal activity on patrol effort.

Rows of a :class:`PatrolPanel` are (target, period) cells with the current
effort, the effort in the previous period, the previous-period effort summed
over the neighbouring cells, and whether illegal activity was observed.  The
fitted coefficients give the attractiveness intercept, the current-effort
(detection) coefficient, the past-effort (deterrence) coefficient and,
optionally, the neighbour-effort (displacement) coefficient.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .park_env import logistic

PANEL_COLUMNS = ("target", "period", "current_effort", "past_effort", "neighbor_effort", "observed")
EFFORT_COLUMNS = ("current_effort", "past_effort", "neighbor_effort")


class PanelFormatError(ValueError):
    """Malformed panel CSV (carries the offending line number when known)."""


class SeparationError(RuntimeError):
    pass


class SingularDesignError(RuntimeError):
    pass


@dataclass(frozen=True)
class PatrolPanel:
    target: np.ndarray
    period: np.ndarray
    current_effort: np.ndarray
    past_effort: np.ndarray
    neighbor_effort: np.ndarray
    observed: np.ndarray
    normalization: dict | None = None

    def __post_init__(self) -> None:
        n = len(self.target)
        for name in PANEL_COLUMNS:
            if len(getattr(self, name)) != n:
                raise ValueError(f"column {name} has {len(getattr(self, name))} rows, expected {n}")
        obs = np.asarray(self.observed)
        if not np.all((obs == 0) | (obs == 1)):
            raise ValueError("observed must be binary")
        if self.normalization is None:
            for name in EFFORT_COLUMNS:
                if np.any(np.asarray(getattr(self, name)) < 0):
                    raise ValueError(f"{name} must be nonnegative before normalization")
        pairs = np.stack([self.target, self.period], axis=1)
        if len(np.unique(pairs, axis=0)) != n:
            raise ValueError("(target, period) pairs must be unique")

    def __len__(self) -> int:
        return len(self.target)

    def take(self, idx: np.ndarray) -> "PatrolPanel":
        return replace(self, **{c: np.asarray(getattr(self, c))[idx] for c in PANEL_COLUMNS})


@dataclass
class DeterrenceCoefficients:
    mean_attractiveness: float
    gamma: float
    beta: float
    eta: float | None = None
    target_intercepts: dict[int, float] | None = None
    stderr: dict[str, float] = field(default_factory=dict)
    pvalues: dict[str, float] = field(default_factory=dict)
    log_likelihood: float = float("nan")
    n_iter: int = 0
    loglik_trace: list[float] = field(default_factory=list)
    n_rows: int = 0

    def to_dict(self) -> dict:
        out = {
            "mean_attractiveness": self.mean_attractiveness,
            "gamma": self.gamma,
            "beta": self.beta,
            "eta": self.eta,
            "stderr": self.stderr,
            "pvalues": self.pvalues,
            "log_likelihood": self.log_likelihood,
            "n_iter": self.n_iter,
            "n_rows": self.n_rows,
        }
        if self.target_intercepts is not None:
            out["target_intercepts"] = {str(k): v for k, v in self.target_intercepts.items()}
        return out


# ---------------------------------------------------------------------------


def normalize_efforts(panel: PatrolPanel) -> PatrolPanel:
    """Standardize every effort column (population std); zero-variance columns become 0."""
    if len(panel) == 0:
        raise ValueError("cannot normalize an empty panel")
    info: dict = {"mean": {}, "std": {}, "flagged": []}
    cols = {}
    for name in EFFORT_COLUMNS:
        x = np.asarray(getattr(panel, name), dtype=np.float64)
        mu, sd = float(x.mean()), float(x.std())
        info["mean"][name] = mu
        info["std"][name] = sd
        if sd == 0.0 or not np.isfinite(sd):
            info["flagged"].append(name)
            cols[name] = np.zeros_like(x)
        else:
            cols[name] = (x - mu) / sd
    return replace(panel, normalization=info, **cols)


def _design(panel: PatrolPanel, include_neighbors: bool, per_target: bool):
    y = np.asarray(panel.observed, dtype=np.float64)
    effort = [np.asarray(panel.current_effort, dtype=np.float64), np.asarray(panel.past_effort, dtype=np.float64)]
    names = ["gamma", "beta"]
    if include_neighbors:
        effort.append(np.asarray(panel.neighbor_effort, dtype=np.float64))
        names.append("eta")
    if per_target:
        targets, inverse = np.unique(panel.target, return_inverse=True)
        dummies = np.zeros((len(y), len(targets)))
        dummies[np.arange(len(y)), inverse] = 1.0
        X = np.column_stack([dummies] + effort)
        names = [f"theta_{int(t)}" for t in targets] + names
    else:
        targets = None
        X = np.column_stack([np.ones(len(y))] + effort)
        names = ["intercept"] + names
    return X, y, names, targets


def _loglik(X, y, w):
    z = X @ w
    # log(1 + e^z) computed stably
    return float(np.sum(y * z - np.logaddexp(0.0, z)))


def fit_logistic(
    panel: PatrolPanel,
    include_neighbors: bool = False,
    per_target_intercepts: bool = False,
    tol: float = 1e-8,
    max_iter: int = 200,
) -> DeterrenceCoefficients:
    """Maximum-likelihood fit by IRLS (Newton) with step halving.

    The panel is expected to be normalized already (see :func:`normalize_efforts`).
    """
    X, y, names, targets = _design(panel, include_neighbors, per_target_intercepts)
    if y.sum() < 1 or y.sum() > len(y) - 1:
        raise ValueError("need at least one positive and one negative observation")
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise SingularDesignError(f"design matrix is rank deficient (columns: {names})")
    w = np.zeros(X.shape[1])
    w[0 if not per_target_intercepts else slice(0, len(targets))] = math.log(y.mean() / (1 - y.mean()))
    ll = _loglik(X, y, w)
    trace = [ll]
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        p = logistic(X @ w)
        grad = X.T @ (y - p)
        if np.linalg.norm(grad) < tol:
            n_iter -= 1
            break
        H = X.T @ (X * (p * (1 - p))[:, None])
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError as exc:
            raise SingularDesignError(f"information matrix singular at iteration {n_iter}") from exc
        # summing many terms leaves ~1e-12 relative noise in the log-likelihood;
        # a full Newton step inside that band is accepted as-is
        slack = 1e-11 * max(1.0, abs(ll))
        t = 1.0
        cand, ll_new = w + step, _loglik(X, y, w + step)
        while not ll_new >= ll - slack and t > 1e-10:
            t *= 0.5
            cand = w + t * step
            ll_new = _loglik(X, y, cand)
        if not ll_new >= ll - slack:
            # no ascent direction left at machine precision
            break
        w, ll = cand, ll_new
        trace.append(ll)
        if np.max(np.abs(w)) > 50:
            raise SeparationError(
                f"coefficients diverging (max |w|={np.max(np.abs(w)):.1f}); "
                "the panel looks perfectly or quasi-perfectly separated"
            )
    else:
        p = logistic(X @ w)
        if np.linalg.norm(X.T @ (y - p)) >= tol:
            raise SeparationError(f"IRLS did not reach gradient norm {tol} in {max_iter} iterations")
    p = logistic(X @ w)
    H = X.T @ (X * (p * (1 - p))[:, None])
    try:
        cov = np.linalg.inv(H)
    except np.linalg.LinAlgError as exc:
        raise SingularDesignError("observed information is singular at the optimum") from exc
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    zstat = w / np.where(se > 0, se, np.inf)
    pvals = [math.erfc(abs(z) / math.sqrt(2.0)) for z in zstat]
    est = dict(zip(names, w))
    if per_target_intercepts:
        intercepts = {int(t): float(est[f"theta_{int(t)}"]) for t in targets}
        mean_attr = float(np.mean(list(intercepts.values())))
    else:
        intercepts = None
        mean_attr = float(est["intercept"])
    return DeterrenceCoefficients(
        mean_attractiveness=mean_attr,
        gamma=float(est["gamma"]),
        beta=float(est["beta"]),
        eta=float(est["eta"]) if include_neighbors else None,
        target_intercepts=intercepts,
        stderr={k: float(s) for k, s in zip(names, se)},
        pvalues={k: float(v) for k, v in zip(names, pvals)},
        log_likelihood=ll,
        n_iter=n_iter,
        loglik_trace=trace,
        n_rows=len(y),
    )


def exponential_efforts(mean: float = 1.0) -> Callable:
    def draw(rng: np.random.Generator, shape):
        return rng.exponential(mean, size=shape)

    return draw


def synth_panel(
    coeffs: DeterrenceCoefficients,
    n_targets: int,
    n_periods: int,
    effort_process: Callable | None = None,
    rng: np.random.Generator | None = None,
    neighbor_window: int = 3,
) -> PatrolPanel:
    """Simulate a raw-effort panel whose normalized efforts follow ``coeffs``.

    Efforts are drawn per cell for ``n_periods + 1`` periods so every row has a
    past period; the logistic model is applied to the standardized columns.
    """
    side = math.isqrt(n_targets)
    if side * side != n_targets:
        raise ValueError(f"n_targets must be a perfect square, got {n_targets}")
    rng = rng if rng is not None else np.random.default_rng(0)
    draw = effort_process or exponential_efforts()
    effort = np.asarray(draw(rng, (n_periods + 1, n_targets)), dtype=np.float64)
    if np.any(effort < 0):
        raise ValueError("effort process produced negative effort")
    r = neighbor_window // 2
    grid = effort.reshape(n_periods + 1, side, side)
    padded = np.pad(grid, ((0, 0), (r, r), (r, r)))
    window = np.zeros_like(grid)
    for dr in range(-r, r + 1):
        for dc in range(-r, r + 1):
            if dr or dc:
                window += padded[:, r + dr: r + dr + side, r + dc: r + dc + side]
    nbr = window.reshape(n_periods + 1, n_targets)

    current = effort[1:].ravel()
    past = effort[:-1].ravel()
    neighbor = nbr[:-1].ravel()
    period = np.repeat(np.arange(1, n_periods + 1), n_targets)
    target = np.tile(np.arange(n_targets), n_periods)

    def z(x):
        sd = x.std()
        return (x - x.mean()) / sd if sd > 0 else np.zeros_like(x)

    if coeffs.target_intercepts:
        intercept = np.array([coeffs.target_intercepts.get(int(t), coeffs.mean_attractiveness) for t in target])
    else:
        intercept = coeffs.mean_attractiveness
    logit = intercept + coeffs.gamma * z(current) + coeffs.beta * z(past)
    if coeffs.eta is not None:
        logit = logit + coeffs.eta * z(neighbor)
    observed = (rng.random(len(current)) < logistic(logit)).astype(np.int64)
    return PatrolPanel(target, period, current, past, neighbor, observed)


# ---------------------------------------------------------------------------
# I/O


def write_panel_csv(panel: PatrolPanel, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PANEL_COLUMNS)
        for row in zip(*(getattr(panel, c) for c in PANEL_COLUMNS)):
            writer.writerow([int(row[0]), int(row[1]), repr(float(row[2])), repr(float(row[3])),
                             repr(float(row[4])), int(row[5])])


def read_panel_csv(path: str | Path) -> PatrolPanel:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise PanelFormatError(f"{path}:1: empty file")
        header = [h.strip() for h in header]
        for col in PANEL_COLUMNS:
            if col not in header:
                raise PanelFormatError(f"{path}:1: missing column {col!r}")
        idx = [header.index(c) for c in PANEL_COLUMNS]
        data: list[list] = [[] for _ in PANEL_COLUMNS]
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not v.strip() for v in row):
                continue
            try:
                vals = [row[i] for i in idx]
                data[0].append(int(vals[0]))
                data[1].append(int(vals[1]))
                for k in (2, 3, 4):
                    data[k].append(float(vals[k]))
                obs = int(vals[5])
            except (ValueError, IndexError) as exc:
                raise PanelFormatError(f"{path}:{lineno}: cannot parse row {row!r}") from exc
            if obs not in (0, 1):
                raise PanelFormatError(f"{path}:{lineno}: observed must be 0 or 1, got {obs}")
            data[5].append(obs)
    if not data[0]:
        raise PanelFormatError(f"{path}:2: panel has no data rows")
    try:
        return PatrolPanel(*(np.asarray(col) for col in data))
    except ValueError as exc:
        raise PanelFormatError(f"{path}: {exc}") from exc


def write_coefficients(coeffs: DeterrenceCoefficients, path: str | Path) -> None:
    Path(path).write_text(json.dumps(coeffs.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def coefficients_from_dict(data: dict) -> DeterrenceCoefficients:
    allowed = {"mean_attractiveness", "gamma", "beta", "eta", "target_intercepts"}
    unknown = set(data) - allowed - {"stderr", "pvalues", "log_likelihood", "n_iter", "n_rows"}
    if unknown:
        raise ValueError(f"unknown coefficient keys: {sorted(unknown)}")
    ti = data.get("target_intercepts")
    return DeterrenceCoefficients(
        mean_attractiveness=float(data["mean_attractiveness"]),
        gamma=float(data["gamma"]),
        beta=float(data["beta"]),
        eta=None if data.get("eta") is None else float(data["eta"]),
        target_intercepts=None if ti is None else {int(k): float(v) for k, v in ti.items()},
    )


# reference coefficient sets (intercept, gamma, beta[, eta]) used as synthetic truths
TABLE_EFFORT = {
    "1 month, 1 month": (-9.285, 1.074, -0.165),
    "3 month, 3 month": (-10.624, 0.685, -0.077),
    "1 year, 1 month": (-9.287, 1.061, -0.217),
    "1 year, 3 month": (-10.629, 0.676, -0.042),
    "1 year, 1 year": (-8.559, 2.159, -0.306),
}
TABLE_NEIGHBORS = {
    "3x3": (-10.633, 0.687, -0.098, 0.696),
    "5x5": (-10.636, 0.688, -0.097, 0.392),
    "7x7": (-10.632, 0.688, -0.097, 0.518),
}
