"""Two-player zero-sum matrix games.

The row player (the defender) maximizes ``x^T A y``; the column player
minimizes it.  Equilibria come from a dense tableau simplex applied to the
usual positive-shift LP pair, with support enumeration available as an
independent cross-check on small games.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PIVOT_TOL = 1e-12


class NashSolverError(RuntimeError):
    """The LP solver failed; the message carries the offending matrix."""


@dataclass(frozen=True)
class MixedStrategy:
    probabilities: np.ndarray

    def __post_init__(self) -> None:
        p = np.asarray(self.probabilities, dtype=np.float64)
        if p.ndim != 1 or p.size == 0:
            raise ValueError("mixed strategy must be a nonempty vector")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("mixed strategy must be nonnegative and sum to 1")
        p.setflags(write=False)
        object.__setattr__(self, "probabilities", p)

    def __len__(self) -> int:
        return self.probabilities.size

    @classmethod
    def pure(cls, index: int, size: int) -> "MixedStrategy":
        p = np.zeros(size)
        p[index] = 1.0
        return cls(p)

    def support(self, tol: float = 1e-12) -> list[int]:
        return [i for i, v in enumerate(self.probabilities) if v > tol]

    def pairs(self, tol: float = 1e-12) -> list[tuple[int, float]]:
        return [(i, float(self.probabilities[i])) for i in self.support(tol)]


def _simplex_max(A: np.ndarray, b: np.ndarray, c: np.ndarray, max_iter: int = 10_000):
    """Maximize ``c.x`` s.t. ``A x <= b``, ``x >= 0`` with ``b >= 0``.

    Returns the primal solution, the dual solution (prices of the ``<=``
    rows) and the optimal objective.  Bland's rule prevents cycling.
    """
    m, n = A.shape
    tab = np.zeros((m + 1, n + m + 1))
    tab[:m, :n] = A
    tab[:m, n:n + m] = np.eye(m)
    tab[:m, -1] = b
    tab[m, :n] = -c
    basis = list(range(n, n + m))
    for _ in range(max_iter):
        entering = next((j for j in range(n + m) if tab[m, j] < -PIVOT_TOL), None)
        if entering is None:
            break
        col = tab[:m, entering]
        ratios = np.full(m, np.inf)
        pos = col > PIVOT_TOL
        ratios[pos] = tab[:m, -1][pos] / col[pos]
        if not np.any(pos):
            raise NashSolverError("LP is unbounded")
        best = ratios.min()
        # Bland: among minimum-ratio rows take the smallest basic variable index
        ties = [i for i in range(m) if pos[i] and ratios[i] <= best + 1e-12 * max(1.0, abs(best))]
        leaving = min(ties, key=lambda i: basis[i])
        tab[leaving] /= tab[leaving, entering]
        for i in range(m + 1):
            if i != leaving and tab[i, entering] != 0.0:
                tab[i] -= tab[i, entering] * tab[leaving]
        basis[leaving] = entering
    else:
        raise NashSolverError("simplex iteration limit reached")
    x = np.zeros(n + m)
    for i, var in enumerate(basis):
        x[var] = tab[i, -1]
    return x[:n], tab[m, n:n + m].copy(), tab[m, -1]


def _clean(p: np.ndarray) -> np.ndarray:
    p = np.where(p < 0, 0.0, p)
    total = p.sum()
    if not total > 0:
        raise NashSolverError("degenerate LP solution (zero mass)")
    return p / total


def solve_zero_sum(matrix) -> tuple[MixedStrategy, MixedStrategy, float]:
    """Mixed Nash equilibrium ``(row, col, value)`` of a zero-sum game."""
    A = np.asarray(matrix, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] < 1 or A.shape[1] < 1:
        raise ValueError(f"payoff matrix must be 2-D and nonempty, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError("payoff matrix entries must be finite")
    shift = 1.0 - A.min()
    P = A + shift
    m, n = P.shape
    try:
        q, u, total = _simplex_max(P, np.ones(m), np.ones(n))
        y = _clean(q)
        x = _clean(u)
    except NashSolverError as exc:
        raise NashSolverError(f"{exc}; matrix=\n{np.array2string(A, precision=17)}") from exc
    if not total > 0:
        raise NashSolverError(f"non-positive LP objective; matrix=\n{np.array2string(A, precision=17)}")
    # report the value certified by the returned strategies
    lower = float((x @ A).min())
    upper = float((A @ y).max())
    value = 0.5 * (lower + upper)
    return MixedStrategy(x), MixedStrategy(y), value


def equilibrium_gap(matrix, row: MixedStrategy, col: MixedStrategy, value: float) -> float:
    """Largest violation of ``min_j (x^T A)_j >= v`` and ``max_i (A y)_i <= v``."""
    A = np.asarray(matrix, dtype=np.float64)
    x, y = row.probabilities, col.probabilities
    return float(max(value - (x @ A).min(), (A @ y).max() - value, 0.0))


def support_enumeration(matrix, tol: float = 1e-9) -> tuple[MixedStrategy, MixedStrategy, float]:
    """Brute-force equilibrium search over all support pairs (small games only)."""
    A = np.asarray(matrix, dtype=np.float64)
    m, n = A.shape
    if m > 8 or n > 8:
        raise ValueError("support enumeration is limited to games of at most 8x8")
    pairs = [(k, k) for k in range(1, min(m, n) + 1)]
    pairs += [(k, l) for k in range(1, m + 1) for l in range(1, n + 1) if k != l]
    for k, l in pairs:
        for rows in itertools.combinations(range(m), k):
            for cols in itertools.combinations(range(n), l):
                sol = _indifference(A, rows, cols, tol)
                if sol is not None:
                    return sol
    raise NashSolverError(f"support enumeration found no equilibrium; matrix=\n{A}")


def _solve_indifferent(sub: np.ndarray) -> np.ndarray | None:
    """Weights ``w >= 0`` summing to 1 making ``sub.T w`` constant; returns ``[w, v]``."""
    k, l = sub.shape
    lhs = np.zeros((l + 1, k + 1))
    lhs[:l, :k] = sub.T
    lhs[:l, k] = -1.0
    lhs[l, :k] = 1.0
    rhs = np.zeros(l + 1)
    rhs[l] = 1.0
    if k == l:
        try:
            return np.linalg.solve(lhs, rhs)
        except np.linalg.LinAlgError:
            return None
    sol, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
    if np.max(np.abs(lhs @ sol - rhs)) > 1e-10:
        return None
    return sol


def _indifference(A, rows, cols, tol):
    m, n = A.shape
    sub = A[np.ix_(rows, cols)]
    xs = _solve_indifferent(sub)
    ys = _solve_indifferent(-sub.T)
    if xs is None or ys is None:
        return None
    x_sub, v = xs[:-1], xs[-1]
    y_sub = ys[:-1]
    if np.any(x_sub < -tol) or np.any(y_sub < -tol):
        return None
    x = np.zeros(m)
    y = np.zeros(n)
    x[list(rows)] = np.clip(x_sub, 0, None)
    y[list(cols)] = np.clip(y_sub, 0, None)
    x /= x.sum()
    y /= y.sum()
    if (x @ A).min() < v - tol or (A @ y).max() > v + tol:
        return None
    return MixedStrategy(x), MixedStrategy(y), float(v)


def best_response_value(matrix, mixed: MixedStrategy, side: str) -> tuple[int, float]:
    """Best pure reply to the opponent's mixture (lowest index on ties).

    ``side="row"``: ``mixed`` is over columns, maximize ``A y``.
    ``side="col"``: ``mixed`` is over rows, minimize ``x^T A``.
    """
    A = np.asarray(matrix, dtype=np.float64)
    p = mixed.probabilities
    if side == "row":
        if p.size != A.shape[1]:
            raise ValueError(f"column mixture has {p.size} entries, matrix has {A.shape[1]} columns")
        vals = A @ p
        idx = int(np.argmax(vals))
    elif side == "col":
        if p.size != A.shape[0]:
            raise ValueError(f"row mixture has {p.size} entries, matrix has {A.shape[0]} rows")
        vals = p @ A
        idx = int(np.argmin(vals))
    else:
        raise ValueError(f"side must be 'row' or 'col', got {side!r}")
    return idx, float(vals[idx])


def write_matrix_csv(path: str | Path, matrix) -> None:
    A = np.asarray(matrix, dtype=np.float64)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["row"] + [f"c{j}" for j in range(A.shape[1])])
        for i, row in enumerate(A):
            writer.writerow([i] + [repr(float(v)) for v in row])


def read_matrix_csv(path: str | Path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ValueError(f"{path}: matrix CSV needs a header and at least one row")
    return np.array([[float(v) for v in row[1:]] for row in rows[1:] if row], dtype=np.float64)


def format_equilibrium(mixed: MixedStrategy) -> str:
    return " ".join(f"({i}, {p:.6f})" for i, p in mixed.pairs())
