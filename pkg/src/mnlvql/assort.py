"""Size-capped assortment optimization under MNL choice.

Given an outside option with weight ``w0`` and value ``f0`` and items with
weights ``w_a > 0`` and values ``f_a``, find the set ``S`` with
``1 <= |S| <= max_items`` maximizing

    (w0 f0 + sum_{a in S} w_a f_a) / (w0 + sum_{a in S} w_a).

Three exact solvers are provided (enumeration, parametric bisection, and the
Charnes-Cooper LP), plus a vectorized parametric solver for batches of
instances, used by the planners.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numba
import numpy as np

from .numerics import bisect

BRUTEFORCE_MAX_ITEMS = 20
LP_MAX_ITEMS = 64
BISECTION_TOL = 1e-10
LP_SUPPORT_TOL = 1e-9
TIE_TOL = 1e-12


class TooManyItems(ValueError):
    pass


class Unbounded(RuntimeError):
    pass


class Infeasible(RuntimeError):
    pass


@dataclass(frozen=True)
class AssortmentInstance:
    weights: np.ndarray
    values: np.ndarray
    max_items: int
    outside_weight: float = 1.0
    outside_value: float = 0.0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "values", v)
        if w.ndim != 1 or w.shape != v.shape or len(w) == 0:
            raise ValueError("weights and values must be non-empty 1-d arrays of equal length")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ValueError("weights must be strictly positive and finite")
        if not (self.outside_weight > 0):
            raise ValueError("outside weight must be positive")
        if self.max_items < 1:
            raise ValueError("max_items must be at least 1")

    @property
    def n_items(self) -> int:
        return len(self.weights)

    def value(self, chosen) -> float:
        idx = np.asarray(sorted(chosen), dtype=int)
        num = self.outside_weight * self.outside_value + self.weights[idx] @ self.values[idx]
        den = self.outside_weight + self.weights[idx].sum()
        return float(num / den)


@dataclass(frozen=True)
class AssortmentSolution:
    chosen: tuple
    value: float


def _solution(inst: AssortmentInstance, chosen) -> AssortmentSolution:
    chosen = tuple(sorted(int(i) for i in chosen))
    return AssortmentSolution(chosen, inst.value(chosen))


def solve_bruteforce(inst: AssortmentInstance) -> AssortmentSolution:
    """Enumerate every admissible set; ties go to the lexicographically smallest."""
    n = inst.n_items
    if n > BRUTEFORCE_MAX_ITEMS:
        raise TooManyItems(f"{n} items exceeds the enumeration guard of {BRUTEFORCE_MAX_ITEMS}")
    best, best_val = None, -math.inf
    for size in range(1, min(inst.max_items, n) + 1):
        for subset in itertools.combinations(range(n), size):
            val = inst.value(subset)
            if val > best_val + TIE_TOL or (abs(val - best_val) <= TIE_TOL and subset < best):
                best, best_val = subset, max(val, best_val)
    return _solution(inst, best)


def _parametric_set(inst: AssortmentInstance, t: float) -> tuple:
    """Maximizer of ``sum_{a in S} w_a (f_a - t)`` over admissible ``S``."""
    scores = inst.weights * (inst.values - t)
    order = np.argsort(-scores, kind="stable")
    top = order[: inst.max_items]
    keep = top[scores[top] > 0]
    if len(keep) == 0:
        keep = top[:1]
    return tuple(int(i) for i in keep)


def _parametric_gap(inst: AssortmentInstance, t: float) -> float:
    s = np.asarray(_parametric_set(inst, t), dtype=int)
    return float(
        inst.outside_weight * (inst.outside_value - t)
        + (inst.weights[s] * (inst.values[s] - t)).sum()
    )


def solve_bisection(inst: AssortmentInstance) -> AssortmentSolution:
    """Parametric search for the root of the non-increasing gap function.

    ``g(t) = w0 (f0 - t) + max_S sum_{a in S} w_a (f_a - t)`` vanishes exactly at
    the optimal objective value. The set realized at the lower end of the final
    bracket attains a value within the bracket width of the optimum.
    """
    vals = np.append(inst.values, inst.outside_value)
    lo, hi = float(vals.min()), float(vals.max())
    if hi - lo <= BISECTION_TOL:
        return _solution(inst, _parametric_set(inst, lo))
    g = lambda t: _parametric_gap(inst, t)
    # g(lo) >= 0 >= g(hi) always; the bracket only degenerates at an endpoint root
    if g(lo) <= 0:
        root = lo
    elif g(hi) >= 0:
        root = hi
    else:
        root = bisect(g, lo, hi, BISECTION_TOL)
    candidates = {_parametric_set(inst, max(lo, root - BISECTION_TOL)), _parametric_set(inst, root)}
    best = max(sorted(candidates), key=lambda s: inst.value(s))
    return _solution(inst, best)


# --------------------------------------------------------------------------
# Charnes-Cooper linear program
# --------------------------------------------------------------------------


def _simplex_max(c: np.ndarray, a_ub: np.ndarray, b_ub: np.ndarray,
                 a_eq: np.ndarray, b_eq: np.ndarray, max_iter: int = 10_000) -> np.ndarray:
    """Maximize ``c x`` s.t. ``a_ub x <= b_ub``, ``a_eq x = b_eq``, ``x >= 0``.

    Dense two-phase tableau simplex with Bland's rule. Requires ``b_ub >= 0``
    and ``b_eq >= 0`` (true for every LP built in this module).
    """
    n = len(c)
    m_ub, m_eq = len(b_ub), len(b_eq)
    m = m_ub + m_eq
    # columns: x (n) | slacks (m_ub) | artificials (m_eq) | rhs
    n_cols = n + m_ub + m_eq
    tab = np.zeros((m + 1, n_cols + 1))
    tab[:m_ub, :n] = a_ub
    tab[:m_ub, n:n + m_ub] = np.eye(m_ub)
    tab[:m_ub, -1] = b_ub
    tab[m_ub:m, :n] = a_eq
    tab[m_ub:m, n + m_ub:n_cols] = np.eye(m_eq)
    tab[m_ub:m, -1] = b_eq
    basis = list(range(n, n + m_ub)) + list(range(n + m_ub, n_cols))

    def pivot(row: int, col: int) -> None:
        tab[row] /= tab[row, col]
        for r in range(m + 1):
            if r != row and tab[r, col] != 0.0:
                tab[r] -= tab[r, col] * tab[row]
        basis[row] = col

    def run(allowed: int) -> None:
        for _ in range(max_iter):
            # objective row holds reduced costs of a minimization
            col = next((j for j in range(allowed) if tab[m, j] < -1e-12), None)
            if col is None:
                return
            column = tab[:m, col]
            ratios = [
                (tab[r, -1] / column[r], basis[r], r)
                for r in range(m) if column[r] > 1e-12
            ]
            if not ratios:
                raise Unbounded("LP is unbounded")
            best = min(x[0] for x in ratios)
            # Bland: among ties, leave on the smallest basic index
            row = min((x for x in ratios if x[0] <= best + 1e-12), key=lambda x: x[1])[2]
            pivot(row, col)
        raise RuntimeError("simplex exceeded iteration cap")

    # phase 1: minimize the sum of artificials
    tab[m, :] = 0.0
    tab[m, n + m_ub:n_cols] = 1.0
    for r in range(m_ub, m):
        tab[m] -= tab[r]
    run(n_cols)
    if tab[m, -1] < -1e-9:
        raise Infeasible("LP is infeasible")
    # drive any zero-level artificial out of the basis
    for r in range(m):
        if basis[r] >= n + m_ub:
            col = next((j for j in range(n + m_ub) if abs(tab[r, j]) > 1e-12), None)
            if col is not None:
                pivot(r, col)
    # phase 2: minimize -c over the original and slack columns
    tab[m, :] = 0.0
    tab[m, :n] = -c
    for r in range(m):
        if basis[r] < n and tab[m, basis[r]] != 0.0:
            tab[m] -= tab[m, basis[r]] * tab[r]
    run(n + m_ub)
    x = np.zeros(n_cols)
    for r in range(m):
        x[basis[r]] = tab[r, -1]
    return x[:n]


def charnes_cooper_lp(inst: AssortmentInstance):
    """Build the linearized program in variables ``(y_1..y_N, t)``.

    Constraints: ``sum_a w_a y_a + w0 t = 1``, ``sum_a y_a <= (max_items) t``,
    and ``y_a <= t`` (the image of ``x_a <= 1``).
    """
    n = inst.n_items
    c = np.append(inst.values * inst.weights, inst.outside_value * inst.outside_weight)
    a_eq = np.append(inst.weights, inst.outside_weight)[None, :]
    b_eq = np.array([1.0])
    cap = np.append(np.ones(n), -float(inst.max_items))[None, :]
    upper = np.hstack([np.eye(n), -np.ones((n, 1))])
    a_ub = np.vstack([cap, upper])
    b_ub = np.zeros(n + 1)
    return c, a_ub, b_ub, a_eq, b_eq


def solve_charnes_cooper(inst: AssortmentInstance) -> AssortmentSolution:
    """Solve the linearized fractional relaxation and read off its support."""
    if inst.n_items > LP_MAX_ITEMS:
        raise TooManyItems(f"{inst.n_items} items exceeds the LP guard of {LP_MAX_ITEMS}")
    c, a_ub, b_ub, a_eq, b_eq = charnes_cooper_lp(inst)
    sol = _simplex_max(c, a_ub, b_ub, a_eq, b_eq)
    y, t = sol[:-1], sol[-1]
    if t <= 0:
        raise Infeasible("degenerate LP solution with t = 0")
    chosen = [i for i in range(inst.n_items) if y[i] > LP_SUPPORT_TOL]
    if not chosen:
        # only reachable when the outside option beats every item; then every
        # item drags the average down and the optimum is a singleton
        singles = [inst.value((i,)) for i in range(inst.n_items)]
        chosen = [int(np.argmax(singles))]
    return _solution(inst, chosen)


# --------------------------------------------------------------------------
# Batched parametric solver
# --------------------------------------------------------------------------


@numba.njit(cache=True)
def _dinkelbach_kernel(w0, f0, weights, values, allowed, k, max_iter, chosen, best):
    b_count, n = weights.shape
    scores = np.empty(n)
    order = np.empty(k, dtype=np.int64)
    taken = np.empty(n, dtype=np.bool_)
    for b in range(b_count):
        t = -np.inf
        converged = False
        for _ in range(max_iter):
            for i in range(n):
                taken[i] = False
                if not allowed[b, i]:
                    scores[i] = -np.inf
                elif t == -np.inf:
                    scores[i] = weights[b, i] * values[b, i]
                else:
                    scores[i] = weights[b, i] * (values[b, i] - t)
            # top-k by score, lower index first among equal scores;
            # positive scores only, except that the best item is always kept
            size = 0
            num = w0[b] * f0[b]
            den = w0[b]
            for r in range(k):
                pick = -1
                for i in range(n):
                    if not taken[i] and (pick < 0 or scores[i] > scores[pick]):
                        pick = i
                if pick < 0 or scores[pick] == -np.inf or (r > 0 and scores[pick] <= 0.0):
                    break
                taken[pick] = True
                order[size] = pick
                size += 1
                num += weights[b, pick] * values[b, pick]
                den += weights[b, pick]
            t_new = num / den
            if not t_new > t + 1e-15:
                converged = True
                break
            t = t_new
            for i in range(n):
                chosen[b, i] = False
            for r in range(size):
                chosen[b, order[r]] = True
        if not converged:
            return False
        best[b] = t
    return True


def solve_batch(w0, f0, weights, values, max_items: int, mask=None, max_iter: int = 100):
    """Solve many instances at once by Dinkelbach iteration.

    Parameters
    ----------
    w0, f0 : array_like, shape (B,)
        Outside-option weights and values.
    weights, values : ndarray, shape (B, N)
        Item weights (positive) and values.
    max_items : int
        Size cap on the real items of a set.
    mask : ndarray of bool, shape (B, N), optional
        Items allowed in each instance. Every row needs at least one.

    Returns
    -------
    chosen : ndarray of bool, shape (B, N)
    value : ndarray, shape (B,)

    Notes
    -----
    Each iteration picks the admissible set maximizing
    ``sum_{a in S} w_a (f_a - t)`` at the current value ``t`` and moves ``t`` to
    that set's objective. Values increase strictly until a fixed point, which
    is the optimum; finitely many sets bound the iteration count. Among equal
    parametric scores the lower index wins.
    """
    weights = np.ascontiguousarray(weights, dtype=float)
    values = np.ascontiguousarray(values, dtype=float)
    b, n = weights.shape
    w0 = np.full(b, float(w0)) if np.ndim(w0) == 0 else np.ascontiguousarray(w0, dtype=float)
    f0 = np.full(b, float(f0)) if np.ndim(f0) == 0 else np.ascontiguousarray(f0, dtype=float)
    allowed = np.ones((b, n), dtype=bool) if mask is None else np.ascontiguousarray(mask, dtype=bool)
    chosen = np.zeros((b, n), dtype=bool)
    best = np.empty(b)
    if not _dinkelbach_kernel(w0, f0, weights, values, allowed, min(max_items, n), max_iter,
                              chosen, best):
        raise RuntimeError("parametric iteration did not converge")
    return chosen, best


def enumerate_assortments(n_items: int, max_items: int) -> np.ndarray:
    """All admissible sets as a padded index array (|A|, max_items), -1 = unused."""
    rows = []
    for size in range(1, min(max_items, n_items) + 1):
        for subset in itertools.combinations(range(n_items), size):
            rows.append(subset + (-1,) * (max_items - size))
    return np.array(rows, dtype=int).reshape(-1, max_items)


def count_assortments(n_items: int, max_items: int) -> int:
    return sum(math.comb(n_items, m) for m in range(1, min(max_items, n_items) + 1))
