"""Small dense symmetric linear algebra and scalar root finding.

Every matrix here is tiny (dimension well under 100), so factorizations are
recomputed per call instead of being updated incrementally. LAPACK routines
are called directly: at these sizes the numpy wrappers cost several times more
than the arithmetic.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np
from scipy.linalg import lapack

# Tolerances shared by the whole package.
SYMMETRY_RTOL = 1e-12
SOLVE_RTOL = 1e-10
PROJECTION_TOL = 1e-9
PROJECTION_MAX_ITER = 200
BISECT_MAX_ITER = 500


class NotPositiveDefinite(np.linalg.LinAlgError):
    """Raised when a Cholesky factorization fails."""


class NoConvergence(RuntimeError):
    """Raised when an iterative routine exceeds its iteration cap."""


class BadBracket(ValueError):
    """Raised when a root-finding bracket does not change sign."""


def cholesky(m: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of ``m``; raises NotPositiveDefinite on failure."""
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    low, info = lapack.dpotrf(m, lower=1, clean=1)
    if info != 0 or not math.isfinite(low.sum()):
        raise NotPositiveDefinite(f"Cholesky factorization failed (info={info})")
    return low


def cholesky_solve(m: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``m @ x = b`` for symmetric positive definite ``m``.

    ``b`` may be a vector or a matrix of right-hand sides (one per column).
    """
    m = np.asarray(m, dtype=float)
    b = np.asarray(b, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {m.shape} vs {b.shape}")
    x, _ = lapack.dpotrs(cholesky(m), b, lower=1)
    return x


def spd_inverse(m: np.ndarray) -> np.ndarray:
    """Explicit inverse of a positive definite matrix, exactly symmetric."""
    inv, info = lapack.dpotri(cholesky(m), lower=1)
    if info != 0:
        raise NotPositiveDefinite(f"inversion failed (info={info})")
    # the strict upper triangle is zero (cleaned factor), so mirror and halve the diagonal
    full = inv + inv.T
    full.flat[:: inv.shape[0] + 1] *= 0.5
    return full


def _forward(low: np.ndarray, b: np.ndarray) -> np.ndarray:
    x, _ = lapack.dtrtrs(low, b, lower=1)
    return x


def metric_norm(m: np.ndarray, x: np.ndarray) -> float:
    """Return ``sqrt(x' m x)`` for positive definite ``m``."""
    low = cholesky(np.asarray(m, dtype=float))
    return float(np.linalg.norm(low.T @ np.asarray(x, dtype=float)))


def inverse_metric_norm(m: np.ndarray, x: np.ndarray) -> float:
    """Return ``sqrt(x' m^{-1} x)`` via a triangular solve."""
    low = cholesky(np.asarray(m, dtype=float))
    return float(np.linalg.norm(_forward(low, np.asarray(x, dtype=float))))


def inverse_metric_norms(m: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Row-wise ``sqrt(x' m^{-1} x)`` for a stack of vectors ``xs`` (..., d)."""
    xs = np.asarray(xs, dtype=float)
    low = cholesky(np.asarray(m, dtype=float))
    z = _forward(low, np.ascontiguousarray(xs.reshape(-1, xs.shape[-1]).T))
    return np.sqrt(np.einsum("ij,ij->j", z, z)).reshape(xs.shape[:-1])


def project_to_ball_in_metric(
    center: np.ndarray, metric: np.ndarray, radius: float
) -> np.ndarray:
    """Closest point of the Euclidean ball ``{||t|| <= radius}`` in the ``metric`` norm.

    Inside the ball the centre is returned unchanged. Otherwise the KKT point
    ``t(mu) = (metric + mu I)^{-1} metric center`` is located by a bracketing
    search on the multiplier ``mu >= 0`` until ``| ||t(mu)|| - radius | <= 1e-9``.
    Each step tries a Newton update on ``1/||t(mu)|| - 1/radius`` (nearly
    linear in ``mu``) and falls back to bisection when it leaves the bracket.
    """
    center = np.asarray(center, dtype=float)
    if radius <= 0:
        raise ValueError("radius must be positive")
    if np.linalg.norm(center) <= radius:
        return center.copy()
    metric = np.asarray(metric, dtype=float)
    cholesky(metric)
    # t(mu) in the eigenbasis of the metric is an elementwise rescaling
    evals, evecs = np.linalg.eigh(metric)
    lc2 = (evals * (evecs.T @ center)) ** 2

    lo, hi = 0.0, float(evals.max())
    it = 0
    while math.sqrt(np.sum(lc2 / (evals + hi) ** 2)) > radius:
        hi *= 2.0
        it += 1
        if it > PROJECTION_MAX_ITER:
            raise NoConvergence("could not bracket the projection multiplier")
    mu = lo
    for _ in range(PROJECTION_MAX_ITER):
        q = lc2 / (evals + mu) ** 2
        nrm = math.sqrt(q.sum())
        gap = nrm - radius
        if abs(gap) <= PROJECTION_TOL:
            break
        if gap > 0:
            lo = mu
        else:
            hi = mu
        # d||t||/dmu = -sum(q / (evals + mu)) / ||t||
        slope = float(np.sum(q / (evals + mu))) / nrm**3
        step = mu + (1.0 / radius - 1.0 / nrm) / slope if slope > 0 else math.nan
        mu = step if lo < step < hi else 0.5 * (lo + hi)
    else:
        raise NoConvergence("projection search exceeded iteration cap")
    theta = evecs @ (evals * (evecs.T @ center) / (evals + mu))
    nrm = np.linalg.norm(theta)
    if nrm > radius:
        theta *= radius / nrm
    return theta


def bisect(f: Callable[[float], float], lo: float, hi: float, tol: float) -> float:
    """Root of a monotone ``f`` on ``[lo, hi]``, bracketed to width ``tol``."""
    flo, fhi = f(lo), f(hi)
    if flo == 0:
        return lo
    if fhi == 0:
        return hi
    if np.sign(flo) == np.sign(fhi):
        raise BadBracket(f"f({lo})={flo} and f({hi})={fhi} have the same sign")
    for _ in range(BISECT_MAX_ITER):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if fm == 0:
            return mid
        if np.sign(fm) == np.sign(flo):
            lo, flo = mid, fm
        else:
            hi = mid
    else:
        raise NoConvergence("bisection exceeded iteration cap")
    return 0.5 * (lo + hi)
