"""Item-level value estimation for the linear function class.

Values are linear in a state-item feature ``psi`` of dimension ``d_lin``.
Regressions use the ridge design ``rho / (16 d_lin) I + sum psi psi' / w``
where ``w`` is a per-sample variance weight (``sigma_bar**2``, or 1 for the
unweighted fits). The elliptical bonus is ``||psi||_{design^-1} sqrt(beta^2 + rho)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .numerics import cholesky_solve, inverse_metric_norms, spd_inverse

SECOND_MOMENT_CAP = 4.0


class ValueIndex(enum.Enum):
    OPT = 1
    OVER = 2
    UNDER = -2
    SECOND_MOMENT = 0


class SigmaMode(str, enum.Enum):
    SIMPLE = "simple"
    FULL = "full"


def ridge_regularizer(rho: float, d_lin: int) -> float:
    return rho / (16.0 * d_lin)


@dataclass
class LinearValueModel:
    """A fitted linear value estimate with its design matrix and bonus scale."""

    weights: np.ndarray
    design: np.ndarray
    beta: float
    rho: float
    horizon: int = 0
    index_j: ValueIndex = ValueIndex.OPT

    def predict(self, psi: np.ndarray) -> np.ndarray:
        return np.asarray(psi, dtype=float) @ self.weights

    def bonus(self, psi: np.ndarray) -> np.ndarray:
        return elliptical_bonus(self, psi)


def weighted_ridge_fit(features, targets, variances, rho: float, d_lin: int,
                       beta: float = 0.0, **kwargs) -> LinearValueModel:
    """Ridge regression with per-sample weights ``1 / variances``.

    Parameters
    ----------
    features : array_like, shape (n, d_lin)
    targets : array_like, shape (n,)
    variances : array_like, shape (n,)
        Squared weights ``sigma_bar**2``; all must be positive.
    rho : float
        Regularization parameter; the ridge term is ``rho / (16 d_lin)``.
    """
    x = np.asarray(features, dtype=float).reshape(-1, d_lin)
    y = np.asarray(targets, dtype=float).reshape(-1)
    v = np.asarray(variances, dtype=float).reshape(-1)
    if not (len(x) == len(y) == len(v)):
        raise ValueError("features, targets and variances must have equal length")
    if np.any(v <= 0):
        raise ValueError("variances must be positive")
    design = ridge_regularizer(rho, d_lin) * np.eye(d_lin) + (x.T / v) @ x
    weights = cholesky_solve(design, (x.T / v) @ y)
    return LinearValueModel(weights, design, beta, rho, **kwargs)


def elliptical_bonus(model: LinearValueModel, psi: np.ndarray) -> np.ndarray:
    """``||psi||_{design^-1} * sqrt(beta^2 + rho)``, row-wise for stacked ``psi``."""
    return inverse_metric_norms(model.design, psi) * math.sqrt(model.beta**2 + model.rho)


def value_f1(fhat1, bonus1):
    """Optimistic estimate ``min(fhat1 + b1, 1)``, floored at 0."""
    return np.clip(np.asarray(fhat1) + bonus1, 0.0, 1.0)


def value_f2(fhat2, bonus1, bonus2):
    """Overly optimistic estimate ``min(fhat2 + 2 b1 + b2, 1)``, floored at 0."""
    return np.clip(np.asarray(fhat2) + 2.0 * np.asarray(bonus1) + bonus2, 0.0, 1.0)


def value_f_neg2(fhat_neg2, bonus2):
    """Overly pessimistic estimate ``max(fhat_neg2 - b2, 0)``, capped at 1."""
    return np.clip(np.asarray(fhat_neg2) - bonus2, 0.0, 1.0)


def sigma_schedule(ghat_val: float, f_neg2_hat_val: float, d_unit: float,
                   betas: tuple, rho: float, nu: float) -> float:
    """Estimated conditional standard deviation at a visited pair.

    ``sigma^2 = min(4, max(0, ghat - fhat_{-2}^2) + D (sqrt(bbar^2+rho) + sqrt(b2^2+rho)))``
    clamped to ``[nu^2, 4]``.
    """
    beta_bar, beta2 = betas
    ghat = min(max(float(ghat_val), 0.0), SECOND_MOMENT_CAP)
    spread = max(0.0, ghat - float(f_neg2_hat_val) ** 2)
    width = d_unit * (math.sqrt(beta_bar**2 + rho) + math.sqrt(beta2**2 + rho))
    var = min(SECOND_MOMENT_CAP, spread + width)
    var = min(max(var, nu**2), SECOND_MOMENT_CAP)
    return math.sqrt(var)


def sigma_bar_schedule(sigma: float, nu: float, f2_val: float, f_neg2_val: float,
                       d_weighted: float, log_terms: tuple,
                       mode: SigmaMode = SigmaMode.FULL) -> float:
    """Variance upper bound used as the regression weight.

    In SIMPLE mode this is the constant 1.
    """
    if SigmaMode(mode) is SigmaMode.SIMPLE:
        return 1.0
    o, iota = log_terms
    gap = max(0.0, float(f2_val) - float(f_neg2_val))
    return max(
        sigma,
        nu,
        math.sqrt(2.0) * iota * math.sqrt(gap),
        2.0 * (math.sqrt(o) + iota) * math.sqrt(d_weighted),
    )


def information_gain(features, sigma_bars, rho: float, d_lin: int) -> float:
    """Elliptical potential ``sum_k min(1, ||psi_k||^2_{S_{k-1}^-1} / sigma_bar_k^2)``.

    ``S_k = rho/(16 d_lin) I + sum_{tau <= k} psi psi' / sigma_bar^2``.
    """
    x = np.asarray(features, dtype=float).reshape(-1, d_lin)
    s = np.asarray(sigma_bars, dtype=float).reshape(-1)
    if len(x) == 0:
        return 0.0
    # maintain the inverse with Sherman-Morrison; d_lin is small
    inv = np.eye(d_lin) / ridge_regularizer(rho, d_lin)
    total = 0.0
    for psi, sb in zip(x, s):
        z = psi / sb
        iz = inv @ z
        q = float(z @ iz)
        total += min(1.0, q)
        inv -= np.outer(iz, iz) / (1.0 + q)
    return total


def information_gain_bound(n_steps: int, rho: float, d_lin: int, nu: float) -> float:
    """``2 d log(1 + K / (d rho'))`` with ``rho' = rho nu^2 / (16 d)``.

    ``rho'`` is the ridge term measured in units of the largest possible
    squared weighted feature norm ``1 / nu^2``.
    """
    rho_prime = ridge_regularizer(rho, d_lin) * nu**2
    return 2.0 * d_lin * math.log(1.0 + n_steps / (d_lin * rho_prime))


# --------------------------------------------------------------------------
# Sufficient statistics
# --------------------------------------------------------------------------


class RegressionStats:
    """Sufficient statistics of one horizon's data for all value regressions.

    Targets are ``r + V(s')`` for a value table ``V`` over next states, so each
    fit is a linear function of ``V``: for a design ``S`` and weights ``1/w``,

        w_hat = S^-1 (sum psi r / w + sum psi e_{s'}' / w @ V).

    The second-moment fit regresses ``(r + V(s'))^2`` and needs ``sum psi r^2``
    and ``sum psi r e_{s'}'`` as well. Fits equal a from-scratch refit on all
    samples while costing O(d_lin^2 n_states) instead of O(n_samples).
    """

    def __init__(self, d_lin: int, n_states: int, rho: float):
        self.d_lin, self.n_states, self.rho = d_lin, n_states, rho
        reg = ridge_regularizer(rho, d_lin) * np.eye(d_lin)
        self.design_w = reg.copy()
        self.design_u = reg.copy()
        self.b_w = np.zeros(d_lin)
        self.b_u = np.zeros(d_lin)
        self.b_r2 = np.zeros(d_lin)
        self.c_w = np.zeros((d_lin, n_states))
        self.c_u = np.zeros((d_lin, n_states))
        self.d_u = np.zeros((d_lin, n_states))
        self.count = 0
        self._inv_w = None
        self._inv_u = None

    def add(self, psi: np.ndarray, reward: float, next_state: int, sigma_bar: float) -> None:
        psi = np.asarray(psi, dtype=float)
        w = 1.0 / sigma_bar**2
        outer = np.outer(psi, psi)
        self.design_w += w * outer
        self.design_u += outer
        self.b_w += w * reward * psi
        self.b_u += reward * psi
        self.b_r2 += reward**2 * psi
        self.c_w[:, next_state] += w * psi
        self.c_u[:, next_state] += psi
        self.d_u[:, next_state] += reward * psi
        self.count += 1
        self._inv_w = self._inv_u = None

    @property
    def inv_weighted(self) -> np.ndarray:
        """Inverse weighted design, cached until the next ``add``."""
        if self._inv_w is None:
            self._inv_w = spd_inverse(self.design_w)
        return self._inv_w

    @property
    def inv_unweighted(self) -> np.ndarray:
        if self._inv_u is None:
            self._inv_u = spd_inverse(self.design_u)
        return self._inv_u

    def fit_weighted(self, v_next: np.ndarray) -> np.ndarray:
        return self.inv_weighted @ (self.b_w + self.c_w @ v_next)

    def fit_unweighted(self, v_next: np.ndarray) -> np.ndarray:
        return self.inv_unweighted @ (self.b_u + self.c_u @ v_next)

    def fit_second_moment(self, v_next: np.ndarray) -> np.ndarray:
        return self.inv_unweighted @ (self.b_r2 + 2.0 * self.d_u @ v_next + self.c_u @ v_next**2)


def quad_norms(inv: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Row-wise ``sqrt(x' inv x)`` given an explicit inverse."""
    q = ((xs @ inv) * xs).sum(axis=1)
    return np.sqrt(np.maximum(q, 0.0))


# --------------------------------------------------------------------------
# Parameter schedule
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearSchedule:
    """Confidence radii, log factors and switch threshold for the linear class.

    Covering numbers of the linear class with weight norm ``weight_bound`` at
    scale ``eps_c = 1/(8HK)``: ``log N = d log(B / eps_c)``. The bonus class is
    indexed by a ``d x d`` matrix, giving
    ``log N_b = d^2 log(1 + d sqrt(d) beta1 / (rho eps_c^2))``.
    """

    n_episodes: int
    horizon: int
    d_lin: int
    delta: float = 0.1
    rho: float = 1.0
    value_bound: float = 1.0
    weight_bound: float | None = None
    beta_scale: float = 1.0
    u_scale: float = 1.0

    @property
    def nu(self) -> float:
        return math.sqrt(1.0 / (self.n_episodes * self.horizon))

    @property
    def delta_kh(self) -> float:
        return self.delta / ((self.n_episodes + 1) * (self.horizon + 1))

    @property
    def eps_c(self) -> float:
        return 1.0 / (8.0 * self.horizon * self.n_episodes)

    @property
    def log_cover(self) -> float:
        bound = self.weight_bound if self.weight_bound is not None else 2.0 * math.sqrt(self.d_lin)
        return self.d_lin * math.log(max(bound / self.eps_c, math.e))

    @property
    def log_cover_bonus(self) -> float:
        d = self.d_lin
        return d * d * math.log(1.0 + d * math.sqrt(d) * self._beta1_raw() / (self.rho * self.eps_c**2))

    def _grid_logs(self) -> float:
        k, lb, nu = self.n_episodes, self.value_bound, self.nu
        return math.log(2.0 * math.log(4.0 * lb * k / nu) + 2.0) + math.log(
            math.log(8.0 * lb / nu**2) + 2.0
        )

    def _beta1_raw(self) -> float:
        k, h = self.n_episodes, self.horizon
        log_arg = (
            2.0 * self.log_cover + math.log((k + 1) * (h + 1)) + self._grid_logs()
            - math.log(self.delta)
        )
        return math.sqrt((6.0 * math.sqrt(self.rho) + 156.0) * log_arg)

    def _iota_prime(self, c: float) -> float:
        k, lb = self.n_episodes, self.value_bound
        log_arg = (
            self.log_cover + self.log_cover_bonus
            + math.log(2.0 * math.log(c * lb * k) + 2.0)
            + math.log(math.log(c * lb) + 2.0)
            - math.log(self.delta_kh)
        )
        return math.sqrt(2.0 * log_arg)

    @property
    def beta1(self) -> float:
        return self.beta_scale * self._beta1_raw()

    @property
    def beta2(self) -> float:
        lb = self.value_bound
        return self.beta_scale * math.sqrt(2.0 * (24.0 * lb + 21.0)) * self._iota_prime(18.0)

    @property
    def beta_bar(self) -> float:
        lb = self.value_bound
        return self.beta_scale * math.sqrt(8.0 * (11.0 * lb + 9.0)) * self._iota_prime(32.0)

    @property
    def o_term(self) -> float:
        return math.sqrt(2.0 * self.log_cover + self._grid_logs() - math.log(self.delta_kh))

    @property
    def iota(self) -> float:
        return 3.0 * math.sqrt(
            self.log_cover + self.log_cover_bonus + self._grid_logs() - math.log(self.delta_kh)
        )

    @property
    def d_nu(self) -> float:
        """Elliptical-potential surrogate for the generalized Eluder dimension."""
        return self.d_lin * math.log(1.0 + self.n_episodes / (self.nu**2 * self.rho))

    def u_k(self, k: int, d_mnl: int, max_assortment: int, eps_b: float = 0.0) -> float:
        """Switch threshold for episode ``k``."""
        kk, hh = self.n_episodes, self.horizon
        log_n = self.log_cover + math.log(kk * hh / (self.nu * self.delta))
        log_nb = log_n + self.log_cover_bonus
        val = (
            math.sqrt(log_n) * (log_nb * hh**2.5 * math.sqrt(self.d_nu) + math.sqrt(k) * hh * eps_b)
            + d_mnl * hh**2.5 * math.log(max(kk, 2)) * math.log(max_assortment)
            * math.sqrt(log_nb)
        )
        return self.u_scale * val / math.sqrt(k)
