"""Multinomial-logit preference model with an online mirror descent estimator.

Conventions
-----------
Item features are passed as an ``(n, d)`` array holding the non-outside items
of an offered assortment. The outside option always has the zero feature, so
its utility is 0. Probability vectors have length ``n + 1`` with the outside
option at position ``OUTSIDE == 0`` and item ``i`` at position ``i + 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .numerics import cholesky_solve, inverse_metric_norms, project_to_ball_in_metric

OUTSIDE = 0
UTILITY_CLAMP = 30.0


@dataclass(frozen=True)
class MnlConfig:
    """Hyper-parameters of the MNL estimator.

    ``eta`` and ``lam`` default to the step size ``log(M+1)/2 + B + 1`` and the
    regulariser ``84 sqrt(2) d eta``. ``radius_scale`` multiplies the
    confidence radius (the theoretical one is very conservative).
    """

    d: int
    max_assortment: int
    bound: float = 1.0
    delta: float = 0.1
    eta: float | None = None
    lam: float | None = None
    radius_scale: float = 1.0

    def __post_init__(self):
        if self.eta is None:
            object.__setattr__(
                self, "eta", 0.5 * math.log(self.max_assortment + 1) + self.bound + 1.0
            )
        if self.lam is None:
            object.__setattr__(self, "lam", 84.0 * math.sqrt(2.0) * self.d * self.eta)


@dataclass(frozen=True)
class ChoiceObservation:
    item_features: np.ndarray
    chosen: int  # OUTSIDE or 1 + position in item_features


@dataclass(frozen=True)
class MnlParameterState:
    config: MnlConfig
    theta: np.ndarray
    hessian_accum: np.ndarray
    horizon: int = 0
    episode_count: int = 0

    @classmethod
    def initial(cls, config: MnlConfig, horizon: int = 0) -> "MnlParameterState":
        return cls(
            config=config,
            theta=np.zeros(config.d),
            hessian_accum=config.lam * np.eye(config.d),
            horizon=horizon,
        )

    @property
    def alpha(self) -> float:
        """Scaled confidence radius for the current estimate."""
        return self.config.radius_scale * confidence_radius(self)


def _shifted_exp(u: np.ndarray) -> np.ndarray:
    """exp of clamped utilities with the outside option (utility 0) prepended."""
    u = np.clip(u, -UTILITY_CLAMP, UTILITY_CLAMP)
    full = np.concatenate([np.zeros(u.shape[:-1] + (1,)), u], axis=-1)
    full = full - full.max(axis=-1, keepdims=True)
    return np.exp(full)


def probs_from_utilities(u: np.ndarray) -> np.ndarray:
    """MNL probabilities for item utilities ``u`` (..., n); outside prepended."""
    e = _shifted_exp(np.asarray(u, dtype=float))
    return e / e.sum(axis=-1, keepdims=True)


def choice_probs(theta: np.ndarray, items: np.ndarray) -> np.ndarray:
    """Choice probabilities over ``{outside} + items`` under parameter ``theta``."""
    items = np.asarray(items, dtype=float).reshape(-1, len(theta))
    return probs_from_utilities(items @ theta)


def mnl_loss(theta: np.ndarray, obs: ChoiceObservation) -> float:
    """Negative log-likelihood of the observed choice."""
    items = np.asarray(obs.item_features, dtype=float).reshape(-1, len(theta))
    u = np.clip(items @ theta, -UTILITY_CLAMP, UTILITY_CLAMP)
    full = np.concatenate([[0.0], u])
    top = full.max()
    lse = top + math.log(np.exp(full - top).sum())
    return float(lse - full[obs.chosen])


def _grad_hess(theta: np.ndarray, obs: ChoiceObservation, want_grad: bool = True,
               want_hess: bool = True):
    items = obs.item_features
    if items.ndim != 2:
        items = np.asarray(items, dtype=float).reshape(-1, len(theta))
    if len(items) == 0:
        zero = np.zeros(len(theta))
        return zero, np.zeros((len(theta), len(theta)))
    u = np.clip(items @ theta, -UTILITY_CLAMP, UTILITY_CLAMP)
    top = max(0.0, float(u.max()))
    e = np.exp(u - top)
    p = e / (math.exp(-top) + e.sum())
    mean = p @ items
    grad = hess = None
    if want_grad:
        grad = mean.copy()
        if obs.chosen != OUTSIDE:
            grad -= items[obs.chosen - 1]
    if want_hess:
        hess = (items.T * p) @ items - np.outer(mean, mean)
        hess = 0.5 * (hess + hess.T)
    return grad, hess


def mnl_grad(theta: np.ndarray, obs: ChoiceObservation) -> np.ndarray:
    """Gradient of :func:`mnl_loss` in ``theta``."""
    return _grad_hess(theta, obs, want_hess=False)[0]


def mnl_hessian(theta: np.ndarray, obs: ChoiceObservation) -> np.ndarray:
    """Hessian ``sum_a p_a x_a x_a' - (sum_a p_a x_a)(sum_a p_a x_a)'``."""
    return _grad_hess(theta, obs, want_grad=False)[1]


def omd_update(state: MnlParameterState, obs: ChoiceObservation) -> MnlParameterState:
    """One online mirror descent step; returns a new state.

    The pre-update Hessian enters the step metric ``H + eta * hess(theta_k)``;
    the Hessian at the *new* parameter is what gets accumulated into ``H``.
    """
    cfg = state.config
    grad, hess = _grad_hess(state.theta, obs)
    metric = state.hessian_accum + cfg.eta * hess
    unconstrained = state.theta - cfg.eta * cholesky_solve(metric, grad)
    theta = project_to_ball_in_metric(unconstrained, metric, cfg.bound)
    new_hess = state.hessian_accum + mnl_hessian(theta, obs)
    return replace(
        state,
        theta=theta,
        hessian_accum=new_hess,
        episode_count=state.episode_count + 1,
    )


def radius_formula(k: int, d: int, max_assortment: int, bound: float, delta: float,
                   eta: float, lam: float) -> float:
    """Closed-form confidence radius for the ``k``-th online estimate."""
    m = max_assortment
    log_term = math.log(2.0 * math.sqrt(1.0 + 2.0 * k) / delta)
    inner = (
        11.0 * (3.0 * math.log(1.0 + (m + 1) * k) + bound + 2.0) * log_term
        + 2.0
        + 7.0 * math.sqrt(6.0) / 6.0 * d * eta * math.log(1.0 + (k + 1) / (2.0 * lam))
        + 2.0
    )
    return math.sqrt(2.0 * eta * inner + 4.0 * lam * bound**2)


def confidence_radius(state: MnlParameterState) -> float:
    """Unscaled radius of the confidence ellipsoid around ``state.theta``.

    ``state.theta`` is the estimate used in episode ``episode_count + 1``.
    """
    cfg = state.config
    return radius_formula(
        state.episode_count + 1, cfg.d, cfg.max_assortment, cfg.bound, cfg.delta,
        cfg.eta, cfg.lam,
    )


def in_confidence_set(state: MnlParameterState, theta_star: np.ndarray) -> bool:
    diff = np.asarray(theta_star) - state.theta
    return float(np.sqrt(diff @ state.hessian_accum @ diff)) <= confidence_radius(state)


def feature_widths(state: MnlParameterState, phi: np.ndarray) -> np.ndarray:
    """``||phi||`` in the inverse accumulated-Hessian metric, row-wise."""
    return inverse_metric_norms(state.hessian_accum, phi)


def utilities(state: MnlParameterState, phi: np.ndarray, alpha: float | None = None):
    """Optimistic and pessimistic utilities ``phi' theta +/- alpha ||phi||_{H^-1}``.

    Works for a single feature vector or a stack of them. ``alpha`` defaults to
    the state's scaled confidence radius.
    """
    phi = np.asarray(phi, dtype=float)
    if alpha is None:
        alpha = state.alpha
    mean = phi @ state.theta
    width = alpha * feature_widths(state, phi)
    return mean + width, mean - width


def optimistic_choice_probs(
    state: MnlParameterState,
    items,
    f_outside: float,
    assortment=None,
    alpha: float | None = None,
) -> np.ndarray:
    """Choice probabilities built from optimistic or pessimistic utilities.

    ``items`` is a sequence of ``(phi, f_value)`` pairs for every real item at
    the state. Optimistic utilities are used when some item's value is at least
    ``f_outside``; otherwise pessimistic ones. ``assortment`` selects which
    items (0-based positions in ``items``) are offered; default all of them.
    The result is ordered ``[outside, offered items...]``.
    """
    phis = np.array([np.asarray(p, dtype=float) for p, _ in items])
    fvals = np.array([float(f) for _, f in items])
    opt, pess = utilities(state, phis, alpha)
    u = opt if np.any(fvals >= f_outside) else pess
    if assortment is not None:
        u = u[np.asarray(assortment, dtype=int)]
    return probs_from_utilities(u)


def kappa_lower_bound(features: np.ndarray, bound: float, max_items: int) -> float:
    """Worst case of ``p(a) p(outside)`` over the parameter ball and assortments.

    ``features`` is the ``(n, d)`` array of real items at one state. Item ``a``
    is pushed to utility ``-B||x_a||`` while the ``max_items - 1`` others with
    the largest norms are pushed to ``+B||x||``.
    """
    norms = np.linalg.norm(np.asarray(features, dtype=float), axis=1)
    worst = np.inf
    for a in range(len(norms)):
        others = np.sort(np.delete(norms, a))[::-1][: max_items - 1]
        denom = 1.0 + math.exp(-bound * norms[a]) + np.exp(bound * others).sum()
        worst = min(worst, math.exp(-bound * norms[a]) / denom**2)
    return float(worst)
