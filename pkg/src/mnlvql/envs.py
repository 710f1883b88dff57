"""Tabular episodic MDPs with MNL preference feedback.

Action indices run over ``0..N`` with ``0`` the outside option (``OUTSIDE``)
and ``i`` the ``i``-th real item. An assortment is a sorted tuple of real
item indices in ``1..N``; the outside option is always implicitly offered.

Rewards depend on ``(s, a)`` only. Horizons are 0-based internally.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .assort import BRUTEFORCE_MAX_ITEMS, enumerate_assortments, solve_batch
from .mnl import OUTSIDE, UTILITY_CLAMP

ROW_SUM_TOL = 1e-12


class DimensionConstraint(ValueError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based Philox stream; identical draws on every platform."""
    return np.random.Generator(np.random.Philox(int(seed)))


@dataclass(frozen=True)
class StepOutcome:
    chosen_item: int
    reward: float
    next_state: int


@dataclass(frozen=True)
class TabularEnv:
    """Explicit kernel, rewards and feature maps of a finite-horizon MDP.

    Attributes
    ----------
    transition : ndarray, shape (H, S, N+1, S)
    reward : ndarray, shape (H, S, N+1)
    mnl_features : ndarray, shape (S, N+1, d)
        ``phi``; the outside row is zero.
    true_theta : ndarray, shape (H, d)
    linmdp_features : ndarray, shape (H, S, N+1, d_lin)
        ``psi``.
    linmdp_mu : ndarray, shape (H, S, d_lin, S)
        Next-state measure, allowed to depend on the source state so that
        ``P_h(s'|s,a) = <psi_h(s,a), mu_h[s](s')>``.
    linmdp_w : ndarray, shape (H, d_lin)
        Reward weights, ``r_h(s,a) = <psi_h(s,a), w_h>``.
    """

    transition: np.ndarray
    reward: np.ndarray
    mnl_features: np.ndarray
    true_theta: np.ndarray
    linmdp_features: np.ndarray
    linmdp_mu: np.ndarray
    linmdp_w: np.ndarray
    max_assortment: int
    initial_state: int
    theta_bound: float = 1.0
    name: str = "custom"
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        h, s, a, s2 = self.transition.shape
        if s != s2 or self.reward.shape != (h, s, a):
            raise ValueError("transition and reward shapes disagree")
        if self.mnl_features.shape[:2] != (s, a) or self.true_theta.shape[0] != h:
            raise ValueError("MNL feature shapes disagree")
        if self.max_assortment < 2:
            raise ValueError("max_assortment must allow at least one real item")

    @property
    def horizon(self) -> int:
        return self.transition.shape[0]

    @property
    def n_states(self) -> int:
        return self.transition.shape[1]

    @property
    def n_items(self) -> int:
        return self.transition.shape[2] - 1

    @property
    def d(self) -> int:
        return self.mnl_features.shape[2]

    @property
    def d_lin(self) -> int:
        return self.linmdp_features.shape[3]

    @property
    def max_items(self) -> int:
        return self.max_assortment - 1

    def true_weights(self) -> np.ndarray:
        """``exp(phi' theta*_h)`` for real items, shape (H, S, N)."""
        u = np.einsum("sad,hd->hsa", self.mnl_features[:, 1:], self.true_theta)
        return np.exp(np.clip(u, -UTILITY_CLAMP, UTILITY_CLAMP))


def validate_assortment(env: TabularEnv, assortment) -> tuple:
    items = tuple(sorted(int(a) for a in assortment))
    if not 1 <= len(items) <= env.max_items:
        raise ValueError(f"assortment size {len(items)} outside 1..{env.max_items}")
    if len(set(items)) != len(items) or items[0] < 1 or items[-1] > env.n_items:
        raise ValueError(f"invalid assortment {items}")
    return items


def step(env: TabularEnv, h: int, s: int, assortment, rng: np.random.Generator) -> StepOutcome:
    """Sample the user's choice, then the next state."""
    items = np.asarray(assortment, dtype=int)
    u = env.mnl_features[s, items] @ env.true_theta[h]
    cdf = np.exp(np.clip(u, -UTILITY_CLAMP, UTILITY_CLAMP)).cumsum()
    x = rng.random() * (1.0 + cdf[-1]) - 1.0   # below zero: the outside option
    if x < 0.0:
        chosen = OUTSIDE
    else:
        pos = int(cdf.searchsorted(x, side="right"))
        chosen = int(items[min(pos, len(items) - 1)])
    row = env.transition[h, s, chosen].cumsum()
    nxt = int(row.searchsorted(rng.random() * row[-1], side="right"))
    return StepOutcome(chosen, float(env.reward[h, s, chosen]), min(nxt, env.n_states - 1))


# --------------------------------------------------------------------------
# Online shopping with a budget
# --------------------------------------------------------------------------


def _unit_ball_sample(rng: np.random.Generator, shape, bound: float = 1.0) -> np.ndarray:
    """Uniform draws on [-1, 1] rescaled (only if needed) into the ball of radius ``bound``."""
    x = rng.uniform(-1.0, 1.0, size=shape)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x * np.minimum(1.0, bound / np.maximum(norms, 1e-300))


def shopping_tables(n_items: int, n_states: int, horizon: int):
    """Kernel (S, N+1, S) and rewards (S, N+1) of the shopping environment."""
    p = np.zeros((n_states, n_items + 1, n_states))
    r = np.zeros((n_states, n_items + 1))
    for j in range(n_states):
        up, down = min(j + 1, n_states - 1), max(j - 1, 0)
        p[j, OUTSIDE, up] = 1.0
        for i in range(1, n_items + 1):
            p[j, i, up] += 1.0 - i / n_items
            p[j, i, down] += i / n_items
            r[j, i] = (i / (100.0 * n_items) + (j + 1) / n_states) / horizon
    return p, r


def svd_features(p: np.ndarray, r: np.ndarray):
    """Exact low-rank factorization ``P = psi_P mu``, ``r = psi_r w``.

    Returns ``psi`` (S, A, S+1), ``mu`` (S+1, S) and ``w`` (S+1,) with
    ``||psi|| <= 1`` after a common rescaling.
    """
    n_s, n_a, _ = p.shape
    u, sv, vt = np.linalg.svd(p.reshape(n_s * n_a, n_s), full_matrices=False)
    psi_p = u * sv
    r_flat = r.reshape(-1)
    r_scale = max(np.abs(r_flat).max(), 1e-300)
    psi = np.hstack([psi_p, (r_flat / r_scale)[:, None]])
    mu = np.vstack([vt, np.zeros((1, n_s))])
    w = np.zeros(n_s + 1)
    w[-1] = r_scale
    c = max(np.linalg.norm(psi, axis=1).max(), 1e-300)
    return (psi / c).reshape(n_s, n_a, n_s + 1), mu * c, w * c


def online_shopping_env(n_items: int = 10, n_states: int = 5, horizon: int = 5, d: int = 5,
                        seed: int = 0, max_assortment: int = 6, theta_bound: float = 1.0) -> TabularEnv:
    """Budget-level shopping environment with a shared random MNL model."""
    if n_items < 2 or n_states < 2 or horizon < 1 or d < 1:
        raise ValueError("need n_items >= 2, n_states >= 2, horizon >= 1, d >= 1")
    rng = make_rng(seed)
    theta = _unit_ball_sample(rng, (d,), theta_bound)
    phi = _unit_ball_sample(rng, (n_states, n_items + 1, d))
    phi[:, OUTSIDE] = 0.0
    p, r = shopping_tables(n_items, n_states, horizon)
    psi, mu, w = svd_features(p, r)
    hh = horizon
    return TabularEnv(
        transition=np.broadcast_to(p, (hh,) + p.shape),
        reward=np.broadcast_to(r, (hh,) + r.shape),
        mnl_features=phi,
        true_theta=np.broadcast_to(theta, (hh, d)),
        linmdp_features=np.broadcast_to(psi, (hh,) + psi.shape),
        linmdp_mu=np.broadcast_to(mu, (hh, n_states) + mu.shape),
        linmdp_w=np.broadcast_to(w, (hh, len(w))),
        max_assortment=max_assortment,
        initial_state=math.ceil(n_states / 2) - 1,
        theta_bound=theta_bound,
        name="shopping",
        info={"seed": seed},
    )


# --------------------------------------------------------------------------
# Lower-bound instance
# --------------------------------------------------------------------------


def _hard_effective_dim(d_lin: int) -> int:
    if d_lin < 7:
        raise DimensionConstraint("d_lin must be at least 7 to hold one item coordinate")
    return d_lin if (d_lin - 5) % 2 == 0 else d_lin - 1


def hard_instance_env(d: int = 5, d_lin: int = 8, horizon: int = 4, n_episodes: int = 1000,
                      seed: int = 0, c_const: float = 1.0) -> TabularEnv:
    """Layered instance whose optimal assortment is the best item alone.

    States are a global absorbing state ``x0`` plus layers ``i = 1..H+2``
    holding ``x^(i)_j`` for ``j = i..H+2``; ``x^(i)_{H+2}`` is absorbing.
    Items are the sign vectors ``{-1, 1}^m`` with ``m = (d_lin - 5) / 2``.
    When ``d_lin - 5`` is odd, the construction is built at ``d_lin - 1``
    and ``psi`` is zero-padded to ``d_lin``.
    """
    if d < 5 or (d - 1) % 4 != 0:
        raise DimensionConstraint("d must be at least 5 with d - 1 divisible by 4")
    d_eff = _hard_effective_dim(d_lin)
    hh, kk = horizon, n_episodes
    if hh < 2:
        raise DimensionConstraint("horizon must be at least 2")
    m = (d_eff - 5) // 2
    items = [np.array(v, dtype=float) for v in itertools.product((-1.0, 1.0), repeat=m)]
    n_items = len(items)
    support = (d - 1) // 4
    supports = list(itertools.combinations(range(d - 1), support))
    if len(supports) < n_items:
        raise DimensionConstraint(f"d={d} has too few distinct feature supports for {n_items} items")
    rng = make_rng(seed)

    delta = 1.0 / hh
    gap = math.sqrt(delta / kk) / (4.0 * math.sqrt(2.0))
    alpha = math.sqrt(1.0 / (2.0 + 2.0 * m * gap))
    beta = math.sqrt(gap / (2.0 + 2.0 * m * gap))
    gamma = hh / (hh + 1.0)
    mus = gap * rng.choice([-1.0, 1.0], size=(hh, m))
    best = [int(np.argmax([mu @ a for a in items])) + 1 for mu in mus]

    # state indexing
    index = {"x0": 0}
    for i in range(1, hh + 3):
        for j in range(i, hh + 3):
            index[(i, j)] = len(index)
    n_s, n_a = len(index), n_items + 1

    # psi coordinates: [alpha, beta a | alpha, beta a | absorb, outside, reward]
    c_opt, c_oth = 0, 1 + m
    c_abs, c_out, c_rew = 2 + 2 * m, 3 + 2 * m, 4 + 2 * m
    psi = np.zeros((hh, n_s, n_a, d_lin))
    mu = np.zeros((hh, n_s, d_lin, n_s))
    p = np.zeros((hh, n_s, n_a, n_s))
    rew = np.zeros((hh, n_s, n_a))
    w = np.zeros((hh, d_lin))
    w[:, c_rew] = math.sqrt(2.0) / hh

    for h in range(hh):
        mu_h = mus[h]
        x0 = index["x0"]
        psi[h, x0, :, c_out] = 1.0
        mu[h, x0, c_out, x0] = 1.0
        p[h, x0, :, x0] = 1.0
        for (key, s) in index.items():
            if key == "x0":
                continue
            i, j = key
            if j == hh + 2:
                psi[h, s, :, c_abs] = 1.0 / math.sqrt(2.0)
                psi[h, s, :, c_rew] = gamma ** (i - 1) / math.sqrt(2.0)
                mu[h, s, c_abs, s] = math.sqrt(2.0)
                p[h, s, :, s] = 1.0
                rew[h, s, :] = gamma ** (i - 1) / hh
                continue
            psi[h, s, OUTSIDE, c_out] = 1.0
            mu[h, s, c_out, x0] = 1.0
            p[h, s, OUTSIDE, x0] = 1.0
            stay, stay_abs = index[(i, min(j + 1, hh + 1))], index[(i, hh + 2)]
            down_i = i + 1
            down = index[(down_i, min(j + 1, hh + 1))] if down_i <= hh + 1 else index[(hh + 2, hh + 2)]
            down_abs = index[(min(i + 2, hh + 2), hh + 2)]
            # same-layer block for the best item, next-layer block for the rest
            mu[h, s, c_opt, stay] += (1.0 - delta) / alpha
            mu[h, s, c_opt + 1:c_opt + 1 + m, stay] += -mu_h / beta
            mu[h, s, c_opt, stay_abs] += delta / alpha
            mu[h, s, c_opt + 1:c_opt + 1 + m, stay_abs] += mu_h / beta
            mu[h, s, c_oth, down] += (1.0 - delta) / alpha
            mu[h, s, c_oth + 1:c_oth + 1 + m, down] += -mu_h / beta
            mu[h, s, c_oth, down_abs] += delta / alpha
            mu[h, s, c_oth + 1:c_oth + 1 + m, down_abs] += mu_h / beta
            for a, vec in enumerate(items, start=1):
                leave = delta + float(mu_h @ vec)
                if a == best[h]:
                    psi[h, s, a, c_opt] = alpha
                    psi[h, s, a, c_opt + 1:c_opt + 1 + m] = beta * vec
                    psi[h, s, a, c_rew] = gamma ** (i - 1) / math.sqrt(2.0)
                    p[h, s, a, stay] += 1.0 - leave
                    p[h, s, a, stay_abs] += leave
                    rew[h, s, a] = gamma ** (i - 1) / hh
                else:
                    psi[h, s, a, c_oth] = alpha
                    psi[h, s, a, c_oth + 1:c_oth + 1 + m] = beta * vec
                    psi[h, s, a, c_rew] = gamma**i / math.sqrt(2.0)
                    p[h, s, a, down] += 1.0 - leave
                    p[h, s, a, down_abs] += leave
                    rew[h, s, a] = gamma**i / hh

    # MNL side: the outside feature is shifted to zero and everything rescaled
    eps = math.sqrt((d - 1) / (144.0 * c_const * kk) * (hh + 1) ** 2 / hh)
    order = rng.permutation(len(supports))
    z = np.zeros((n_a, d - 1))
    for a in range(1, n_a):
        z[a, list(supports[order[a - 1]])] = 1.0 / math.sqrt(d - 1)
    phi_row = np.zeros((n_a, d))
    phi_row[1:, : d - 1] = z[1:] / math.sqrt(2.0)
    phi_row[1:, d - 1] = -1.0 / math.sqrt(2.0)
    theta = np.zeros((hh, d))
    for h in range(hh):
        theta_w = np.zeros(d - 1)
        theta_w[list(supports[order[best[h] - 1]])] = eps
        theta[h] = math.sqrt(2.0) * np.append(theta_w, -math.log(hh))
    phi = np.broadcast_to(phi_row, (n_s, n_a, d)).copy()

    inv_index = {v: k for k, v in index.items()}
    return TabularEnv(
        transition=p,
        reward=rew,
        mnl_features=phi,
        true_theta=theta,
        linmdp_features=psi,
        linmdp_mu=mu,
        linmdp_w=w,
        max_assortment=n_items + 1,
        initial_state=index[(1, 1)],
        theta_bound=2.0 * math.log(hh),
        name="hard",
        info={
            "best_item": best,
            "items": items,
            "state_index": index,
            "state_label": inv_index,
            "d_effective": d_eff,
            "epsilon": eps,
        },
    )


# --------------------------------------------------------------------------
# Exact dynamic programming
# --------------------------------------------------------------------------


def factorization_residual(env: TabularEnv) -> float:
    """Max deviation of ``psi mu`` from ``P`` and ``psi w`` from ``r``."""
    p_hat = np.einsum("hsad,hsdt->hsat", env.linmdp_features, env.linmdp_mu)
    r_hat = np.einsum("hsad,hd->hsa", env.linmdp_features, env.linmdp_w)
    return float(max(np.abs(p_hat - env.transition).max(), np.abs(r_hat - env.reward).max()))


def _lex_order(rows: np.ndarray) -> np.ndarray:
    # -1 padding sorts first, so a set precedes its own extensions
    return np.lexsort(rows.T[::-1])


def best_assortments(weights: np.ndarray, values: np.ndarray, outside_values: np.ndarray,
                     max_items: int, exhaustive: bool | None = None):
    """Optimal assortment per row for MNL weights (B, N) and item values (B, N).

    Exhaustive enumeration (lexicographically smallest maximizer) is used for
    ``N <= 20``, the parametric solver otherwise.

    Returns
    -------
    masks : ndarray of bool, shape (B, N)
    values : ndarray, shape (B,)
    """
    b, n = weights.shape
    if exhaustive is None:
        exhaustive = n <= BRUTEFORCE_MAX_ITEMS
    if not exhaustive:
        return solve_batch(1.0, outside_values, weights, values, max_items)
    sets = _enumerated(n, max_items)
    onehot = np.zeros((len(sets), n))
    for col in range(sets.shape[1]):
        valid = sets[:, col] >= 0
        onehot[np.flatnonzero(valid), sets[valid, col]] = 1.0
    num = outside_values[:, None] + (weights * values) @ onehot.T
    den = 1.0 + weights @ onehot.T
    obj = num / den
    top = obj.max(axis=1, keepdims=True)
    pick = np.argmax(obj >= top - 1e-12, axis=1)
    return onehot[pick].astype(bool), obj[np.arange(b), pick]


_ENUM_CACHE: dict = {}


def _enumerated(n: int, max_items: int) -> np.ndarray:
    key = (n, max_items)
    if key not in _ENUM_CACHE:
        rows = enumerate_assortments(n, max_items)
        _ENUM_CACHE[key] = rows[_lex_order(rows)]
    return _ENUM_CACHE[key]


@dataclass(frozen=True)
class DpSolution:
    values: np.ndarray          # V*_h(s), shape (H+1, S)
    item_values: np.ndarray     # Q-bar*_h(s, a), shape (H, S, N+1)
    policy: np.ndarray          # offered item masks, shape (H, S, N)

    def assortment(self, h: int, s: int) -> tuple:
        return tuple(int(i) + 1 for i in np.flatnonzero(self.policy[h, s]))


def dp_optimal_values(env: TabularEnv, exhaustive: bool | None = None) -> DpSolution:
    """Backward induction with the true MNL weights."""
    hh, ns, na = env.reward.shape
    v = np.zeros((hh + 1, ns))
    q = np.zeros((hh, ns, na))
    pol = np.zeros((hh, ns, na - 1), dtype=bool)
    weights = env.true_weights()
    for h in range(hh - 1, -1, -1):
        q[h] = env.reward[h] + env.transition[h] @ v[h + 1]
        pol[h], v[h] = best_assortments(weights[h], q[h, :, 1:], q[h, :, OUTSIDE], env.max_items,
                                        exhaustive)
    return DpSolution(v, q, pol)


def policy_evaluation(env: TabularEnv, policy: np.ndarray, weights: np.ndarray | None = None):
    """Values of a deterministic assortment policy (H, S, N) of item masks.

    Returns ``V`` with shape (H+1, S).
    """
    hh, ns, na = env.reward.shape
    if weights is None:
        weights = env.true_weights()
    w = np.where(policy, weights, 0.0)
    denom = 1.0 + w.sum(axis=2)
    v = np.zeros((hh + 1, ns))
    for h in range(hh - 1, -1, -1):
        q = env.reward[h] + env.transition[h] @ v[h + 1]
        v[h] = (q[:, OUTSIDE] + (w[h] * q[:, 1:]).sum(axis=1)) / denom[h]
    return v


def trajectory_return_bounds(env: TabularEnv) -> tuple:
    """Smallest and largest total reward reachable from the initial state."""
    hh, ns, _ = env.reward.shape
    lo = np.zeros((hh + 1, ns))
    hi = np.zeros((hh + 1, ns))
    reach = env.transition > 0
    for h in range(hh - 1, -1, -1):
        big = np.where(reach[h], hi[h + 1][None, None, :], -np.inf).max(axis=2)
        small = np.where(reach[h], lo[h + 1][None, None, :], np.inf).min(axis=2)
        hi[h] = (env.reward[h] + big).max(axis=1)
        lo[h] = (env.reward[h] + small).min(axis=1)
    return float(lo[0, env.initial_state]), float(hi[0, env.initial_state])
