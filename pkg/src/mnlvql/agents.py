"""Learning agents and comparators for tabular MNL-feedback MDPs.

Every agent follows the same episode protocol::

    agent.begin_episode(k)          # k = 1, 2, ...
    for h in range(H):
        A = agent.act(h, s)
        outcome = step(env, h, s, A, rng)
        agent.observe(h, s, A, outcome)
        s = outcome.next_state

``greedy_policy()`` returns the deterministic assortment map (H, S, N) of
item masks that the agent would follow this episode, used for the
expectation-form regret.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .assort import count_assortments, enumerate_assortments, solve_batch
from .envs import OUTSIDE, StepOutcome, TabularEnv, dp_optimal_values, policy_evaluation
from .mnl import (
    UTILITY_CLAMP,
    ChoiceObservation,
    MnlConfig,
    MnlParameterState,
    omd_update,
)
from .numerics import spd_inverse
from .values import (
    LinearSchedule,
    RegressionStats,
    SigmaMode,
    quad_norms,
    sigma_bar_schedule,
    sigma_schedule,
)

MAX_ATOMIC_ASSORTMENTS = 2_000_000


class TooManyAssortments(ValueError):
    pass


def derive_rng(*keys: int) -> np.random.Generator:
    """Philox stream keyed by a tuple of non-negative integers."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in keys])))


@dataclass(frozen=True)
class AgentConfig:
    """Knobs shared by the learning agents.

    ``radius_scale`` multiplies the MNL confidence radius, ``beta_scale`` the
    value-function bonus radii and ``u_scale`` the switch threshold.
    """

    n_episodes: int
    delta: float = 0.1
    rho: float = 1.0
    radius_scale: float = 1.0
    beta_scale: float = 1.0
    u_scale: float = 1.0
    sigma_mode: SigmaMode = SigmaMode.SIMPLE
    seed: int = 0
    lam: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "sigma_mode", SigmaMode(self.sigma_mode))
        for name in ("radius_scale", "beta_scale", "u_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.n_episodes < 1:
            raise ValueError("n_episodes must be positive")


def random_policy_map(env: TabularEnv, rng: np.random.Generator) -> np.ndarray:
    """A uniformly random assortment for every (h, s), as item masks (H, S, N)."""
    n, cap = env.n_items, env.max_items
    sizes = np.arange(1, min(cap, n) + 1)
    counts = np.array([math.comb(n, m) for m in sizes], dtype=float)
    probs = counts / counts.sum()
    out = np.zeros((env.horizon, env.n_states, n), dtype=bool)
    for h in range(env.horizon):
        for s in range(env.n_states):
            m = int(rng.choice(sizes, p=probs))
            out[h, s, rng.choice(n, size=m, replace=False)] = True
    return out


def mask_to_assortment(mask: np.ndarray) -> tuple:
    return tuple(int(i) + 1 for i in np.flatnonzero(mask))


class Agent:
    """Base class: holds the environment handle and the episode counter."""

    name = "agent"

    def __init__(self, env: TabularEnv, config: AgentConfig):
        self.env = env
        self.config = config
        self.k = 0

    def begin_episode(self, k: int) -> None:
        self.k = k

    def act(self, h: int, s: int) -> tuple:
        raise NotImplementedError

    def observe(self, h: int, s: int, assortment, outcome: StepOutcome) -> None:
        pass

    def greedy_policy(self) -> np.ndarray:
        raise NotImplementedError


class OptimalAgent(Agent):
    """Follows the DP-optimal assortment map computed from the true model."""

    name = "optimal"

    def __init__(self, env, config, dp=None):
        super().__init__(env, config)
        self.dp = dp if dp is not None else dp_optimal_values(env)

    def act(self, h, s):
        return mask_to_assortment(self.dp.policy[h, s])

    def greedy_policy(self):
        return self.dp.policy


class RandomAgent(Agent):
    """Draws a fresh uniformly random assortment map every episode."""

    name = "random"

    def __init__(self, env, config):
        super().__init__(env, config)
        self.rng = derive_rng(config.seed, 7)
        self.policy = None

    def begin_episode(self, k):
        super().begin_episode(k)
        self.policy = random_policy_map(self.env, self.rng)

    def act(self, h, s):
        return mask_to_assortment(self.policy[h, s])

    def greedy_policy(self):
        return self.policy


class _MnlLearner(Agent):
    """Per-horizon MNL estimates updated by online mirror descent."""

    def __init__(self, env, config):
        super().__init__(env, config)
        mnl_cfg = MnlConfig(
            d=env.d,
            max_assortment=env.max_assortment,
            bound=env.theta_bound,
            delta=config.delta,
            radius_scale=config.radius_scale,
            lam=config.lam,
        )
        self.mnl = [MnlParameterState.initial(mnl_cfg, h) for h in range(env.horizon)]
        self.rng = derive_rng(config.seed, 11)
        self.random_map = None

    def begin_episode(self, k):
        super().begin_episode(k)
        if k == 1:
            self.random_map = random_policy_map(self.env, self.rng)

    def _update_mnl(self, h, s, assortment, outcome):
        items = np.asarray(assortment, dtype=int)
        chosen = OUTSIDE if outcome.chosen_item == OUTSIDE else 1 + int(
            np.flatnonzero(items == outcome.chosen_item)[0]
        )
        obs = ChoiceObservation(self.env.mnl_features[s, items], chosen)
        self.mnl[h] = omd_update(self.mnl[h], obs)

    def mnl_utilities(self, h: int, states=None):
        """Optimistic and pessimistic utilities of real items, each (S', N)."""
        st = self.mnl[h]
        phi = self.env.mnl_features[:, 1:] if states is None else self.env.mnl_features[states, 1:]
        inv = spd_inverse(st.hessian_accum)
        mean = phi @ st.theta
        flat = phi.reshape(-1, phi.shape[-1])
        width = st.alpha * quad_norms(inv, flat).reshape(mean.shape)
        return mean + width, mean - width


def _choice_weights(opt_u, pess_u, f):
    """Per-state MNL weights using the optimism indicator on item values ``f``.

    ``f`` has the outside option in column 0 and shape (..., N+1).
    """
    use_opt = f[..., 1:].max(axis=-1, keepdims=True) >= f[..., :1]
    u = np.where(use_opt, opt_u, pess_u)
    return np.exp(np.clip(u, -UTILITY_CLAMP, UTILITY_CLAMP))


class MnlVqlAgent(_MnlLearner):
    """Optimistic value iteration over item-level values with MNL choice."""

    name = "mnl_vql"

    def __init__(self, env, config):
        super().__init__(env, config)
        hh, ns, na = env.reward.shape
        self.schedule = LinearSchedule(
            n_episodes=config.n_episodes,
            horizon=hh,
            d_lin=env.d_lin,
            delta=config.delta,
            rho=config.rho,
            beta_scale=config.beta_scale,
            u_scale=config.u_scale,
        )
        sch = self.schedule
        self.beta1, self.beta2, self.beta_bar = sch.beta1, sch.beta2, sch.beta_bar
        self.nu, self.o_term, self.iota = sch.nu, sch.o_term, sch.iota
        self.stats = [RegressionStats(env.d_lin, ns, config.rho) for _ in range(hh)]
        self.replay: list = []
        self.u_override = None
        # per-h tables filled by plan()
        self.f = np.zeros((hh, 3, ns, na))          # f1, f2, f_-2
        self.fhat_neg2 = np.zeros((hh, ns, na))
        self.ghat = np.zeros((hh, ns, na))
        self.width_w = np.zeros((hh, ns, na))
        self.width_u = np.zeros((hh, ns, na))
        self.values = np.zeros((3, hh + 1, ns))     # V_{h,j}
        self.maps = np.zeros((3, hh, ns, na - 1), dtype=bool)
        self.switch_h = hh
        self.switch_history: list = []
        self.u_k = math.inf

    # -- planning -----------------------------------------------------------

    def begin_episode(self, k):
        if self.k >= 1:
            self.switch_history.append(self.switch_h)
        super().begin_episode(k)
        self.switch_h = self.env.horizon
        if k >= 2:
            if self.u_override is not None:
                self.u_k = self.u_override
            else:
                self.u_k = self.schedule.u_k(k, self.env.d, self.env.max_assortment)
            self.plan()

    def plan(self) -> None:
        env = self.env
        hh, ns, na = env.reward.shape
        rho = self.config.rho
        c1 = math.sqrt(self.beta1**2 + rho)
        c2 = math.sqrt(self.beta2**2 + rho)
        v_next = np.zeros((3, ns))
        self.values[:, hh] = 0.0
        for h in range(hh - 1, -1, -1):
            stats = self.stats[h]
            inv_w, inv_u = stats.inv_weighted, stats.inv_unweighted
            psi = env.linmdp_features[h].reshape(ns * na, -1)
            coef = np.stack([
                stats.fit_weighted(v_next[0]),
                stats.fit_unweighted(v_next[1]),
                stats.fit_unweighted(v_next[2]),
                stats.fit_second_moment(v_next[0]),
            ])
            pred = (psi @ coef.T).T.reshape(4, ns, na)
            dw = quad_norms(inv_w, psi).reshape(ns, na)
            du = quad_norms(inv_u, psi).reshape(ns, na)
            b1, b2 = dw * c1, du * c2
            f = self.f[h]
            np.clip(pred[0] + b1, 0.0, 1.0, out=f[0])
            np.clip(pred[1] + 2.0 * b1 + b2, 0.0, 1.0, out=f[1])
            np.clip(pred[2] - b2, 0.0, 1.0, out=f[2])
            self.fhat_neg2[h] = pred[2]
            self.ghat[h] = pred[3]
            self.width_w[h], self.width_u[h] = dw, du

            opt_u, pess_u = self.mnl_utilities(h)
            weights = _choice_weights(opt_u[None], pess_u[None], f)
            masks, vals = solve_batch(
                1.0,
                f[:, :, OUTSIDE].reshape(-1),
                weights.reshape(3 * ns, -1),
                f[:, :, 1:].reshape(3 * ns, -1),
                env.max_items,
            )
            self.maps[:, h] = masks.reshape(3, ns, -1)
            v_next = vals.reshape(3, ns)
            self.values[:, h] = v_next

    # -- acting -------------------------------------------------------------

    def act(self, h, s):
        if self.k <= 1:
            return mask_to_assortment(self.random_map[h, s])
        if self.switch_h == self.env.horizon:
            chosen = self.maps[0, h, s]
            f1 = self.f[h, 0, s, 1:][chosen]
            f2 = self.f[h, 1, s, 1:][chosen]
            if np.any(f1 < f2 - self.u_k):
                self.switch_h = h
        j = 0 if self.switch_h == self.env.horizon else 1
        return mask_to_assortment(self.maps[j, h, s])

    def observe(self, h, s, assortment, outcome):
        a = outcome.chosen_item
        mode = self.config.sigma_mode
        if mode is SigmaMode.SIMPLE:
            sigma = sigma_bar = 1.0
        elif self.k <= 1:
            sigma = sigma_bar = 2.0
        else:
            sigma = sigma_schedule(
                self.ghat[h, s, a], self.fhat_neg2[h, s, a], self.width_u[h, s, a],
                (self.beta_bar, self.beta2), self.config.rho, self.nu,
            )
            sigma_bar = sigma_bar_schedule(
                sigma, self.nu, self.f[h, 1, s, a], self.f[h, 2, s, a],
                self.width_w[h, s, a], (self.o_term, self.iota), mode,
            )
        self.replay.append((self.k, h, s, a, outcome.reward, outcome.next_state, sigma, sigma_bar))
        self.stats[h].add(self.env.linmdp_features[h, s, a], outcome.reward, outcome.next_state,
                          sigma_bar)
        self._update_mnl(h, s, assortment, outcome)

    def greedy_policy(self):
        if self.k <= 1:
            return self.random_map
        return self.maps[0]

    def optimistic_value(self) -> float:
        """``V_{1,1}(s_1)`` of the current plan."""
        return float(self.values[0, 0, self.env.initial_state])


class MyopicAgent(_MnlLearner):
    """Maximizes the optimistic one-step expected reward, ignoring transitions."""

    name = "myopic"

    def __init__(self, env, config):
        super().__init__(env, config)
        hh, ns, _ = env.reward.shape
        self.schedule = LinearSchedule(
            n_episodes=config.n_episodes, horizon=hh, d_lin=env.d_lin, delta=config.delta,
            rho=config.rho, beta_scale=config.beta_scale,
        )
        self.bonus_scale = math.sqrt(self.schedule.beta1**2 + config.rho)
        self.stats = [RegressionStats(env.d_lin, ns, config.rho) for _ in range(hh)]
        self.zero_next = np.zeros(ns)
        self.cache: dict = {}

    def begin_episode(self, k):
        super().begin_episode(k)
        self.cache = {}

    def reward_estimate(self, h: int) -> np.ndarray:
        """Clipped optimistic immediate reward, shape (S, N+1)."""
        stats = self.stats[h]
        ns, na, d_lin = self.env.linmdp_features[h].shape
        psi = self.env.linmdp_features[h].reshape(-1, d_lin)
        fhat = psi @ stats.fit_unweighted(self.zero_next)
        bonus = self.bonus_scale * quad_norms(stats.inv_unweighted, psi)
        return np.clip(fhat + bonus, 0.0, 1.0).reshape(ns, na)

    def _solve(self, h):
        """Greedy masks for every state at step ``h``, cached for the episode."""
        if h not in self.cache:
            f = self.reward_estimate(h)
            opt_u, pess_u = self.mnl_utilities(h)
            weights = _choice_weights(opt_u, pess_u, f)
            mask, _ = solve_batch(1.0, f[:, OUTSIDE], weights, f[:, 1:], self.env.max_items)
            self.cache[h] = mask
        return self.cache[h]

    def act(self, h, s):
        if self.k <= 1:
            return mask_to_assortment(self.random_map[h, s])
        return mask_to_assortment(self._solve(h)[s])

    def observe(self, h, s, assortment, outcome):
        a = outcome.chosen_item
        self.stats[h].add(self.env.linmdp_features[h, s, a], outcome.reward, outcome.next_state, 1.0)
        self._update_mnl(h, s, assortment, outcome)

    def greedy_policy(self):
        if self.k <= 1:
            return self.random_map
        return np.stack([self._solve(h) for h in range(self.env.horizon)])


class LsviUcbAgent(_MnlLearner):
    """Optimistic least-squares value iteration over whole assortments.

    An assortment's feature is the choice-probability-weighted mean of the
    item features ``psi`` (outside option included) under the current MNL
    estimate. Features of past samples are frozen when recorded.
    """

    name = "lsvi_ucb"

    def __init__(self, env, config):
        super().__init__(env, config)
        n_sets = count_assortments(env.n_items, env.max_items)
        if n_sets > MAX_ATOMIC_ASSORTMENTS:
            raise TooManyAssortments(f"{n_sets} assortments exceed the {MAX_ATOMIC_ASSORTMENTS} guard")
        hh, ns, na = env.reward.shape
        d_lin = env.d_lin
        sets = enumerate_assortments(env.n_items, env.max_items)
        self.sets = sets
        self.valid = sets >= 0
        self.set_items = np.where(self.valid, sets + 1, 0)   # action ids, 0 = padding
        self.beta = config.beta_scale * d_lin * math.sqrt(
            math.log(2.0 * d_lin * config.n_episodes * hh / config.delta)
        )
        self.design = [np.eye(d_lin) for _ in range(hh)]
        self.b = [np.zeros(d_lin) for _ in range(hh)]
        self.c = [np.zeros((d_lin, ns)) for _ in range(hh)]
        self.choice = np.zeros((hh, ns), dtype=int)
        self.features_now = None

    def set_features(self, h: int) -> np.ndarray:
        """Features of every (state, assortment) pair, shape (S, |A|, d_lin)."""
        env = self.env
        st = self.mnl[h]
        u = env.mnl_features @ st.theta                              # (S, N+1)
        w = np.exp(np.clip(u, -UTILITY_CLAMP, UTILITY_CLAMP))
        w_sets = np.where(self.valid[None], w[:, self.set_items], 0.0)  # (S, |A|, M-1)
        denom = 1.0 + w_sets.sum(axis=2)
        psi = env.linmdp_features[h]                                 # (S, N+1, d_lin)
        mixed = np.einsum("sam,samd->sad", w_sets, psi[np.arange(env.n_states)[:, None, None],
                                                        self.set_items[None]])
        return (psi[:, None, OUTSIDE] + mixed) / denom[..., None]

    def begin_episode(self, k):
        super().begin_episode(k)
        if k < 2:
            return
        env = self.env
        hh, ns, _ = env.reward.shape
        v_next = np.zeros(ns)
        self.features_now = [None] * hh
        for h in range(hh - 1, -1, -1):
            inv = spd_inverse(self.design[h])
            wgt = inv @ (self.b[h] + self.c[h] @ v_next)
            feats = self.set_features(h)
            self.features_now[h] = feats
            flat = feats.reshape(-1, env.d_lin)
            q = flat @ wgt + self.beta * quad_norms(inv, flat)
            q = np.minimum(q.reshape(ns, -1), 1.0)
            self.choice[h] = np.argmax(q, axis=1)
            v_next = q[np.arange(ns), self.choice[h]]

    def act(self, h, s):
        if self.k <= 1:
            return mask_to_assortment(self.random_map[h, s])
        row = self.sets[self.choice[h, s]]
        return tuple(int(i) + 1 for i in row[row >= 0])

    def observe(self, h, s, assortment, outcome):
        env = self.env
        items = np.asarray(assortment, dtype=int)
        st = self.mnl[h]
        w = np.exp(np.clip(env.mnl_features[s, items] @ st.theta, -UTILITY_CLAMP, UTILITY_CLAMP))
        psi = env.linmdp_features[h, s]
        x = (psi[OUTSIDE] + w @ psi[items]) / (1.0 + w.sum())
        self.design[h] += np.outer(x, x)
        self.b[h] += outcome.reward * x
        self.c[h][:, outcome.next_state] += x
        self._update_mnl(h, s, assortment, outcome)

    def greedy_policy(self):
        if self.k <= 1:
            return self.random_map
        env = self.env
        out = np.zeros((env.horizon, env.n_states, env.n_items), dtype=bool)
        for h in range(env.horizon):
            for s in range(env.n_states):
                row = self.sets[self.choice[h, s]]
                out[h, s, row[row >= 0]] = True
        return out


AGENTS = {
    "mnl_vql": MnlVqlAgent,
    "myopic": MyopicAgent,
    "lsvi_ucb": LsviUcbAgent,
    "optimal": OptimalAgent,
    "random": RandomAgent,
}


def make_agent(kind: str, env: TabularEnv, config: AgentConfig, dp=None) -> Agent:
    if kind not in AGENTS:
        raise KeyError(f"unknown agent {kind!r}; choose from {sorted(AGENTS)}")
    if kind == "optimal":
        return OptimalAgent(env, config, dp)
    return AGENTS[kind](env, config)


# --------------------------------------------------------------------------
# Regret
# --------------------------------------------------------------------------


def regret(returns, optimal_value: float, policy_values=None):
    """Cumulative realized and expectation-form regret series.

    ``returns`` are realized episode returns; ``policy_values`` are the exact
    values ``V^{pi_k}_1(s_1)`` of each episode's greedy policy.
    """
    returns = np.asarray(returns, dtype=float)
    realized = np.cumsum(optimal_value - returns)
    if policy_values is None:
        return realized, None
    expected = np.cumsum(optimal_value - np.asarray(policy_values, dtype=float))
    return realized, expected


def greedy_value(env: TabularEnv, policy: np.ndarray, weights=None) -> float:
    return float(policy_evaluation(env, policy, weights)[0, env.initial_state])
