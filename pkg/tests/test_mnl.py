import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mnlvql.mnl import (
    OUTSIDE,
    ChoiceObservation,
    MnlConfig,
    MnlParameterState,
    choice_probs,
    confidence_radius,
    in_confidence_set,
    kappa_lower_bound,
    mnl_grad,
    mnl_hessian,
    mnl_loss,
    omd_update,
    optimistic_choice_probs,
    radius_formula,
    utilities,
)

# Radius at k=1, d=5, M=6, B=1, delta=0.1, evaluated at 40 digits with mpmath
# from an independent transcription of the closed form.
GOLDEN_ALPHA_K1 = 96.06943200654850027626


def unit_rows(rng, n, d):
    x = rng.uniform(-1, 1, size=(n, d))
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, 1.0)


def random_obs(rng, d, n_items):
    items = unit_rows(rng, n_items, d)
    return ChoiceObservation(items, int(rng.integers(0, n_items + 1)))


def state_with(theta, hess, cfg):
    return MnlParameterState(cfg, np.asarray(theta, float), np.asarray(hess, float))


class TestChoiceProbs:
    def test_uniform(self):
        p = choice_probs(np.zeros(3), np.ones((2, 3)) * 0.0)
        np.testing.assert_allclose(p, [1 / 3] * 3)

    def test_log2(self):
        p = choice_probs(np.array([math.log(2.0)]), np.array([[1.0]]))
        np.testing.assert_allclose(p, [1 / 3, 2 / 3])

    @pytest.mark.parametrize("seed", range(10))
    def test_high_precision_oracle(self, seed):
        rng = np.random.default_rng(seed)
        theta = unit_rows(rng, 1, 4)[0]
        items = unit_rows(rng, 3, 4)
        mpmath.mp.dps = 40
        ex = [mpmath.mpf(1)] + [mpmath.exp(mpmath.fsum(mpmath.mpf(a) * mpmath.mpf(b)
                                                       for a, b in zip(x, theta))) for x in items]
        total = mpmath.fsum(ex)
        ref = np.array([float(e / total) for e in ex])
        np.testing.assert_allclose(choice_probs(theta, items), ref, rtol=1e-14)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 8), st.integers(1, 6))
    def test_simplex(self, seed, d, n):
        rng = np.random.default_rng(seed)
        p = choice_probs(unit_rows(rng, 1, d)[0] * 3, unit_rows(rng, n, d))
        assert abs(p.sum() - 1) <= 1e-12
        assert np.all((p > 0) & (p < 1))

    def test_extreme_utilities_finite(self):
        p = choice_probs(np.array([1e4]), np.array([[1.0], [-1.0]]))
        assert np.all(np.isfinite(p))


class TestLoss:
    def test_uniform(self):
        obs = ChoiceObservation(np.zeros((2, 3)), 1)
        assert mnl_loss(np.zeros(3), obs) == pytest.approx(math.log(3))

    def test_deterministic_limit(self):
        obs = ChoiceObservation(np.array([[1.0]]), 1)
        assert mnl_loss(np.array([25.0]), obs) < 1e-10

    @pytest.mark.parametrize("seed", range(5))
    def test_direct_formula(self, seed):
        rng = np.random.default_rng(seed)
        obs = random_obs(rng, 5, 4)
        theta = unit_rows(rng, 1, 5)[0]
        p = choice_probs(theta, obs.item_features)
        assert mnl_loss(theta, obs) == pytest.approx(-math.log(p[obs.chosen]), rel=1e-12)
        assert mnl_loss(theta, obs) >= 0


class TestDerivatives:
    @pytest.mark.parametrize("seed", range(20))
    def test_gradient_central_differences(self, seed):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(1, 9))
        obs = random_obs(rng, d, int(rng.integers(1, 7)))
        theta = unit_rows(rng, 1, d)[0]
        h = 1e-5
        fd = np.array([(mnl_loss(theta + h * e, obs) - mnl_loss(theta - h * e, obs)) / (2 * h)
                       for e in np.eye(d)])
        g = mnl_grad(theta, obs)
        assert np.linalg.norm(g - fd) <= 1e-6 * max(np.linalg.norm(g), 1e-3)

    @pytest.mark.parametrize("seed", range(10))
    def test_hessian_matches_gradient_differences(self, seed):
        rng = np.random.default_rng(100 + seed)
        d = 4
        obs = random_obs(rng, d, 5)
        theta = unit_rows(rng, 1, d)[0]
        h = 1e-6
        fd = np.array([(mnl_grad(theta + h * e, obs) - mnl_grad(theta - h * e, obs)) / (2 * h)
                       for e in np.eye(d)])
        np.testing.assert_allclose(mnl_hessian(theta, obs), fd, atol=1e-8)

    def test_binary_reduction(self):
        phi = np.array([[0.3, -0.4]])
        theta = np.array([0.5, 0.2])
        u = float(phi[0] @ theta)
        for chosen, y in ((1, 1.0), (OUTSIDE, 0.0)):
            expect = (1 / (1 + math.exp(-u)) - y) * phi[0]
            np.testing.assert_allclose(mnl_grad(theta, ChoiceObservation(phi, chosen)), expect)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 8), st.integers(1, 6))
    def test_hessian_psd(self, seed, d, n):
        rng = np.random.default_rng(seed)
        hess = mnl_hessian(unit_rows(rng, 1, d)[0], random_obs(rng, d, n))
        assert np.array_equal(hess, hess.T)
        assert np.linalg.eigvalsh(hess).min() >= -1e-10


class TestOmd:
    def test_default_constants(self):
        cfg = MnlConfig(d=5, max_assortment=6)
        assert cfg.eta == pytest.approx(0.5 * math.log(7) + 2)
        assert cfg.lam == pytest.approx(84 * math.sqrt(2) * 5 * cfg.eta)

    def test_stationary_point(self):
        # a zero-feature item makes every gradient term vanish
        cfg = MnlConfig(d=2, max_assortment=3)
        st0 = MnlParameterState.initial(cfg)
        st0 = state_with([0.1, -0.2], st0.hessian_accum, cfg)
        obs = ChoiceObservation(np.zeros((1, 2)), 1)
        out = omd_update(st0, obs)
        np.testing.assert_array_equal(out.theta, st0.theta)
        assert out.episode_count == 1

    def test_hessian_accumulates_at_new_parameter(self):
        rng = np.random.default_rng(4)
        cfg = MnlConfig(d=3, max_assortment=4, lam=0.5)
        st0 = MnlParameterState.initial(cfg)
        obs = random_obs(rng, 3, 3)
        out = omd_update(st0, obs)
        np.testing.assert_allclose(out.hessian_accum - st0.hessian_accum,
                                   mnl_hessian(out.theta, obs), atol=1e-15)

    @pytest.mark.parametrize("seed", range(8))
    def test_prox_grid_oracle(self, seed):
        rng = np.random.default_rng(seed)
        cfg = MnlConfig(d=2, max_assortment=4, lam=float(rng.uniform(0.05, 2.0)))
        theta0 = unit_rows(rng, 1, 2)[0] * 0.9
        hess = cfg.lam * np.eye(2) + 0.3 * np.outer(*unit_rows(rng, 2, 2))
        hess = 0.5 * (hess + hess.T) + 0.1 * np.eye(2)
        st0 = state_with(theta0, hess, cfg)
        obs = random_obs(rng, 2, 3)
        out = omd_update(st0, obs)
        grad = mnl_grad(theta0, obs)
        metric = hess + cfg.eta * mnl_hessian(theta0, obs)

        def prox(t):
            diff = t - theta0
            return grad @ diff.T + np.einsum("...i,ij,...j->...", diff, metric, diff) / (2 * cfg.eta)

        g = np.linspace(-1, 1, 200)
        gx, gy = np.meshgrid(g, g)
        pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
        pts = pts[np.linalg.norm(pts, axis=1) <= 1]
        assert np.linalg.norm(out.theta) <= 1 + 1e-9
        assert prox(out.theta) <= prox(pts).min() + 1e-4

    def test_error_decreases(self):
        d, errs = 4, []
        for seed in range(20):
            rng = np.random.default_rng(seed)
            theta_star = unit_rows(rng, 1, d)[0]
            st_ = MnlParameterState.initial(MnlConfig(d=d, max_assortment=5, lam=1.0))
            trace = []
            for k in range(1, 2001):
                items = unit_rows(rng, 4, d)
                p = choice_probs(theta_star, items)
                st_ = omd_update(st_, ChoiceObservation(items, int(rng.choice(5, p=p))))
                if k in (50, 500, 2000):
                    trace.append(np.linalg.norm(st_.theta - theta_star))
            errs.append(trace)
        med = np.median(np.array(errs), axis=0)
        assert med[0] > med[1] > med[2]

    def test_norm_bound(self):
        rng = np.random.default_rng(9)
        st_ = MnlParameterState.initial(MnlConfig(d=3, max_assortment=4, lam=0.01))
        for _ in range(100):
            st_ = omd_update(st_, random_obs(rng, 3, 3))
            assert np.linalg.norm(st_.theta) <= 1 + 1e-9
            lam_part = st_.hessian_accum - 0.01 * np.eye(3)
            assert np.linalg.eigvalsh(lam_part).min() >= -1e-10


class TestConfidence:
    def test_golden_value(self):
        st_ = MnlParameterState.initial(MnlConfig(d=5, max_assortment=6, delta=0.1))
        assert confidence_radius(st_) == pytest.approx(GOLDEN_ALPHA_K1, rel=1e-12)

    def test_monotone_in_k(self):
        vals = [radius_formula(k, 5, 6, 1.0, 0.1, 3.0, 10.0) for k in range(1, 3000, 37)]
        assert all(a <= b for a, b in zip(vals, vals[1:]))

    def test_monotone_in_delta(self):
        assert radius_formula(10, 5, 6, 1.0, 0.01, 3.0, 10.0) > radius_formula(10, 5, 6, 1.0, 0.1, 3.0, 10.0)

    def test_radius_scale(self):
        cfg = MnlConfig(d=5, max_assortment=6, radius_scale=0.1)
        st_ = MnlParameterState.initial(cfg)
        assert st_.alpha == pytest.approx(0.1 * confidence_radius(st_))

    def test_membership(self):
        cfg = MnlConfig(d=2, max_assortment=3)
        st_ = MnlParameterState.initial(cfg)
        assert in_confidence_set(st_, np.array([0.5, 0.5]))
        assert not in_confidence_set(st_, np.array([1e3, 0.0]))


class TestUtilities:
    def setup_method(self):
        rng = np.random.default_rng(0)
        cfg = MnlConfig(d=3, max_assortment=4, lam=1.0)
        st_ = MnlParameterState.initial(cfg)
        for _ in range(20):
            st_ = omd_update(st_, random_obs(rng, 3, 3))
        self.state = st_
        self.phi = unit_rows(rng, 4, 3)

    def test_zero_feature(self):
        assert utilities(self.state, np.zeros(3)) == (0.0, 0.0)

    def test_zero_radius(self):
        opt, pess = utilities(self.state, self.phi, alpha=0.0)
        np.testing.assert_array_equal(opt, pess)
        np.testing.assert_allclose(opt, self.phi @ self.state.theta)

    def test_width(self):
        opt, pess = utilities(self.state, self.phi)
        widths = np.sqrt(np.einsum("ij,jk,ik->i", self.phi,
                                   np.linalg.inv(self.state.hessian_accum), self.phi))
        np.testing.assert_allclose(opt - pess, 2 * self.state.alpha * widths, rtol=1e-10)
        assert np.all(opt >= pess)

    def test_bracket_true_utility_inside_set(self):
        theta_star = self.state.theta + 0.01
        assert in_confidence_set(self.state, theta_star)
        opt, pess = utilities(self.state, self.phi)
        true = self.phi @ theta_star
        assert np.all(pess <= true) and np.all(true <= opt)


class TestOptimisticChoice:
    def setup_method(self):
        rng = np.random.default_rng(1)
        cfg = MnlConfig(d=3, max_assortment=4, lam=1.0)
        st_ = MnlParameterState.initial(cfg)
        for _ in range(50):
            st_ = omd_update(st_, random_obs(rng, 3, 3))
        self.state = st_
        self.phi = unit_rows(rng, 3, 3)

    def test_tie_takes_optimistic_branch(self):
        items = [(p, 0.5) for p in self.phi]
        opt, _ = utilities(self.state, self.phi)
        np.testing.assert_allclose(optimistic_choice_probs(self.state, items, 0.5),
                                   choice_probs(np.array([1.0]), opt[:, None]))

    def test_pessimistic_branch(self):
        items = [(p, 0.1) for p in self.phi]
        _, pess = utilities(self.state, self.phi)
        out = optimistic_choice_probs(self.state, items, 0.9)
        np.testing.assert_allclose(out, choice_probs(np.array([1.0]), pess[:, None]))
        # inside the confidence set every item is less likely than under the truth
        theta_star = self.state.theta + 0.01
        true = choice_probs(theta_star, self.phi)
        assert np.all(out[1:] <= true[1:] + 1e-12)

    def test_zero_radius_branches_coincide(self):
        hi = optimistic_choice_probs(self.state, [(p, 1.0) for p in self.phi], 0.0, alpha=0.0)
        lo = optimistic_choice_probs(self.state, [(p, 0.0) for p in self.phi], 1.0, alpha=0.0)
        np.testing.assert_allclose(hi, lo)
        np.testing.assert_allclose(hi, choice_probs(self.state.theta, self.phi))

    def test_subset(self):
        items = [(p, 0.5) for p in self.phi]
        out = optimistic_choice_probs(self.state, items, 0.2, assortment=[0, 2])
        assert out.shape == (3,)


class TestKappa:
    def test_single_item_closed_form(self):
        k = kappa_lower_bound(np.array([[1.0, 0.0]]), 1.0, 1)
        e = math.exp(-1.0)
        assert k == pytest.approx(e / (1 + e) ** 2)

    def test_positive_and_shrinks_with_bound(self):
        feats = unit_rows(np.random.default_rng(0), 5, 3)
        assert 0 < kappa_lower_bound(feats, 2.0, 4) < kappa_lower_bound(feats, 1.0, 4)
