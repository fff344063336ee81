"""Scores, Jacobians, losses, and the q-vector identities.

The oracles here are deliberately independent of the package: central
finite differences are re-implemented below rather than imported, and the
per-arm least-squares check solves its own normal equations.
"""

import numpy as np
import pytest

import randzest as rz
from randzest.errors import SpecificationError
from randzest.estfun import ETA_CLAMP, parse_model_spec

FAMILIES = {
    "gaussian": rz.gaussian_family,
    "binomial": rz.binomial_family,
    "poisson": rz.poisson_family,
    "negbin": lambda: rz.negbin_family(1.7),
}


def fd_gradient(fun, theta, step=1e-5):
    """Central-difference gradient, scaled steps."""
    theta = np.asarray(theta, dtype=float)
    out = np.empty_like(theta)
    for k in range(len(theta)):
        h = step * (1.0 + abs(theta[k]))
        up, dn = theta.copy(), theta.copy()
        up[k] += h
        dn[k] -= h
        out[k] = (fun(up) - fun(dn)) / (2 * h)
    return out


def fd_jacobian(fun, theta, step=1e-5):
    """Central-difference Jacobian of a vector function."""
    theta = np.asarray(theta, dtype=float)
    cols = []
    for k in range(len(theta)):
        h = step * (1.0 + abs(theta[k]))
        up, dn = theta.copy(), theta.copy()
        up[k] += h
        dn[k] -= h
        cols.append((fun(up) - fun(dn)) / (2 * h))
    return np.stack(cols, axis=-1)


def rel_err(a, b):
    return np.max(np.abs(a - b)) / (1.0 + np.max(np.abs(b)))


def random_point(gen, family, d, interaction):
    spec = rz.MeanSpec(FAMILIES[family](), interaction, d)
    theta = 0.5 * gen.standard_normal(spec.dim)
    x = gen.standard_normal((1, d))
    if family == "binomial":
        y = np.array([float(gen.integers(0, 2))])
    elif family in ("poisson", "negbin"):
        y = np.array([float(gen.poisson(2.0))])
    else:
        y = gen.standard_normal(1)
    return spec, y, x, theta


class TestGlmMean:
    def test_logistic_at_zero(self):
        spec = rz.MeanSpec(rz.binomial_family(), True, 1)
        theta = np.zeros(spec.dim)
        assert rz.glm_mean(spec, 1, [[3.0]], theta)[0] == pytest.approx(0.5)

    def test_poisson_at_zero(self):
        spec = rz.MeanSpec(rz.poisson_family(), True, 1)
        theta = np.zeros(spec.dim)
        assert rz.glm_mean(spec, 0, [[1.0]], theta)[0] == pytest.approx(1.0)

    def test_gaussian_linear(self):
        # alpha=1, beta=2, x=3 -> 7
        spec = rz.MeanSpec(rz.gaussian_family(), True, 1)
        theta = np.array([1.0, 0.0, 2.0, 0.0])
        assert rz.glm_mean(spec, 1, [[3.0]], theta)[0] == pytest.approx(7.0)

    def test_overflow_clamp(self):
        spec = rz.MeanSpec(rz.poisson_family(), True, 1)
        theta = np.array([500.0, 0.0, 0.0, 0.0])
        val = rz.glm_mean(spec, 1, [[0.0]], theta)[0]
        assert np.isfinite(val) and val == pytest.approx(np.exp(ETA_CLAMP))

    def test_canonical_link_identity(self, rng):
        for name in ("gaussian", "binomial", "poisson"):
            spec, _, x, theta = random_point(rng, name, 3, True)
            eta = spec.eta(1, x, theta)
            mu = rz.glm_mean(spec, 1, x, theta)
            np.testing.assert_allclose(spec.family.link(mu), eta, atol=1e-12)


class TestScores:
    def test_score_vanishes_at_perfect_fit(self):
        spec = rz.MeanSpec(rz.poisson_family(), True, 2)
        f = rz.glm_score_estfun(spec)
        theta = np.array([0.3, -0.1, 0.2, 0.1, -0.4, 0.2])
        x = np.array([[0.5, -1.0]])
        y = rz.glm_mean(spec, 1, x, theta)
        np.testing.assert_allclose(f.psi1(y, x, theta), 0.0, atol=1e-14)

    def test_other_arm_slots_zero(self, rng):
        for interaction in (True, False):
            spec, y, x, theta = random_point(rng, "poisson", 2, interaction)
            f = rz.glm_score_estfun(spec)
            psi1 = f.psi1(y, x, theta)[0]
            assert psi1[spec.alpha_index(0)] == 0.0
            if interaction:
                assert np.all(psi1[spec.indices(0)] == 0.0)

    def test_poisson_intercept_only_fd(self):
        # two intercept-only arms, theta = (0.3, -0.2)
        spec = rz.MeanSpec(rz.poisson_family(), True, 0)
        f = rz.glm_score_estfun(spec)
        theta = np.array([0.3, -0.2])
        x = np.empty((1, 0))
        for arm, psi, loss in ((1, f.psi1, f.loss1), (0, f.psi0, f.loss0)):
            y = np.array([3.0])
            analytic = psi(y, x, theta)[0]
            numeric = fd_gradient(lambda t: loss(y, x, t)[0], theta)
            assert rel_err(analytic, numeric) < 1e-6

    @pytest.mark.parametrize("family", sorted(FAMILIES))
    @pytest.mark.parametrize("interaction", [True, False])
    def test_gradient_consistency(self, family, interaction):
        gen = rz.make_rng(hash((family, interaction)) % 2**32)
        f = None
        for _ in range(50):
            spec, y, x, theta = random_point(gen, family, 2, interaction)
            f = rz.glm_score_estfun(spec)
            for psi, loss in ((f.psi1, f.loss1), (f.psi0, f.loss0)):
                analytic = psi(y, x, theta)[0]
                numeric = fd_gradient(lambda t: loss(y, x, t)[0], theta)
                assert rel_err(analytic, numeric) < 1e-6

    @pytest.mark.parametrize("family", sorted(FAMILIES))
    def test_jacobian_consistency(self, family):
        gen = rz.make_rng(hash(family) % 2**32)
        for _ in range(50):
            spec, y, x, theta = random_point(gen, family, 2, True)
            f = rz.glm_score_estfun(spec)
            for psi, jac in ((f.psi1, f.jac1), (f.psi0, f.jac0)):
                analytic = jac(y, x, theta)[0]
                numeric = fd_jacobian(lambda t: psi(y, x, t)[0], theta)
                assert rel_err(analytic, numeric) < 1e-6


class TestQVectors:
    def test_gaussian_identity(self, rng):
        spec = rz.MeanSpec(rz.gaussian_family(), True, 2)
        f = rz.glm_score_estfun(spec)
        q1, q0 = rz.canonical_q_vectors(spec, np.zeros(spec.dim))
        for _ in range(20):
            theta = rng.standard_normal(spec.dim)
            x = rng.standard_normal((1, 2))
            y = rng.standard_normal(1)
            resid = y[0] - rz.glm_mean(spec, 1, x, theta)[0]
            assert q1 @ f.psi1(y, x, theta)[0] == pytest.approx(resid, abs=1e-12)
            assert q1 @ f.psi0(y, x, theta)[0] == 0.0
            assert q0 @ f.psi1(y, x, theta)[0] == 0.0

    def test_poisson_randomized(self, rng):
        spec = rz.MeanSpec(rz.poisson_family(), False, 3)
        f = rz.glm_score_estfun(spec)
        theta = 0.3 * rng.standard_normal(spec.dim)
        q1, q0 = rz.canonical_q_vectors(spec, theta)
        for _ in range(100):
            x = rng.standard_normal((1, 3))
            y = np.array([float(rng.poisson(2.0))])
            r1 = y[0] - rz.glm_mean(spec, 1, x, theta)[0]
            r0 = y[0] - rz.glm_mean(spec, 0, x, theta)[0]
            assert abs(q1 @ f.psi1(y, x, theta)[0] - r1) < 1e-12
            assert abs(q0 @ f.psi0(y, x, theta)[0] - r0) < 1e-12
            assert abs(q1 @ f.psi0(y, x, theta)[0]) < 1e-12
            assert abs(q0 @ f.psi1(y, x, theta)[0]) < 1e-12

    def test_negbin_rejected(self):
        spec = rz.MeanSpec(rz.negbin_family(2.0), True, 1)
        with pytest.raises(SpecificationError, match="canonical"):
            rz.canonical_q_vectors(spec, np.zeros(spec.dim))


class TestSquaredLoss:
    def test_score_vanishes_at_perfect_fit(self):
        spec = rz.MeanSpec(rz.poisson_family(), True, 1)
        f = rz.squared_loss_estfun(spec)
        theta = np.array([0.2, 0.5, -0.3, 0.4])
        x = np.array([[0.7]])
        y = rz.glm_mean(spec, 0, x, theta)
        np.testing.assert_allclose(f.psi0(y, x, theta), 0.0, atol=1e-13)

    def test_shared_parameters_rejected(self):
        spec = rz.MeanSpec(rz.gaussian_family(), False, 1)
        with pytest.raises(SpecificationError, match="disjoint"):
            rz.squared_loss_estfun(spec)

    def test_gradient_and_jacobian(self, rng):
        for family in ("gaussian", "binomial", "poisson"):
            spec, y, x, theta = random_point(rng, family, 2, True)
            f = rz.squared_loss_estfun(spec)
            analytic = f.psi1(y, x, theta)[0]
            numeric = fd_gradient(lambda t: f.loss1(y, x, t)[0], theta)
            assert rel_err(analytic, numeric) < 1e-6
            ajac = f.jac1(y, x, theta)[0]
            njac = fd_jacobian(lambda t: f.psi1(y, x, t)[0], theta)
            assert rel_err(ajac, njac) < 1e-6

    def test_linear_forms_match_per_arm_ols(self):
        # normal-equations oracle, computed per arm on the raw data
        gen = rz.make_rng(5)
        n = 60
        x = gen.standard_normal((n, 2))
        y = 1.0 + x @ np.array([0.5, -0.7]) + 0.3 * gen.standard_normal(n)
        d = rz.observe(
            rz.PotentialTable(y + 1.0, y, x), rz.draw_assignment(gen, n, 30)
        )
        spec = rz.MeanSpec(rz.gaussian_family(), True, 2)
        fit = rz.solve(d, rz.squared_loss_estfun(spec))
        assert fit.converged
        for arm in (1, 0):
            mask = d.arm_mask(arm)
            design = np.column_stack([np.ones(mask.sum()), d.x[mask]])
            beta = np.linalg.solve(design.T @ design, design.T @ d.y[mask])
            np.testing.assert_allclose(
                fit.theta_hat[spec.indices(arm)], beta, atol=1e-9
            )


class TestModelSpecStrings:
    def test_basic(self):
        config = parse_model_spec("poisson:interact")
        assert config.family_name == "poisson" and config.interaction

    def test_kappa(self):
        config = parse_model_spec("negbin:interact:kappa=1.5")
        assert config.kappa == 1.5
        spec = config.build(2)
        assert spec.family.kappa == (1.5, 1.5)

    def test_unknown_family(self):
        with pytest.raises(SpecificationError, match="unknown family"):
            parse_model_spec("weibull")

    def test_unknown_token(self):
        with pytest.raises(SpecificationError, match="token"):
            parse_model_spec("poisson:frobnicate")

    def test_negbin_needs_kappa(self):
        with pytest.raises(SpecificationError, match="kappa"):
            parse_model_spec("negbin").build(1)


class TestMomentKappa:
    def test_overdispersed_arm(self):
        # treated arm (0, 4, 8): mean 4, var 16 -> kappa = 4^2 / (16 - 4)
        y = np.array([0.0, 4.0, 8.0, 10.0, 10.0, 10.0])
        z = rz.Assignment([1, 1, 1, 0, 0, 0])
        d = rz.Dataset(z, y)
        k1, k0 = rz.moment_kappa(d)
        assert k1 == pytest.approx(16.0 / 12.0)
        assert k0 == 1e8  # constant arm: no overdispersion

    def test_positive(self, rng):
        y = rng.poisson(3.0, size=40).astype(float)
        d = rz.Dataset(rz.Assignment([1] * 20 + [0] * 20), y)
        k1, k0 = rz.moment_kappa(d)
        assert k1 > 0 and k0 > 0
