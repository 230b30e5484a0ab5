import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate
from scipy.spatial.transform import Rotation

from kinetic_bc.collision import (
    MU_MASS,
    GridFunction,
    KernelConfig,
    VelocityGrid,
    WeightParams,
    apply_K,
    collision_frequency,
    flux_measure,
    gamma_bilinear,
    gamma_loss,
    grad_majorant,
    K_w,
    kw_bound_check,
    kw_quadratic_form,
    loss_frequency,
    maxwellian,
    sqrt_maxwellian,
    weight_w,
    weight_wtilde,
)
from kinetic_bc.errors import DiagonalSingularity, InvalidParameters, QuadratureUnderResolved

CFG0 = KernelConfig(gamma=0.0)
CFG1 = KernelConfig(gamma=1.0)
PARAMS = WeightParams(rho=0.1, beta=1.0, theta=0.2)


def invariants(u):
    """(1, v1, v2, v3, |v|^2) sqrt(mu) stacked on a trailing axis."""
    u = np.asarray(u, dtype=float)
    phi = np.concatenate([np.ones(u.shape[:-1] + (1,)), u, np.sum(u * u, -1)[..., None]], -1)
    return sqrt_maxwellian(u)[..., None] * phi


def nu_oracle(gamma, v):
    """Direct two-dimensional quadrature of int |v-u|^gamma mu(u) du times int |cos| domega."""
    s = float(np.linalg.norm(v))
    inner = integrate.dblquad(
        lambda c, r: 2 * np.pi * r * r * np.exp(-r * r / 2) * (s * s + r * r - 2 * s * r * c) ** (gamma / 2),
        0, 14, -1, 1, epsabs=0, epsrel=1e-11)[0]
    sphere = 2 * np.pi * integrate.quad(lambda c: abs(c), -1, 1, points=[0.0])[0]
    return inner * sphere


class TestWeights:
    def test_origin(self):
        assert maxwellian(np.zeros(3)) == 1.0
        assert weight_w(PARAMS, np.zeros(3)) == 1.0
        assert weight_wtilde(PARAMS, np.zeros(3)) == 1.0

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-8, 8), min_size=3, max_size=3),
           st.floats(1e-4, 2.0), st.floats(-2.0, 3.0), st.floats(0.0, 0.249))
    def test_product_identity(self, v, rho, beta, theta):
        p = WeightParams(rho, beta, theta)
        v = np.array(v)
        assert weight_w(p, v) * weight_wtilde(p, v) * sqrt_maxwellian(v) == pytest.approx(1.0, rel=1e-12)

    def test_wtilde_at_least_one(self):
        # (1/4 - theta) >= beta rho makes the exponential beat the polynomial
        p = WeightParams(rho=1e-3, beta=1.0, theta=0.2)
        grid = VelocityGrid.uniform()
        assert np.all(weight_wtilde(p, grid.nodes) >= 1.0)

    def test_theta_range(self):
        with pytest.raises(InvalidParameters):
            WeightParams(0.1, 1.0, 0.25)
        with pytest.raises(InvalidParameters):
            WeightParams(0.0, 1.0, 0.1)
        edge = WeightParams(0.1, 1.0, 0.25, allow_boundary=True)
        assert not edge.admissible

    @pytest.mark.parametrize("beta, theta, expected", [
        (1.0, 0.1, True),
        (-3.0, 0.01, True),
        (2.0, 0.0, True),    # |v|^(5 - 4 beta) r^2: integrable once beta > 3/2
        (1.0, 0.0, False),
        (1.5, 0.0, False),
    ])
    def test_integrability_flag(self, beta, theta, expected):
        assert WeightParams(1.0, beta, theta).integrable is expected


class TestKernelConfig:
    def test_gamma_range(self):
        with pytest.raises(InvalidParameters):
            KernelConfig(gamma=1.5)

    def test_angular_cutoff(self):
        with pytest.raises(InvalidParameters):
            KernelConfig(q0=lambda c: np.ones_like(c))
        assert KernelConfig(q0=lambda c: 0.5 * c * c).cutoff_constant == pytest.approx(0.5)
        assert CFG0.cutoff_constant == pytest.approx(1.0)


class TestVelocityGrid:
    def test_uniform_mass(self):
        g = VelocityGrid.uniform(6.0, 24)
        assert len(g.nodes) == 24 ** 3
        assert g.integrate(maxwellian(g.nodes)) == pytest.approx(MU_MASS, rel=1e-6)

    def test_gauss_hermite_moments(self):
        g = VelocityGrid.gauss_hermite(5)
        m = maxwellian(g.nodes)
        assert g.integrate(m) == pytest.approx(MU_MASS, rel=1e-13)
        assert g.integrate(m * np.sum(g.nodes ** 2, 1)) == pytest.approx(3 * MU_MASS, rel=1e-13)

    def test_truncated_box_rejected(self):
        with pytest.raises(InvalidParameters):
            VelocityGrid.uniform(2.0, 24)

    def test_grid_function_interpolates(self):
        g = VelocityGrid.uniform(6.0, 24)
        fun = GridFunction(g, maxwellian(g.nodes))
        v = np.random.default_rng(0).uniform(-3, 3, (50, 3))
        npt.assert_allclose(fun(v), maxwellian(v), atol=5e-3)
        assert fun(np.array([10.0, 0, 0])) == 0.0


class TestCollisionFrequency:
    def test_gamma_zero_constant(self):
        v = np.random.default_rng(1).normal(size=(20, 3)) * 3
        nu = collision_frequency(CFG0, v)
        oracle = nu_oracle(0.0, np.zeros(3))
        assert oracle == pytest.approx(2 * np.pi * (2 * np.pi) ** 1.5, rel=1e-10)
        npt.assert_allclose(nu, oracle, rtol=1e-10)

    @pytest.mark.parametrize("speed", [0.0, 0.3, 1.0, 2.5, 6.0])
    def test_gamma_one_against_oracle(self, speed):
        assert collision_frequency(CFG1, [speed, 0, 0]) == pytest.approx(nu_oracle(1.0, [speed, 0, 0]), rel=1e-8)

    def test_hard_potential_growth(self):
        s = np.linspace(0, 8, 81)
        ratio = collision_frequency(CFG1, np.column_stack([s, 0 * s, 0 * s])) / (1 + s)
        # comparable to 1 + |v|: the ratio stays in a fixed band
        assert ratio.min() > 50 and ratio.max() < 200
        assert ratio.max() / ratio.min() < 2.0

    def test_isotropy_and_rotation(self):
        rng = np.random.default_rng(2)
        v = rng.normal(size=(50, 3)) * 2
        R = Rotation.random(50, random_state=3)
        base = collision_frequency(CFG1, v)
        npt.assert_allclose(collision_frequency(CFG1, -v), base, rtol=1e-12)
        npt.assert_allclose(collision_frequency(CFG1, R.apply(v)), base, rtol=1e-6)

    def test_product_rule_agrees(self):
        v = np.random.default_rng(4).uniform(-3, 3, (30, 3))
        npt.assert_allclose(loss_frequency(CFG0, v), collision_frequency(CFG0, v), rtol=1e-8)
        npt.assert_allclose(loss_frequency(CFG1, v), collision_frequency(CFG1, v), rtol=1e-3)

    def test_underresolved(self):
        with pytest.raises(QuadratureUnderResolved):
            collision_frequency(KernelConfig(gamma=1.0, nu_nodes=2), [1.0, 0, 0])


class TestKernel:
    V = np.random.default_rng(5).uniform(-3.5, 3.5, (60, 3))

    @pytest.mark.parametrize("cfg", [CFG0, CFG1], ids=["gamma0", "gamma1"])
    def test_null_space(self, cfg):
        K = apply_K(cfg, None, invariants, self.V)
        nuf = collision_frequency(cfg, self.V)[:, None] * invariants(self.V)
        err = np.max(np.abs(K - nuf), axis=0) / np.max(np.abs(nuf), axis=0)
        assert np.all(err < 1e-3), err

    def test_maxwellian_collisions_vanish(self):
        # Gamma(sqrt mu, sqrt mu) = Q(mu, mu)/sqrt(mu)
        g = gamma_bilinear(CFG1, None, sqrt_maxwellian, sqrt_maxwellian, self.V)
        scale = np.max(collision_frequency(CFG1, self.V) * sqrt_maxwellian(self.V))
        assert np.max(np.abs(g)) <= 1e-12 * scale

    def test_zero(self):
        zero = lambda u: np.zeros(u.shape[:-1])  # noqa: E731
        npt.assert_array_equal(apply_K(CFG1, None, zero, self.V[:5]), 0.0)
        npt.assert_array_equal(gamma_bilinear(CFG1, None, zero, zero, self.V[:5]), 0.0)

    def test_linearity(self):
        f = lambda u: np.sin(u[..., 0]) * sqrt_maxwellian(u)  # noqa: E731
        g = lambda u: u[..., 1] ** 3 * maxwellian(u)  # noqa: E731
        v = self.V[:8]
        lhs = apply_K(CFG1, None, lambda u: 2 * f(u) - 3 * g(u), v)
        npt.assert_allclose(lhs, 2 * apply_K(CFG1, None, f, v) - 3 * apply_K(CFG1, None, g, v), atol=1e-12)

    def test_weighted_variant(self):
        h = lambda u: np.cos(u[..., 2]) * maxwellian(u)  # noqa: E731
        v = self.V[:8]
        direct = weight_w(PARAMS, v) * apply_K(CFG0, None, lambda u: h(u) / weight_w(PARAMS, u), v)
        npt.assert_allclose(K_w(CFG0, PARAMS, h, v), direct, rtol=1e-14)

    def test_refinement_guard(self):
        coarse = KernelConfig(gamma=1.0, u_radial=3, u_polar=2, u_azimuth=2, omega_polar=1, omega_azimuth=2)
        f = lambda u: np.exp(-np.sum((u - 1.0) ** 2, -1))  # noqa: E731
        with pytest.raises(QuadratureUnderResolved):
            apply_K(coarse, None, f, self.V[:3], check=True)


class TestGamma:
    def test_shifted_maxwellian(self):
        u0 = np.array([0.1, 0.0, 0.0])
        f = lambda u: (np.exp(-0.5 * np.sum((u - u0) ** 2, -1)) - maxwellian(u)) / sqrt_maxwellian(u)  # noqa: E731
        v = np.random.default_rng(6).uniform(-3, 3, (40, 3))
        for cfg in (CFG0, CFG1):
            G = gamma_bilinear(cfg, None, f, f, v)
            Lf = collision_frequency(cfg, v) * f(v) - apply_K(cfg, None, f, v)
            assert np.max(np.abs(G - Lf)) <= 1e-2 * np.max(np.abs(Lf))

    def test_loss_nonnegative(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            c = rng.uniform(-1, 1, 3)
            F = lambda u: np.exp(-0.5 * np.sum((u - c) ** 2, -1)) * (1 + 0.5 * np.sin(3 * u[..., 0]))  # noqa: E731
            g = lambda u: F(u) / sqrt_maxwellian(u)  # noqa: E731
            assert np.all(gamma_loss(CFG1, g, g, rng.uniform(-3, 3, (30, 3))) >= 0)

    def test_weighted_bound_fitted_constant(self):
        # |w Gamma(h1/w, h2/w)| <= C {w (1+|v|)^gamma |f1| + |w f1|_inf} |w f2|_inf with one C
        params = WeightParams(0.1, 1.0, 0.1)
        rng = np.random.default_rng(8)
        v = rng.uniform(-3, 3, (20, 3))

        def ratios(seed):
            r = np.random.default_rng(seed)
            a1, a2 = r.normal(size=3), r.normal(size=3)
            h1 = lambda u: np.tanh(u @ a1)  # noqa: E731
            h2 = lambda u: np.cos(u @ a2)  # noqa: E731
            lhs = np.abs(gamma_bilinear(CFG1, params, h1, h2, v, weighted=True))
            rhs = ((1 + np.linalg.norm(v, axis=1)) * np.abs(h1(v)) + 1.0) * 1.0
            return lhs / rhs

        C_fit = max(ratios(s).max() for s in range(3))
        assert np.isfinite(C_fit) and C_fit > 0
        # the fitted constant covers fresh functions up to a modest safety factor
        for s in range(3, 8):
            assert ratios(s).max() <= 2.0 * C_fit


class TestGradMajorant:
    def test_value(self):
        assert grad_majorant(None, [0, 0, 0], [1, 0, 0], 0.0) == pytest.approx(2 * np.exp(-0.25), rel=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=6, max_size=6), st.floats(0.0, 0.5))
    def test_symmetric(self, xs, eps):
        v, vp = np.array(xs[:3]), np.array(xs[3:])
        if np.linalg.norm(v - vp) < 1e-6:
            return
        assert grad_majorant(None, v, vp, eps) == pytest.approx(grad_majorant(None, vp, v, eps), rel=1e-13)

    def test_diagonal(self):
        with pytest.raises(DiagonalSingularity):
            grad_majorant(None, [1, 2, 3], [1, 2, 3])
        d = np.array([1e-3, 1e-5, 1e-7])
        vals = np.array([grad_majorant(None, [0, 0, 0], [x, 0, 0]) for x in d])
        npt.assert_allclose(vals * d, 1.0, rtol=1e-5)


class TestKwBound:
    speeds = np.linspace(0, 8, 17)

    @pytest.mark.parametrize("theta", [0.05, 0.1, 0.2, 0.24])
    def test_bounded_and_stable(self, theta):
        r = kw_bound_check(WeightParams(0.1, 1.0, theta), CFG1, self.speeds, 0.0)
        assert r["precheck"]["negative_definite"]
        assert r["ok"] and np.isfinite(r["max_product"])
        assert r["refinement_gap"] <= 0.02

    def test_quadrature_against_direct(self):
        from kinetic_bc.collision import _kw_integral
        p = WeightParams(0.1, 1.0, 0.2)
        v = np.array([3.0, 0, 0])

        def log_w(u):
            s = float(u @ u)
            return p.beta * np.log1p(p.rho * s) + p.theta * s

        def g(c, a):
            vp = v - a * np.array([c, np.sqrt(1 - c * c), 0.0])
            return 2 * np.pi * a * a * grad_majorant(None, v, vp) * np.exp(log_w(v) - log_w(vp))

        ref = integrate.dblquad(g, 1e-9, 60, -1, 1, epsrel=1e-10)[0]
        assert _kw_integral(p, 3.0, 0.0, 96) == pytest.approx(ref, rel=1e-8)

    def test_boundary_theta_fails_precheck(self):
        form = kw_quadratic_form(0.25, 0.0)
        assert form["discriminant"] == pytest.approx(0.0, abs=1e-15)
        r = kw_bound_check(WeightParams(0.1, 1.0, 0.25, allow_boundary=True), CFG1, self.speeds, 0.0)
        assert not r["ok"] and r["max_product"] is None

    def test_discriminant_formula(self):
        for th in (0.0, 0.1, 0.2):
            assert kw_quadratic_form(th, 0.0)["discriminant"] == pytest.approx(4 * th * th - 0.25, abs=1e-15)

    def test_epsilon_increases_integrand(self):
        p = WeightParams(0.1, 1.0, 0.1)
        a = kw_bound_check(p, CFG1, self.speeds, 0.0)
        b = kw_bound_check(p, CFG1, self.speeds, 0.05)
        assert b["ok"] and np.all(np.array(b["products"]) > np.array(a["products"]))


class TestFluxMeasure:
    def test_normalisation_constant(self):
        # half-space Gaussian flux: (int e^{-t^2/2} dt)^2 * int_0^inf s e^{-s^2/2} ds
        t = integrate.quad(lambda x: np.exp(-x * x / 2), -np.inf, np.inf)[0]
        s = integrate.quad(lambda x: x * np.exp(-x * x / 2), 0, np.inf)[0]
        assert t * t * s == pytest.approx(2 * np.pi, rel=1e-12)
        assert flux_measure(PARAMS, [0, 0, 1])["c_mu"] == pytest.approx(1 / (2 * np.pi), rel=1e-10)

    def test_probability_measure(self):
        rng = np.random.default_rng(9)
        for n in rng.normal(size=(10, 3)):
            assert abs(flux_measure(PARAMS, n)["total_mass"] - 1.0) <= 1e-8

    def test_wtilde_square(self):
        r = flux_measure(WeightParams(1e-12, 1.0, 0.2), [0.2, -0.4, 0.8])
        assert r["wtilde_sq_integral"] == pytest.approx(1 / (16 * 0.2 ** 2), rel=1e-3)
        assert r["wtilde_sq_integral"] == pytest.approx(1.5625, rel=1e-3)
