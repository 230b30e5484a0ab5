import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings, strategies as st

from kinetic_bc.errors import NotOnBoundary, ZeroGradient
from kinetic_bc.geometry import (
    BoundaryClass,
    LevelSetDomain,
    SymmetryAxis,
    check_convexity,
    check_rotational_symmetry,
    classify_boundary,
    outward_normal,
)


@pytest.fixture(scope="module")
def ball():
    return LevelSetDomain.ball()


@pytest.fixture(scope="module")
def ell():
    # xi = x1^2/4 + x2^2 + x3^2 - 1
    return LevelSetDomain.ellipsoid([2.0, 1.0, 1.0])


def _nonconvex():
    c = 0.5
    return LevelSetDomain.custom(lambda x: np.sum(x * x, -1) ** 2 - np.sum(x * x, -1) - c,
                                 bounding_radius=1.3)


class TestNormal:
    def test_ball_axis_points(self, ball):
        npt.assert_allclose(outward_normal(ball, [1, 0, 0]), [1, 0, 0], atol=1e-15)
        npt.assert_allclose(outward_normal(ball, [0, 0, -1]), [0, 0, -1], atol=1e-15)

    def test_ellipsoid_tip(self, ell):
        # analytic gradient (x1/2, 2 x2, 2 x3) = (1, 0, 0) at (2, 0, 0)
        npt.assert_allclose(outward_normal(ell, [2, 0, 0]), [1, 0, 0], atol=1e-15)

    def test_off_boundary_rejected(self, ball):
        with pytest.raises(NotOnBoundary):
            outward_normal(ball, [0.5, 0, 0])

    def test_zero_gradient(self):
        dom = LevelSetDomain.custom(lambda x: np.sum(x * x, -1) ** 2 - 1.0, bounding_radius=1.5)
        with pytest.raises(ZeroGradient):
            outward_normal(dom, [0.0, 0.0, 0.0])

    def test_closed_form_on_random_points(self, ell):
        rng = np.random.default_rng(1)
        xb = ell.project_to_boundary(rng.standard_normal((500, 3)))
        g = np.array([xb[:, 0] / 2, 2 * xb[:, 1], 2 * xb[:, 2]]).T
        npt.assert_allclose(ell.normal(xb), g / np.linalg.norm(g, axis=1, keepdims=True), atol=1e-12)

    def test_rescaling_invariance(self, ell):
        doubled = LevelSetDomain.custom(lambda x: 2.0 * ell.xi(x), bounding_radius=2.0)
        rng = np.random.default_rng(2)
        xb = ell.project_to_boundary(rng.standard_normal((200, 3)))
        # FD gradient of the doubled level set; the normal is unchanged
        npt.assert_allclose(doubled.normal(xb), ell.normal(xb), atol=1e-8)
        scaled = LevelSetDomain(lambda x: 2.0 * ell.xi(x), grad_xi=lambda x: 2.0 * ell.grad_xi(x),
                                bounding_radius=2.0)
        npt.assert_allclose(scaled.normal(xb), ell.normal(xb), atol=1e-12)

    def test_fd_gradient_matches_analytic(self, ell):
        fd = LevelSetDomain.custom(ell.xi, bounding_radius=2.0)
        rng = np.random.default_rng(3)
        x = rng.uniform(-0.5, 0.5, (100, 3))
        npt.assert_allclose(fd.grad_xi(x), ell.grad_xi(x), atol=1e-8)
        npt.assert_allclose(fd.hess_xi(x), ell.hess_xi(x), atol=1e-6)


class TestConvexity:
    def test_ball_constant(self, ball):
        res = check_convexity(ball, 100, 0)
        assert res["passed"]
        assert res["observed_c_xi"] == pytest.approx(2.0, abs=1e-12)

    def test_ellipsoid_constant(self, ell):
        res = check_convexity(ell, 100, 0)
        assert res["passed"]
        assert res["observed_c_xi"] == pytest.approx(0.5, abs=1e-12)

    def test_nonconvex_detected(self):
        dom = _nonconvex()
        # oracle: Hessian of |x|^4 - |x|^2 at the origin is -2 I
        npt.assert_allclose(dom.hess_xi(np.zeros(3)), -2 * np.eye(3), atol=1e-6)
        res = check_convexity(dom, 200, 0)
        assert not res["passed"]
        assert res["observed_c_xi"] < 0

    def test_hessian_symmetric(self):
        dom = _nonconvex()
        rng = np.random.default_rng(4)
        H = dom.hess_xi(rng.uniform(-0.6, 0.6, (50, 3)))
        assert np.max(np.abs(H - np.swapaxes(H, 1, 2))) <= 1e-12 * np.max(np.abs(H))


class TestSymmetry:
    def test_ball(self, ball):
        r = check_rotational_symmetry(ball, SymmetryAxis([0, 0, 0], [0, 0, 1]), 1000, 0)
        assert r["max_violation"] <= 1e-12

    def test_ellipsoid_axis_of_revolution(self, ell):
        r = check_rotational_symmetry(ell, SymmetryAxis([0, 0, 0], [1, 0, 0]), 1000, 0)
        assert r["max_violation"] <= 1e-10

    def test_ellipsoid_wrong_axis(self, ell):
        r = check_rotational_symmetry(ell, SymmetryAxis([0, 0, 0], [0, 0, 1]), 1000, 0)
        assert r["max_violation"] >= 0.1

    def test_zero_axis_rejected(self):
        with pytest.raises(ValueError):
            SymmetryAxis([0, 0, 0], [0, 0, 0])


class TestClassification:
    @pytest.mark.parametrize(
        "v, expected",
        [
            ([1, 0, 0], BoundaryClass.OUTGOING),
            ([0, 1, 0], BoundaryClass.GRAZING),
            ([-1, 0.5, 0], BoundaryClass.INCOMING),
            ([1e-9, 1, 0], BoundaryClass.GRAZING),
        ],
    )
    def test_ball(self, ball, v, expected):
        assert classify_boundary(ball, [1, 0, 0], v, 1e-8) is expected

    def test_needs_boundary(self, ball):
        with pytest.raises(NotOnBoundary):
            classify_boundary(ball, [0, 0, 0], [1, 0, 0])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=3, max_size=3).filter(lambda d: np.linalg.norm(d) > 1e-3),
       st.lists(st.floats(0.3, 3.0), min_size=3, max_size=3))
def test_projection_lands_on_boundary(d, axes):
    dom = LevelSetDomain.ellipsoid(axes)
    xb = dom.project_to_boundary(np.array(d))
    assert abs(float(dom.xi(xb))) <= 1e-12
    n = outward_normal(dom, xb)
    assert abs(np.linalg.norm(n) - 1.0) <= 1e-12
