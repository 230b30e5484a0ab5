"""Convex domains described by a smooth level-set function.

A domain is ``Omega = {x : xi(x) < 0}``.  The outward normal on (and near) the
boundary is ``grad xi / |grad xi|``.  Two builtin families -- the ball and the
axis-aligned ellipsoid -- carry analytic derivatives; custom domains supply
only ``xi`` and get derivatives by central finite differences.

Every callable on a domain is vectorised over leading axes: positions are
arrays of shape ``(..., 3)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import NotOnBoundary, ProjectionFailed, ZeroGradient

ArrayFn = Callable[[np.ndarray], np.ndarray]

BOUNDARY_TOL_REL = 1e-10
DEFAULT_GRAZE_TOL = 1e-8
GRAD_FD_STEP_REL = 1e-6
# Second differences of xi need a larger step than first differences: with
# h = 1e-6 R the round-off term eps/h^2 would be ~1e-4.
HESS_FD_STEP_REL = 1e-4
_ZERO_GRAD = 1e-14


class BoundaryClass(enum.Enum):
    INCOMING = "incoming"
    OUTGOING = "outgoing"
    GRAZING = "grazing"


@dataclass(frozen=True)
class SymmetryAxis:
    """Axis ``x0 + s * varpi`` about which a domain may be rotationally symmetric."""

    x0: np.ndarray
    varpi: np.ndarray

    def __post_init__(self) -> None:
        x0 = np.asarray(self.x0, dtype=float).reshape(3)
        varpi = np.asarray(self.varpi, dtype=float).reshape(3)
        if not np.linalg.norm(varpi) > 0.0:
            raise ValueError("symmetry axis direction must be nonzero")
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "varpi", varpi)


class LevelSetDomain:
    """A bounded convex region ``{xi < 0}``.

    Parameters
    ----------
    xi, grad_xi, hess_xi
        Vectorised callables.  ``grad_xi``/``hess_xi`` may be omitted; they
        are then replaced by central finite differences.
    bounding_radius
        Radius of a ball about ``center`` containing the closure of the domain.
    center
        An interior witness point (``xi(center) < 0``).
    builtin
        ``"ball"``, ``"ellipsoid"`` or ``"custom"``.
    c_xi
        Certified lower bound for the Hessian eigenvalues on the closure, if
        known analytically.
    semi_axes
        For builtins only: the ellipsoid semi-axes.
    """

    def __init__(
        self,
        xi: ArrayFn,
        *,
        bounding_radius: float,
        center=(0.0, 0.0, 0.0),
        grad_xi: Optional[ArrayFn] = None,
        hess_xi: Optional[ArrayFn] = None,
        builtin: str = "custom",
        c_xi: Optional[float] = None,
        semi_axes=None,
    ) -> None:
        if not bounding_radius > 0:
            raise ValueError("bounding_radius must be positive")
        self._xi = xi
        self.bounding_radius = float(bounding_radius)
        self.center = np.asarray(center, dtype=float).reshape(3)
        self.builtin = builtin
        self.c_xi = c_xi
        self.semi_axes = None if semi_axes is None else np.asarray(semi_axes, dtype=float).reshape(3)
        self._grad = grad_xi
        self._hess = hess_xi
        self.boundary_tol = BOUNDARY_TOL_REL * self.bounding_radius
        if not float(self.xi(self.center)) < 0.0:
            raise ValueError("center must be an interior point (xi(center) < 0)")

    # -- constructors -------------------------------------------------------
    @classmethod
    def ellipsoid(cls, semi_axes, center=(0.0, 0.0, 0.0)) -> "LevelSetDomain":
        """``xi(x) = sum(((x - c)_i / a_i)^2) - 1``."""
        a = np.asarray(semi_axes, dtype=float).reshape(3)
        if np.any(a <= 0):
            raise ValueError("semi-axes must be positive")
        c = np.asarray(center, dtype=float).reshape(3)
        inv2 = 1.0 / a**2

        def xi(x):
            d = np.asarray(x, dtype=float) - c
            return np.sum(d * d * inv2, axis=-1) - 1.0

        def grad(x):
            return 2.0 * (np.asarray(x, dtype=float) - c) * inv2

        hess_const = np.diag(2.0 * inv2)

        def hess(x):
            x = np.asarray(x, dtype=float)
            return np.broadcast_to(hess_const, x.shape[:-1] + (3, 3)).copy()

        tag = "ball" if np.allclose(a, a[0], rtol=0, atol=0) else "ellipsoid"
        return cls(
            xi,
            grad_xi=grad,
            hess_xi=hess,
            bounding_radius=float(a.max()),
            center=c,
            builtin=tag,
            c_xi=float(2.0 * inv2.min()),
            semi_axes=a,
        )

    @classmethod
    def ball(cls, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> "LevelSetDomain":
        return cls.ellipsoid((radius, radius, radius), center)

    @classmethod
    def custom(cls, xi: ArrayFn, *, bounding_radius: float, center=(0.0, 0.0, 0.0),
               grad_xi: Optional[ArrayFn] = None, hess_xi: Optional[ArrayFn] = None) -> "LevelSetDomain":
        return cls(xi, grad_xi=grad_xi, hess_xi=hess_xi, bounding_radius=bounding_radius,
                   center=center, builtin="custom")

    # -- level set and derivatives ------------------------------------------
    @property
    def is_quadric(self) -> bool:
        return self.semi_axes is not None

    def xi(self, x) -> np.ndarray:
        return np.asarray(self._xi(np.asarray(x, dtype=float)), dtype=float)

    def grad_xi(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self._grad is not None:
            return np.asarray(self._grad(x), dtype=float)
        h = GRAD_FD_STEP_REL * self.bounding_radius
        out = np.empty(x.shape, dtype=float)
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            out[..., i] = (self.xi(x + e) - self.xi(x - e)) / (2.0 * h)
        return out

    def hess_xi(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self._hess is not None:
            H = np.asarray(self._hess(x), dtype=float)
            return 0.5 * (H + np.swapaxes(H, -1, -2))
        h = HESS_FD_STEP_REL * self.bounding_radius
        f0 = self.xi(x)
        H = np.empty(x.shape[:-1] + (3, 3), dtype=float)
        eye = np.eye(3) * h
        for i in range(3):
            ei = eye[i]
            H[..., i, i] = (self.xi(x + ei) - 2.0 * f0 + self.xi(x - ei)) / h**2
            for j in range(i + 1, 3):
                ej = eye[j]
                val = (self.xi(x + ei + ej) - self.xi(x + ei - ej)
                       - self.xi(x - ei + ej) + self.xi(x - ei - ej)) / (4.0 * h * h)
                H[..., i, j] = val
                H[..., j, i] = val
        return H

    def normal(self, x) -> np.ndarray:
        """``grad xi / |grad xi|`` without boundary checks (vectorised)."""
        g = self.grad_xi(x)
        return g / np.linalg.norm(g, axis=-1, keepdims=True)

    # -- derived geometric constants ---------------------------------------
    def curvature_bound(self, samples: int = 4000, seed: int = 0) -> float:
        """Upper bound for the normal curvature of the boundary.

        Exact for the builtin ellipsoid (``max(a) / min(a)^2``); for custom
        domains a sampled maximum of the tangential Hessian, times two.
        """
        if self.is_quadric:
            a = self.semi_axes
            return float(a.max() / a.min() ** 2)
        rng = np.random.default_rng(seed)
        d = rng.standard_normal((samples, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        xb = self.project_to_boundary(d)
        g = self.grad_xi(xb)
        gn = np.linalg.norm(g, axis=1)
        n = g / gn[:, None]
        H = self.hess_xi(xb)
        P = np.eye(3)[None] - n[:, :, None] * n[:, None, :]
        T = P @ H @ P
        kmax = np.linalg.eigvalsh(T).max(axis=1) / gn
        return float(2.0 * kmax.max())

    def third_derivative_bound(self, samples: int = 2000, seed: int = 0) -> float:
        """Bound on ``|D^3 xi[e, e, e]|`` over unit ``e`` (zero for quadrics)."""
        if self.is_quadric:
            return 0.0
        rng = np.random.default_rng(seed)
        pts = sample_interior(self, samples, rng)
        e = rng.standard_normal((samples, 3))
        e /= np.linalg.norm(e, axis=1, keepdims=True)
        h = HESS_FD_STEP_REL * self.bounding_radius * 10.0
        d3 = (self.xi(pts + 2 * h * e) - 2 * self.xi(pts + h * e)
              + 2 * self.xi(pts - h * e) - self.xi(pts - 2 * h * e)) / (2 * h**3)
        return float(2.0 * np.abs(d3).max())

    # -- boundary projection ---------------------------------------------------
    def project_to_boundary(self, directions) -> np.ndarray:
        """Boundary points ``center + s d`` along rays from the interior witness."""
        d = np.asarray(directions, dtype=float)
        d = d / np.linalg.norm(d, axis=-1, keepdims=True)
        if self.is_quadric:
            s = 1.0 / np.sqrt(np.sum((d / self.semi_axes) ** 2, axis=-1))
            return self.center + s[..., None] * d
        flat = d.reshape(-1, 3)
        lo = np.zeros(len(flat))
        hi = np.full(len(flat), 2.0 * self.bounding_radius)
        if np.any(self.xi(self.center + hi[:, None] * flat) <= 0):
            raise ProjectionFailed("boundary not found along a ray within 2*bounding_radius")
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            inside = self.xi(self.center + mid[:, None] * flat) <= 0
            lo = np.where(inside, mid, lo)
            hi = np.where(inside, hi, mid)
            if np.all(hi - lo <= 1e-15 * self.bounding_radius):
                break
        pts = self.center + (0.5 * (lo + hi))[:, None] * flat
        return pts.reshape(d.shape)


# ---------------------------------------------------------------------------
def _require_boundary(domain: LevelSetDomain, x: np.ndarray) -> None:
    val = float(domain.xi(x))
    if abs(val) > domain.boundary_tol:
        raise NotOnBoundary(f"|xi(x)| = {abs(val):.3e} exceeds {domain.boundary_tol:.1e}")


def outward_normal(domain: LevelSetDomain, x) -> np.ndarray:
    """Unit outward normal at a boundary point."""
    x = np.asarray(x, dtype=float).reshape(3)
    g = domain.grad_xi(x)
    gn = float(np.linalg.norm(g))
    if gn < _ZERO_GRAD:
        raise ZeroGradient(f"|grad xi| = {gn:.3e} at {x}")
    _require_boundary(domain, x)
    return g / gn


def classify_boundary(domain: LevelSetDomain, x, v, graze_tol: float = DEFAULT_GRAZE_TOL) -> BoundaryClass:
    _require_boundary(domain, np.asarray(x, dtype=float).reshape(3))
    n = outward_normal(domain, x)
    s = float(np.dot(n, np.asarray(v, dtype=float)))
    if s > graze_tol:
        return BoundaryClass.OUTGOING
    if s < -graze_tol:
        return BoundaryClass.INCOMING
    return BoundaryClass.GRAZING


def sample_interior(domain: LevelSetDomain, count: int, rng: np.random.Generator,
                    include_boundary: bool = False) -> np.ndarray:
    """Uniform samples of the closed domain by rejection from the bounding ball."""
    out = []
    have = 0
    R = domain.bounding_radius
    attempts = 0
    while have < count:
        m = max(2 * (count - have), 64)
        d = rng.standard_normal((m, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        r = R * rng.random(m) ** (1.0 / 3.0)
        p = domain.center + r[:, None] * d
        keep = p[domain.xi(p) <= 0.0]
        out.append(keep)
        have += len(keep)
        attempts += 1
        if attempts > 1000:
            raise RuntimeError("rejection sampling of the domain failed")
    pts = np.concatenate(out)[:count]
    if include_boundary:
        d = rng.standard_normal((count, 3))
        pts = np.concatenate([pts, domain.project_to_boundary(d)])
    return pts


def check_convexity(domain: LevelSetDomain, sample_count: int, seed: int) -> dict:
    """Sampled certification of a positive-definite Hessian on the closure."""
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    rng = np.random.default_rng(seed)
    pts = np.concatenate([domain.center[None], sample_interior(domain, sample_count, rng)])
    eig = np.linalg.eigvalsh(domain.hess_xi(pts))
    observed = float(eig[:, 0].min())
    return {"passed": bool(observed > 0.0), "observed_c_xi": observed}


def check_rotational_symmetry(domain: LevelSetDomain, axis: SymmetryAxis, sample_count: int,
                              seed: int) -> dict:
    """Largest ``|((x - x0) x varpi) . n(x)|`` over sampled boundary points."""
    rng = np.random.default_rng(seed)
    d = rng.standard_normal((sample_count, 3))
    xb = domain.project_to_boundary(d)
    n = domain.normal(xb)
    viol = np.abs(np.einsum("ij,ij->i", np.cross(xb - axis.x0, axis.varpi), n))
    return {"max_violation": float(viol.max())}
