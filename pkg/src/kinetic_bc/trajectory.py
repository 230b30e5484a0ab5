"""Free flight in a convex domain: backward exit times and their calculus.

The backward exit time of a phase point ``(x, v)`` is
``t_b = sup{tau >= 0 : x - tau v in closure(Omega)}`` and the exit point is
``x_b = x - t_b v``.  Besides the scalar routine :func:`backward_exit`, which
follows the bracket/bisect/Newton recipe and works for any level set, the
module offers :func:`exit_times`, a vectorised version with a closed-form
root for quadric domains, used by the cycle tracers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GrazingExit, NoExit, SegmentLeavesDomain, ZeroVelocity
from .geometry import DEFAULT_GRAZE_TOL, LevelSetDomain, check_convexity, outward_normal

MARCH_DIVISIONS = 64
BISECT_RTOL = 1e-12
VELOCITY_CHECKPOINTS = 32


@dataclass(frozen=True)
class PhasePoint:
    x: np.ndarray
    v: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float).reshape(3))
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float).reshape(3))


@dataclass(frozen=True)
class ExitRecord:
    t_b: float
    x_b: np.ndarray
    normal: np.ndarray
    dot: float
    grazing: bool


@dataclass(frozen=True)
class GronwallConstant:
    C_xi: float

    def __post_init__(self) -> None:
        if not np.isfinite(self.C_xi) or self.C_xi < 0:
            raise ValueError("C_xi must be finite and nonnegative")


# ---------------------------------------------------------------------------
# scalar exit time
# ---------------------------------------------------------------------------
def backward_exit(domain: LevelSetDomain, p: PhasePoint,
                  graze_tol: float = DEFAULT_GRAZE_TOL) -> ExitRecord:
    """Backward exit record of ``p``.

    The backward ray is marched with step ``R/64`` until it first leaves the
    closed domain; the crossing is then bisected to ``1e-12`` relative width
    and polished with two guarded Newton steps.  Convexity makes
    ``{tau : xi(x - tau v) <= 0}`` an interval starting at 0, so the
    bisection predicate is monotone even from boundary start points.

    ``grazing`` is set when ``|v.n(x_b)| <= graze_tol * |v|``.
    """
    x, v = p.x, p.v
    speed = float(np.linalg.norm(v))
    if speed == 0.0:
        raise ZeroVelocity("backward exit needs |v| > 0")
    if float(domain.xi(x)) > domain.boundary_tol:
        raise ValueError("phase point lies outside the closed domain")
    if abs(float(domain.xi(x))) <= domain.boundary_tol:
        # boundary start whose velocity is tangential up to the grazing band:
        # the backward ray leaves at once, so report the start as a grazing exit
        g0 = domain.grad_xi(x)
        gn = float(np.linalg.norm(g0))
        if gn > 0.0 and abs(float(np.dot(g0, v))) <= graze_tol * speed * gn:
            n0 = g0 / gn
            return ExitRecord(0.0, x.copy(), n0, float(np.dot(v, n0)), True)
    R = domain.bounding_radius
    dt = R / MARCH_DIVISIONS / speed
    n_steps = 2 * MARCH_DIVISIONS + 1
    taus = dt * np.arange(1, n_steps + 1)
    vals = domain.xi(x[None, :] - taus[:, None] * v[None, :])
    outside = np.nonzero(vals > 0.0)[0]
    if outside.size == 0:
        raise NoExit("backward ray stayed inside the bounding bracket")
    i = int(outside[0])
    hi = float(taus[i])
    lo = float(taus[i - 1]) if i > 0 else 0.0
    abs_floor = 1e-15 * R / speed
    for _ in range(200):
        if hi - lo <= max(BISECT_RTOL * hi, abs_floor):
            break
        mid = 0.5 * (lo + hi)
        if float(domain.xi(x - mid * v)) <= 0.0:
            lo = mid
        else:
            hi = mid
    tau = lo
    lo_b, hi_b = lo - 2 * (hi - lo), hi + 2 * (hi - lo)
    g = float(domain.xi(x - tau * v))
    for _ in range(2):
        dg = -float(np.dot(v, domain.grad_xi(x - tau * v)))
        if dg == 0.0:
            break
        cand = tau - g / dg
        if not (lo_b <= cand <= hi_b):
            break
        gc = float(domain.xi(x - cand * v))
        if abs(gc) > abs(g):
            break
        tau, g = cand, gc
    tau = max(tau, 0.0)
    xb = x - tau * v
    gb = domain.grad_xi(xb)
    n = gb / np.linalg.norm(gb)
    dot = float(np.dot(v, n))
    return ExitRecord(t_b=tau, x_b=xb, normal=n, dot=dot, grazing=abs(dot) <= graze_tol * speed)


# ---------------------------------------------------------------------------
# vectorised exit times
# ---------------------------------------------------------------------------
def _quadric_exit(domain: LevelSetDomain, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    A = 1.0 / domain.semi_axes**2
    y = x - domain.center
    p = np.sum(v * A * y, axis=-1)
    aq = np.sum(v * A * v, axis=-1)
    c0 = np.sum(y * A * y, axis=-1) - 1.0
    sq = np.sqrt(np.maximum(p * p - aq * c0, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        big = np.where(p >= 0.0, (p + sq) / aq, c0 / (p - sq))
    big = np.where(aq > 0.0, big, np.nan)
    return np.maximum(big, 0.0)


def _generic_exit(domain: LevelSetDomain, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    speed = np.linalg.norm(v, axis=-1)
    R = domain.bounding_radius
    dt = R / MARCH_DIVISIONS / speed
    lo = np.zeros(len(x))
    hi = np.full(len(x), np.nan)
    prev = np.zeros(len(x))
    for k in range(1, 2 * MARCH_DIVISIONS + 2):
        open_ = np.isnan(hi)
        if not open_.any():
            break
        tau = k * dt[open_]
        out = domain.xi(x[open_] - tau[:, None] * v[open_]) > 0.0
        idx = np.nonzero(open_)[0]
        hi[idx[out]] = tau[out]
        lo[idx[out]] = prev[idx[out]]
        prev[idx] = tau
    if np.isnan(hi).any():
        raise NoExit("backward ray stayed inside the bounding bracket")
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        inside = domain.xi(x - mid[:, None] * v) <= 0.0
        lo = np.where(inside, mid, lo)
        hi = np.where(inside, hi, mid)
    return lo


def exit_times(domain: LevelSetDomain, x, v) -> np.ndarray:
    """Backward exit times for arrays of phase points (shape ``(N, 3)``)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    if np.any(np.linalg.norm(v, axis=-1) == 0.0):
        raise ZeroVelocity("backward exit needs |v| > 0")
    if domain.is_quadric:
        return _quadric_exit(domain, x, v)
    return _generic_exit(domain, x, v)


# ---------------------------------------------------------------------------
# derivatives of the exit map
# ---------------------------------------------------------------------------
def exit_gradients(domain: LevelSetDomain, p: PhasePoint,
                   graze_tol: float = DEFAULT_GRAZE_TOL) -> dict:
    """Closed-form derivatives of ``t_b`` and ``x_b`` with respect to ``x`` and ``v``.

    Differentiating ``xi(x - t_b v) = 0`` gives ``grad_x t_b = n / (v.n)`` and
    ``grad_v t_b = -t_b n / (v.n)``; then ``x_b = x - t_b v`` yields the
    Jacobians below (row index = component of ``x_b``).
    """
    rec = backward_exit(domain, p, graze_tol)
    if rec.grazing:
        raise GrazingExit(f"v.n(x_b) = {rec.dot:.3e} is within the grazing band")
    n, dot, tb, v = rec.normal, rec.dot, rec.t_b, p.v
    gx_tb = n / dot
    gv_tb = -tb * n / dot
    return {
        "grad_x_tb": gx_tb,
        "grad_v_tb": gv_tb,
        # rows index the component of x_b, columns the perturbed variable
        "grad_x_xb": np.eye(3) - np.outer(v, gx_tb),
        "grad_v_xb": -tb * np.eye(3) - np.outer(v, gv_tb),
    }


# ---------------------------------------------------------------------------
# velocity-lemma functional
# ---------------------------------------------------------------------------
def alpha_values(domain: LevelSetDomain, x, v) -> np.ndarray:
    """Vectorised ``xi^2 + (v.grad xi)^2 - 2 (v.Hess xi.v) xi``."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    xi = domain.xi(x)
    vg = np.sum(v * domain.grad_xi(x), axis=-1)
    vHv = np.einsum("...i,...ij,...j->...", v, domain.hess_xi(x), v)
    return xi * xi + vg * vg - 2.0 * vHv * xi


def alpha(domain: LevelSetDomain, p: PhasePoint) -> float:
    return float(alpha_values(domain, p.x, p.v))


def certified_gronwall_constant(domain: LevelSetDomain, samples: int = 2000, seed: int = 0) -> GronwallConstant:
    """A constant for which both Gronwall inequalities hold on ``domain``.

    Along a free flight ``d alpha/ds = 2 xi (v.grad xi) - 2 xi D^3xi[v,v,v]``.
    The first term is bounded by ``xi^2 + (v.grad xi)^2 <= alpha`` inside a
    convex domain; the second by ``(M3 / c) |v| alpha`` where ``M3`` bounds
    the third derivative and ``c`` the Hessian from below.  Hence
    ``C = max(1, M3 / c)`` works; quadrics have ``M3 = 0`` and ``C = 1``.
    Sampled bounds for custom domains are inflated by a safety factor 2.
    """
    if domain.is_quadric:
        return GronwallConstant(1.0)
    conv = check_convexity(domain, samples, seed)
    if not conv["passed"]:
        raise ValueError("domain is not convex on the sampled points")
    m3 = domain.third_derivative_bound(samples, seed)
    return GronwallConstant(2.0 * max(1.0, m3 / conv["observed_c_xi"]))


def velocity_lemma_check(domain: LevelSetDomain, p: PhasePoint, t1: float, t2: float,
                         C: GronwallConstant, tol: float = 1e-10) -> dict:
    """Check both Gronwall inequalities along ``X(s) = x + (s - t1) v``, ``s in [t1, t2]``.

    ``p`` is the phase point at time ``t1``.  The inequalities are tested for
    every ordered pair among the two end points and 32 interior checkpoints;
    margins are relative to the larger of the two alpha values involved.
    """
    if t2 < t1:
        raise ValueError("need t1 <= t2")
    s = np.linspace(t1, t2, VELOCITY_CHECKPOINTS + 2)
    X = p.x[None, :] + (s - t1)[:, None] * p.v[None, :]
    if np.any(domain.xi(X) > domain.boundary_tol):
        raise SegmentLeavesDomain("free-flight segment leaves the closed domain")
    a = alpha_values(domain, X, np.broadcast_to(p.v, X.shape))
    k = C.C_xi * (np.linalg.norm(p.v) + 1.0)
    i, j = np.triu_indices(len(s), k=1)
    gap = s[j] - s[i]
    # divide both sides by exp(k s_i) (resp. exp(-k s_i)) to avoid overflow
    m1 = np.exp(k * gap) * a[j] - a[i]
    m2 = a[i] - np.exp(-k * gap) * a[j]
    scale = np.maximum(np.maximum(np.abs(a[i]), np.abs(a[j])), 1e-300)
    worst = float(min((m1 / scale).min(), (m2 / scale).min()))
    return {"ok": bool(worst >= -tol), "worst_margin": worst}


# ---------------------------------------------------------------------------
# bounce gap
# ---------------------------------------------------------------------------
def bounce_gap_bound(domain: LevelSetDomain, x1, x2, v, t1: float, t2: float,
                     C_xi: float | None = None) -> dict:
    """Lower bound ``|t1 - t2| >= |n(x1).v| / (C |v|^2)`` for a boundary chord.

    ``C`` defaults to the boundary curvature bound of the domain: a chord
    leaving the boundary at angle ``a`` to the tangent plane has length at
    least ``2 sin(a) / kappa_max``, twice what the inequality needs.
    """
    v = np.asarray(v, dtype=float).reshape(3)
    speed = float(np.linalg.norm(v))
    if speed == 0.0:
        raise ZeroVelocity("bounce gap needs |v| > 0")
    x1 = np.asarray(x1, dtype=float).reshape(3)
    x2 = np.asarray(x2, dtype=float).reshape(3)
    tol = 1e-8 * domain.bounding_radius
    mid = 0.5 * (x1 + x2)
    if (abs(float(domain.xi(x1))) > tol or abs(float(domain.xi(x2))) > tol
            or float(domain.xi(mid)) > domain.boundary_tol):
        raise SegmentLeavesDomain("chord end points must lie on the boundary and the chord inside")
    C = domain.curvature_bound() if C_xi is None else float(C_xi)
    n1 = outward_normal(domain, x1) if abs(float(domain.xi(x1))) <= domain.boundary_tol else domain.normal(x1)
    lhs = abs(t1 - t2)
    rhs = abs(float(np.dot(n1, v))) / (C * speed**2)
    return {"lhs": lhs, "rhs": rhs, "ok": bool(lhs >= rhs)}
