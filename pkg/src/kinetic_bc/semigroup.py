"""Damped transport semigroup, Duhamel construction and diagnostics.

Conventions
-----------
* ``h = w f`` with ``F = mu + sqrt(mu) f``; callables take vectorised
  arguments ``h0(x, v)`` with ``x``, ``v`` of shape ``(N, 3)``.
* ``G(t)`` solves ``{d_t + v.grad_x + nu} h = 0`` with the chosen boundary
  condition, so that along a backward cycle every segment is damped by
  ``exp(-nu(v) * elapsed)``.
* The desk solver discretises ``U(t) = G(t) + int_0^t G(t-s) K U(s) ds`` on
  an ellipsoid: Gauss-Legendre/uniform-azimuth spatial nodes with trilinear
  interpolation in ``(r, theta, phi)``, a tensor Gauss-Hermite velocity grid,
  a Hermite-modal Galerkin representation of ``K`` and trapezoidal time
  quadrature on a uniform grid (so the backward traces for each time lag are
  computed once and reused).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import product
from typing import Callable, Optional, Union

import numpy as np
from scipy.special import roots_legendre

from .collision import (
    KernelConfig,
    VelocityGrid,
    WeightParams,
    apply_K,
    collision_frequency,
    gamma_pair_table,
    loss_frequency_table,
    sqrt_maxwellian,
    weight_w,
    weight_wtilde,
)
from .cycles import GRAZE_REL, CycleKind, DiffuseSampler, trace_back
from .errors import (
    GrazingAbort,
    InvalidParameters,
    NonContraction,
    NonConvergence,
    NonPositiveNorms,
    RemainderTooLarge,
    SingularGram,
    ZeroVelocity,
)
from .geometry import LevelSetDomain, SymmetryAxis
from .trajectory import PhasePoint, exit_times

MU_MASS = (2.0 * np.pi) ** 1.5

FieldFn = Callable[[np.ndarray, np.ndarray], np.ndarray]
BoundaryFn = Callable[[float, np.ndarray, np.ndarray], np.ndarray]
NuLike = Union[KernelConfig, Callable[[np.ndarray], np.ndarray], float]


# ---------------------------------------------------------------------------
# boundary conditions and field containers
# ---------------------------------------------------------------------------
class BCKind(enum.Enum):
    INFLOW = "inflow"
    BOUNCE_BACK = "bounceback"
    SPECULAR = "specular"
    DIFFUSE = "diffuse"


@dataclass(frozen=True)
class BCSpec:
    """Boundary condition.

    ``boundary`` is the inflow datum ``g(t, x, v)`` on incoming boundary
    points, in the same units as the transported field (zero if omitted);
    it is called with per-point arrays ``t`` of shape ``(N,)``.
    The diffuse fields configure the truncated Monte Carlo representation:
    ``k_trunc`` reflections, ``mc_paths`` sampled cycles per phase point,
    ``params`` for ``w~``, a cap on the stuck fraction and an optional
    ``h_bound`` (a bound on ``|h|``) that turns the stuck weight into an
    absolute remainder bound.
    """

    kind: BCKind
    boundary: Optional[BoundaryFn] = None
    k_trunc: int = 20
    mc_paths: int = 10_000
    params: Optional[WeightParams] = None
    remainder_cap: float = 0.05
    h_bound: Optional[float] = None

    def __post_init__(self):
        if self.kind is BCKind.DIFFUSE:
            if self.k_trunc < 2:
                raise InvalidParameters("diffuse k_trunc must be at least 2")
            if self.mc_paths < 1:
                raise InvalidParameters("diffuse mc_paths must be positive")
            if self.params is None:
                raise InvalidParameters("diffuse boundary needs weight parameters")

    @classmethod
    def inflow(cls, boundary: Optional[BoundaryFn] = None) -> "BCSpec":
        return cls(BCKind.INFLOW, boundary=boundary)

    @classmethod
    def bounce_back(cls) -> "BCSpec":
        return cls(BCKind.BOUNCE_BACK)

    @classmethod
    def specular(cls) -> "BCSpec":
        return cls(BCKind.SPECULAR)

    @classmethod
    def diffuse(cls, params: WeightParams, k_trunc: int = 20, mc_paths: int = 10_000,
                remainder_cap: float = 0.05, h_bound: Optional[float] = None) -> "BCSpec":
        return cls(BCKind.DIFFUSE, k_trunc=k_trunc, mc_paths=mc_paths, params=params,
                   remainder_cap=remainder_cap, h_bound=h_bound)

    @property
    def cycle_kind(self) -> CycleKind:
        return {BCKind.BOUNCE_BACK: CycleKind.BOUNCE_BACK, BCKind.SPECULAR: CycleKind.SPECULAR,
                BCKind.DIFFUSE: CycleKind.DIFFUSE}[self.kind]

    def datum(self, t, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        if self.boundary is None:
            return np.zeros(len(x))
        return np.asarray(self.boundary(t, x, v), dtype=float).reshape(len(x))


class WeightMode(enum.Enum):
    WEIGHTED_H = "h"
    UNWEIGHTED_F = "f"


@dataclass
class FieldSample:
    """Values on the phase points ``x[i] x grid.nodes[q]``: ``values[i, q]``."""

    x: np.ndarray
    grid: VelocityGrid
    values: np.ndarray
    weight_mode: WeightMode = WeightMode.UNWEIGHTED_F
    space_weights: Optional[np.ndarray] = None
    time: float = float("nan")

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).reshape(-1, 3)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (len(self.x), len(self.grid.nodes)):
            raise InvalidParameters("values must have shape (spatial points, velocity nodes)")
        if not np.all(np.isfinite(self.values)):
            raise InvalidParameters("field values must be finite")

    def phase_points(self) -> tuple[np.ndarray, np.ndarray]:
        nx, nv = self.values.shape
        return np.repeat(self.x, nv, axis=0), np.tile(self.grid.nodes, (nx, 1))

    def to_h(self, params: WeightParams) -> "FieldSample":
        if self.weight_mode is WeightMode.WEIGHTED_H:
            return self
        return FieldSample(self.x, self.grid, self.values * weight_w(params, self.grid.nodes)[None, :],
                           WeightMode.WEIGHTED_H, self.space_weights, self.time)

    def to_f(self, params: WeightParams) -> "FieldSample":
        if self.weight_mode is WeightMode.UNWEIGHTED_F:
            return self
        return FieldSample(self.x, self.grid, self.values / weight_w(params, self.grid.nodes)[None, :],
                           WeightMode.UNWEIGHTED_F, self.space_weights, self.time)

    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values)))


@dataclass(frozen=True)
class HydroCoeffs:
    """``Pf = (a + b.v + c|v|^2) sqrt(mu)``; leading shapes follow the input field."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray

    def reconstruct(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        a = np.asarray(self.a)[..., None]
        c = np.asarray(self.c)[..., None]
        bv = np.einsum("...i,qi->...q", np.asarray(self.b), v)
        return (a + bv + c * np.sum(v * v, -1)) * sqrt_maxwellian(v)


@dataclass(frozen=True)
class DecayReport:
    times: np.ndarray
    norms: np.ndarray
    lambda_hat: float
    fit_residual: float
    window: tuple[float, float]


# ---------------------------------------------------------------------------
# the damped transport semigroup G(t)
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class GResult:
    """Pointwise ``G(t) h0`` with Monte Carlo diagnostics (zeros when exact).

    ``remainder_weight`` is the mean truncation weight of stuck diffuse
    paths, so the neglected term is at most ``remainder_weight * sup|h|``;
    ``remainder_bound`` is that product when ``h_bound`` is configured.
    ``total_weight`` is the mass of the sampled measure chain (without the
    ``w~`` factors), which is at most one.
    """

    value: np.ndarray
    stderr: np.ndarray
    stuck_fraction: np.ndarray
    remainder_weight: np.ndarray
    remainder_bound: Optional[np.ndarray]
    total_weight: np.ndarray
    total_weight_stderr: np.ndarray


def nu_function(nu: NuLike) -> Callable[[np.ndarray], np.ndarray]:
    """Normalise a collision frequency given as a config, a callable or a constant."""
    if isinstance(nu, KernelConfig):
        return lambda v: collision_frequency(nu, v, check=False)
    if callable(nu):
        return lambda v: np.asarray(nu(v), dtype=float).reshape(np.shape(v)[:-1])
    value = float(nu)
    return lambda v: np.full(np.shape(v)[:-1], value)


def _as_points(x, v) -> tuple[np.ndarray, np.ndarray]:
    x = np.array(np.atleast_2d(x), dtype=float)
    v = np.array(np.atleast_2d(v), dtype=float)
    x, v = np.broadcast_arrays(x, v)
    if np.any(np.linalg.norm(v, axis=-1) == 0.0):
        raise ZeroVelocity("transport needs nonzero velocities")
    return x.copy(), v.copy()


def transport_G_batch(domain: LevelSetDomain, bc: BCSpec, nu: NuLike, h0: FieldFn, t: float, x, v, *,
                      sampler: Optional[DiffuseSampler] = None) -> GResult:
    """``G(t) h0`` at phase points ``(x[i], v[i])``.

    Inflow, bounce-back and specular are evaluated exactly along the unique
    backward cycle.  Diffuse uses ``bc.mc_paths`` sampled cycles per point
    with per-point substreams of ``sampler``, truncated after
    ``bc.k_trunc - 1`` re-emissions.
    """
    x, v = _as_points(x, v)
    t = float(t)
    if t < 0:
        raise InvalidParameters("t must be nonnegative")
    nu_fn = nu_function(nu)
    n = len(x)
    zeros = np.zeros(n)
    if bc.kind is BCKind.DIFFUSE:
        return _diffuse_G(domain, bc, nu_fn, h0, t, x, v, sampler)
    nu_v = nu_fn(v)
    if bc.kind is BCKind.INFLOW:
        tb = exit_times(domain, x, v)
        val = np.empty(n)
        inside = t <= tb
        if inside.any():
            xi, vi = x[inside], v[inside]
            val[inside] = np.exp(-nu_v[inside] * t) * np.asarray(h0(xi - t * vi, vi), dtype=float)
        out = ~inside
        if out.any():
            tbo, vo = tb[out], v[out]
            xb = x[out] - tbo[:, None] * vo
            vn = np.sum(vo * domain.normal(xb), axis=1)
            if np.any(np.abs(vn) < GRAZE_REL * np.linalg.norm(vo, axis=1)):
                raise GrazingAbort("backward trajectory leaves through a grazing point")
            val[out] = np.exp(-nu_v[out] * tbo) * _datum_at(bc, t - tbo, xb, vo)
    else:
        tr = trace_back(domain, bc.cycle_kind, x, v, t)
        if tr.grazing.any():
            raise GrazingAbort(f"{int(tr.grazing.sum())} backward cycles hit a grazing point")
        # speeds are preserved by both reflection laws, so nu(v) is constant along the cycle
        val = np.exp(-nu_v * t) * np.asarray(h0(tr.x, tr.v), dtype=float)
    return GResult(val, zeros.copy(), zeros.copy(), zeros.copy(), None, np.ones(n), zeros.copy())


def _datum_at(bc: BCSpec, times, xb: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Inflow datum with per-point times (``g`` is called once, vectorised in ``t``)."""
    return bc.datum(np.broadcast_to(np.asarray(times, dtype=float), (len(xb),)), xb, v)


def _diffuse_G(domain, bc, nu_fn, h0, t, x, v, sampler) -> GResult:
    if sampler is None:
        raise InvalidParameters("diffuse transport needs a DiffuseSampler")
    params = bc.params
    n = len(x)
    value = np.empty(n)
    stderr = np.zeros(n)
    stuck = np.zeros(n)
    rem_w = np.zeros(n)
    tot_w = np.ones(n)
    tot_se = np.zeros(n)
    tb0 = exit_times(domain, x, v)
    nu0 = nu_fn(v)
    P = bc.mc_paths
    for i in range(n):
        t1 = t - tb0[i]
        if t1 <= 0.0:
            value[i] = math.exp(-nu0[i] * t) * float(np.asarray(h0((x[i] - t * v[i])[None], v[i][None]))[0])
            continue
        x1 = x[i] - tb0[i] * v[i]
        n1 = domain.normal(x1[None])[0]
        if abs(float(np.dot(v[i], n1))) < GRAZE_REL * float(np.linalg.norm(v[i])):
            raise GrazingAbort("backward trajectory leaves through a grazing point")
        pref = math.exp(-nu0[i] * (t - t1)) / float(weight_wtilde(params, v[i]))
        rng_stream = sampler.substream(i)
        xl = np.repeat(x1[None], P, axis=0)
        tl = np.full(P, t1)
        logw = np.zeros(P)
        contrib = np.zeros(P)
        weight = np.zeros(P)
        alive = np.ones(P, dtype=bool)
        last_v = np.zeros((P, 3))
        for _ in range(1, bc.k_trunc):
            idx = np.nonzero(alive)[0]
            if idx.size == 0:
                break
            vl = rng_stream.sample(domain.normal(xl[idx]))
            last_v[idx] = vl
            tb = exit_times(domain, xl[idx], vl)
            tn = tl[idx] - tb
            nul = nu_fn(vl)
            cross = tn <= 0.0
            if cross.any():
                c_idx = idx[cross]
                tc, vc = tl[c_idx], vl[cross]
                damp = np.exp(logw[c_idx] - nul[cross] * tc)
                src = np.asarray(h0(xl[c_idx] - tc[:, None] * vc, vc), dtype=float)
                contrib[c_idx] = damp * weight_wtilde(params, vc) * src
                weight[c_idx] = damp
                alive[c_idx] = False
            go = ~cross
            g_idx = idx[go]
            logw[g_idx] -= nul[go] * (tl[g_idx] - tn[go])
            xl[g_idx] = xl[g_idx] - tb[go, None] * vl[go]
            tl[g_idx] = tn[go]
        stuck_mask = alive
        stuck_w = np.where(stuck_mask, np.exp(logw) * weight_wtilde(params, last_v), 0.0)
        weight = weight + np.where(stuck_mask, np.exp(logw), 0.0)
        value[i] = pref * float(np.mean(contrib))
        stderr[i] = pref * float(np.std(contrib, ddof=1)) / math.sqrt(P) if P > 1 else float("inf")
        stuck[i] = float(np.mean(stuck_mask))
        rem_w[i] = pref * float(np.mean(stuck_w))
        tot_w[i] = float(np.mean(weight))
        tot_se[i] = float(np.std(weight, ddof=1)) / math.sqrt(P) if P > 1 else float("inf")
    if np.any(stuck > bc.remainder_cap):
        raise RemainderTooLarge(
            f"stuck fraction {stuck.max():.3g} exceeds cap {bc.remainder_cap:.3g}; raise k_trunc")
    bound = rem_w * bc.h_bound if bc.h_bound is not None else None
    return GResult(value, stderr, stuck, rem_w, bound, tot_w, tot_se)


def transport_G(domain: LevelSetDomain, bc: BCSpec, nu: NuLike, h0: FieldFn, t: float, p: PhasePoint,
                sampler: Optional[DiffuseSampler] = None) -> float:
    """Scalar ``G(t) h0 (x, v)``; see :func:`transport_G_batch` for diagnostics."""
    return float(transport_G_batch(domain, bc, nu, h0, t, p.x[None], p.v[None], sampler=sampler).value[0])


def diffuse_decay_bound(params: WeightParams, nu: NuLike, h0: FieldFn, grid: VelocityGrid,
                        x_samples: np.ndarray, nu0: float) -> float:
    """Right-hand side of the ``t >= 1`` diffuse bound for ``e^{nu0 t/2} |G(t) h0|``.

    ``e^{nu0} max(sup |h0 / w~|, sup |e^{-nu + nu0} h0|)`` with the suprema
    taken over the supplied spatial samples and velocity grid.
    """
    nu_fn = nu_function(nu)
    X = np.repeat(np.asarray(x_samples, dtype=float), len(grid.nodes), axis=0)
    V = np.tile(grid.nodes, (len(x_samples), 1))
    h = np.abs(np.asarray(h0(X, V), dtype=float))
    a = float(np.max(h / weight_wtilde(params, V)))
    b = float(np.max(np.exp(-nu_fn(V) + nu0) * h))
    return math.exp(nu0) * max(a, b)


# ---------------------------------------------------------------------------
# hydrodynamic projection, conservation and decay
# ---------------------------------------------------------------------------
def _hydro_basis(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    s = sqrt_maxwellian(v)
    return np.stack([s, v[:, 0] * s, v[:, 1] * s, v[:, 2] * s, np.sum(v * v, -1) * s], axis=1)


_EXACT_GRAM = MU_MASS * np.array([
    [1, 0, 0, 0, 3],
    [0, 1, 0, 0, 0],
    [0, 0, 1, 0, 0],
    [0, 0, 0, 1, 0],
    [3, 0, 0, 0, 15],
], dtype=float)


def hydro_gram(grid: VelocityGrid) -> np.ndarray:
    E = _hydro_basis(grid.nodes)
    return np.einsum("q,qi,qj->ij", grid.weights, E, E)


def hydro_projection(grid: VelocityGrid, f) -> tuple[HydroCoeffs, np.ndarray]:
    """Orthogonal projection of ``f`` (shape ``(..., N_v)``) onto the five collision invariants.

    Returns the coefficients and the residual ``(I - P) f`` on the grid.
    """
    f = np.asarray(f, dtype=float)
    if f.shape[-1] != len(grid.nodes):
        raise InvalidParameters("last axis of f must match the velocity grid")
    G = hydro_gram(grid)
    dev = float(np.max(np.abs(G - _EXACT_GRAM)) / np.max(_EXACT_GRAM))
    if dev > 1e-6:
        raise SingularGram(f"velocity grid resolves Gaussian moments only to {dev:.2e}")
    if np.linalg.cond(G) > 1e12:
        raise SingularGram("hydrodynamic Gram matrix is singular")
    E = _hydro_basis(grid.nodes)
    rhs = np.einsum("q,qi,...q->...i", grid.weights, E, f)
    coef = np.linalg.solve(G, rhs[..., None])[..., 0] if rhs.ndim > 1 else np.linalg.solve(G, rhs)
    proj = np.einsum("...i,qi->...q", coef, E)
    return HydroCoeffs(coef[..., 0], coef[..., 1:4], coef[..., 4]), f - proj


@dataclass
class Snapshots:
    """Time series of collocated fields ``f`` (unweighted) for diagnostics.

    ``values`` has shape ``(N_t, N_x, N_v)``; ``boundary_sq`` optionally
    carries the boundary term ``||f(t)||_gamma^2`` (or its diffuse variant)
    at each time.
    """

    times: np.ndarray
    values: np.ndarray
    x: np.ndarray
    space_weights: np.ndarray
    grid: VelocityGrid
    nu: np.ndarray
    boundary_sq: Optional[np.ndarray] = None


def _moments(snap: Snapshots, axis: Optional[SymmetryAxis]) -> dict:
    V = snap.grid.nodes
    s = sqrt_maxwellian(V) * snap.grid.weights
    vf = np.einsum("q,txq->tx", s, snap.values)
    mass = vf @ snap.space_weights
    energy = np.einsum("q,txq->tx", s * np.sum(V * V, -1), snap.values) @ snap.space_weights
    out = {"mass": mass, "energy": energy, "angular": None}
    if axis is not None:
        r = np.cross(snap.x - axis.x0, axis.varpi / np.linalg.norm(axis.varpi))           # (x - x0) x omega
        L = r @ V.T                                                 # (N_x, N_v)
        out["angular"] = np.einsum("xq,q,txq->t", L * snap.space_weights[:, None], s, snap.values)
    return out


def conservation_check(snap: Snapshots, bc: BCSpec, axis: Optional[SymmetryAxis] = None) -> dict:
    """Mass/energy (and, with ``axis``, angular momentum) drift ``max_t |m(t) - m(0)|``."""
    if bc.kind not in (BCKind.BOUNCE_BACK, BCKind.SPECULAR):
        raise InvalidParameters("conservation laws hold for bounce-back and specular walls")
    m = _moments(snap, axis)

    def drift(series):
        return None if series is None else float(np.max(np.abs(series - series[0])))

    return {
        "mass_drift": drift(m["mass"]),
        "energy_drift": drift(m["energy"]),
        "angular_drift": drift(m["angular"]),
        "mass": m["mass"],
        "energy": m["energy"],
        "angular": m["angular"],
    }


def decay_fit(times, norms, t_min: float = 0.25) -> DecayReport:
    """Least-squares rate ``lambda_hat = -slope`` of ``log norms`` over ``t >= t_min``.

    Only the norms inside the window need to be positive (a zero initial
    datum driven by a boundary source is fine).

    ``fit_residual`` is the RMS of the log residuals (a relative error).
    """
    times = np.asarray(times, dtype=float).reshape(-1)
    norms = np.asarray(norms, dtype=float).reshape(-1)
    if times.shape != norms.shape or len(times) < 5:
        raise InvalidParameters("decay_fit needs at least five (time, norm) samples")
    sel = times >= t_min
    if sel.sum() < 3:
        raise InvalidParameters(f"fewer than three samples with t >= {t_min}")
    if np.any(~(norms[sel] > 0)):
        raise NonPositiveNorms("norms in the fit window must be positive to take logarithms")
    ts, ls = times[sel], np.log(norms[sel])
    slope, icpt = np.polyfit(ts, ls, 1)
    resid = ls - (slope * ts + icpt)
    return DecayReport(times, norms, float(-slope), float(np.sqrt(np.mean(resid ** 2))),
                       (float(ts[0]), float(ts[-1])))


def coercivity_terms(snap: Snapshots, bc: BCSpec) -> dict:
    """Time integrals over ``[0, 1]`` of ``||Pf||_nu^2``, ``||(I-P)f||_nu^2`` and the boundary term."""
    sel = snap.times <= 1.0 + 1e-12
    if sel.sum() < 2:
        raise InvalidParameters("need at least two snapshots in [0, 1]")
    times = snap.times[sel]
    coef, resid = hydro_projection(snap.grid, snap.values[sel])
    Pf = snap.values[sel] - resid
    wq = snap.grid.weights * snap.nu

    def norm_sq(a):
        return np.einsum("txq,q,x->t", a * a, wq, snap.space_weights)

    p_series, micro_series = norm_sq(Pf), norm_sq(resid)
    num = float(np.trapezoid(p_series, times))
    micro = float(np.trapezoid(micro_series, times))
    boundary = 0.0
    if bc.kind in (BCKind.INFLOW, BCKind.DIFFUSE):
        if snap.boundary_sq is None:
            raise InvalidParameters("inflow and diffuse variants need the boundary term")
        boundary = float(np.trapezoid(np.asarray(snap.boundary_sq)[sel], times))
    return {"P_nu_sq": num, "micro_nu_sq": micro, "boundary_sq": boundary,
            "times": times, "P_series": p_series, "micro_series": micro_series}


def coercivity_ratio(snap: Snapshots, bc: BCSpec) -> float:
    """``M^ = int ||Pf||_nu^2 / (int ||(I-P)f||_nu^2 [+ boundary term])``; ``inf`` if the denominator vanishes."""
    t = coercivity_terms(snap, bc)
    den = t["micro_nu_sq"] + t["boundary_sq"]
    if den == 0.0:
        return 0.0 if t["P_nu_sq"] == 0.0 else float("inf")
    return t["P_nu_sq"] / den


# ---------------------------------------------------------------------------
# desk discretisation: spatial grid and Hermite velocity basis
# ---------------------------------------------------------------------------
def _bracket(nodes: np.ndarray, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Left index and (possibly extrapolating) fraction for linear interpolation."""
    i = np.clip(np.searchsorted(nodes, q) - 1, 0, len(nodes) - 2)
    return i, (q - nodes[i]) / (nodes[i + 1] - nodes[i])


@dataclass(frozen=True)
class SpatialGrid:
    """Mapped spherical product rule on an ellipsoid.

    Nodes are ``center + a * r * (sin, cos, phi)`` with Gauss-Legendre nodes
    in ``r`` (weight ``r^2``) and ``cos``, and uniform midpoints in ``phi``.
    Interpolation is trilinear in ``(r, theta, phi)``: linear extrapolation
    at the ends of ``r`` and ``theta``, periodic in ``phi``.
    """

    center: np.ndarray
    axes: np.ndarray
    r: np.ndarray
    c: np.ndarray
    phi: np.ndarray
    nodes: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)

    @classmethod
    def ellipsoid(cls, domain: LevelSetDomain, n_r: int = 4, n_c: int = 4, n_phi: int = 8) -> "SpatialGrid":
        if not domain.is_quadric:
            raise InvalidParameters("the desk solver needs an ellipsoidal domain")
        if min(n_r, n_c) < 2 or n_phi < 3:
            raise InvalidParameters("need n_r, n_c >= 2 and n_phi >= 3")
        xr, wr = roots_legendre(n_r)
        r = 0.5 * (xr + 1.0)
        wr = 0.5 * wr * r * r
        c, wc = roots_legendre(n_c)
        phi = 2.0 * np.pi * (np.arange(n_phi) + 0.5) / n_phi
        s = np.sqrt(1.0 - c * c)
        d = np.stack([s[:, None] * np.cos(phi)[None], s[:, None] * np.sin(phi)[None],
                      np.broadcast_to(c[:, None], (n_c, n_phi))], axis=-1)
        a = domain.semi_axes
        nodes = domain.center + a * (r[:, None, None, None] * d[None])
        w = np.prod(a) * wr[:, None, None] * wc[None, :, None] * np.full(n_phi, 2.0 * np.pi / n_phi)[None, None]
        return cls(domain.center.copy(), a.copy(), r, c, phi, nodes.reshape(-1, 3), w.reshape(-1))

    @property
    def shape(self) -> tuple[int, int, int]:
        return len(self.r), len(self.c), len(self.phi)

    def __len__(self) -> int:
        return len(self.nodes)

    def locate(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Corner indices and trilinear weights, each ``(P, 8)``."""
        x = np.asarray(x, dtype=float).reshape(-1, 3)
        y = (x - self.center) / self.axes
        rad = np.linalg.norm(y, axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            cos = np.where(rad > 0, y[:, 2] / rad, 0.0)
        ang = np.mod(np.arctan2(y[:, 1], y[:, 0]), 2.0 * np.pi)
        ir, tr = _bracket(self.r, rad)
        # polar angle rather than cos: smooth fields are smooth in theta at the poles
        ic, tc = _bracket(-np.arccos(self.c), -np.arccos(np.clip(cos, -1.0, 1.0)))
        n_r, n_c, n_p = self.shape
        u = ang * (n_p / (2.0 * np.pi)) - 0.5
        j0 = np.floor(u)
        tp = u - j0
        j0 = j0.astype(int) % n_p
        j1 = (j0 + 1) % n_p
        idx = np.empty((len(x), 8), dtype=np.int64)
        wts = np.empty((len(x), 8))
        k = 0
        for dr, fr in ((0, 1.0 - tr), (1, tr)):
            for dc, fc in ((0, 1.0 - tc), (1, tc)):
                for jp, fp in ((j0, 1.0 - tp), (j1, tp)):
                    idx[:, k] = ((ir + dr) * n_c + (ic + dc)) * n_p + jp
                    wts[:, k] = fr * fc * fp
                    k += 1
        return idx, wts

    def interpolate(self, values, x) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        idx, wts = self.locate(x)
        return np.einsum("pk,pk...->p...", wts, values[idx])

    def integrate(self, values) -> np.ndarray:
        return np.tensordot(self.weights, np.asarray(values, dtype=float), axes=(0, 0))

    def boundary_rule(self, n_c: int = 8, n_phi: int = 16) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Surface points, area weights and outward normals (``dS = prod(a) |d/a| dOmega``)."""
        c, wc = roots_legendre(n_c)
        phi = 2.0 * np.pi * (np.arange(n_phi) + 0.5) / n_phi
        s = np.sqrt(1.0 - c * c)
        d = np.stack([np.outer(s, np.cos(phi)), np.outer(s, np.sin(phi)),
                      np.broadcast_to(c[:, None], (n_c, n_phi))], axis=-1).reshape(-1, 3)
        a = self.axes
        g = d / a
        gn = np.linalg.norm(g, axis=1)
        w = (np.prod(a) * gn) * np.repeat(wc, n_phi) * (2.0 * np.pi / n_phi)
        return self.center + a * d, w, g / gn[:, None]


class HermiteBasis:
    """Orthonormal ``He_alpha(v) sqrt(mu(v)) / sqrt(alpha! (2 pi)^{3/2})`` with ``|alpha| <= degree``."""

    def __init__(self, degree: int = 2):
        if degree < 2:
            raise InvalidParameters("degree >= 2 is needed to contain the collision invariants")
        self.degree = int(degree)
        self.alphas = np.array([a for tot in range(degree + 1)
                                for a in product(range(tot + 1), repeat=3) if sum(a) == tot])
        fact = np.array([math.prod(math.factorial(k) for k in a) for a in self.alphas], dtype=float)
        self.norms = np.sqrt(fact * MU_MASS)

    @property
    def size(self) -> int:
        return len(self.alphas)

    def __call__(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        # He_n per component by the three-term recurrence
        H = [[np.ones(v.shape[:-1]), v[..., i]] for i in range(3)]
        for i in range(3):
            for n in range(1, self.degree):
                H[i].append(v[..., i] * H[i][n] - n * H[i][n - 1])
        sq = sqrt_maxwellian(v)
        out = np.empty(v.shape[:-1] + (self.size,))
        for k, (a0, a1, a2) in enumerate(self.alphas):
            out[..., k] = H[0][a0] * H[1][a1] * H[2][a2] * (sq / self.norms[k])
        return out

    def invariant_frame(self) -> np.ndarray:
        """Orthonormal ``(nb, 5)`` coefficients spanning the collision invariants."""
        g = VelocityGrid.gauss_hermite(self.degree + 2)
        coeffs = (g.weights[:, None] * self(g.nodes)).T @ _hydro_basis(g.nodes)
        q, _ = np.linalg.qr(coeffs)
        return q


def galerkin_K(cfg: KernelConfig, degree: int = 2, quad_nodes: int = 6) -> tuple[np.ndarray, np.ndarray]:
    """Symmetrised Galerkin matrix of ``K`` in the Hermite basis and the invariant frame.

    For ``gamma = 0`` the invariant block is set to ``nu * I`` so that the
    discrete operator has the exact null space of ``nu - K``.
    """
    return _galerkin_K(cfg, int(degree), int(quad_nodes))


@lru_cache(maxsize=16)
def _galerkin_K(cfg: KernelConfig, degree: int, quad_nodes: int) -> tuple[np.ndarray, np.ndarray]:
    basis = HermiteBasis(degree)
    g = VelocityGrid.gauss_hermite(quad_nodes)
    Kpsi = apply_K(cfg, None, basis, g.nodes)
    A = (g.weights[:, None] * basis(g.nodes)).T @ Kpsi
    A = 0.5 * (A + A.T)
    Q = basis.invariant_frame()
    if cfg.gamma == 0.0:
        nu0 = float(collision_frequency(cfg, np.zeros(3), check=False))
        Pn = np.eye(basis.size) - Q @ Q.T
        A = Pn @ A @ Pn + nu0 * (Q @ Q.T)
    return A, Q


def galerkin_gamma(cfg: KernelConfig, degree: int = 2, quad_nodes: int = 5) -> np.ndarray:
    """Galerkin tensor ``Gamma_abc = <psi_a, Gamma(psi_b, psi_c)>`` with the invariant rows removed."""
    return _galerkin_gamma(cfg, int(degree), int(quad_nodes))


@lru_cache(maxsize=16)
def _galerkin_gamma(cfg: KernelConfig, degree: int, quad_nodes: int) -> np.ndarray:
    basis = HermiteBasis(degree)
    g = VelocityGrid.gauss_hermite(quad_nodes)
    T = gamma_pair_table(cfg, basis, g.nodes)
    Gm = np.einsum("q,qa,qbc->abc", g.weights, basis(g.nodes), T)
    Q = basis.invariant_frame()
    return np.einsum("ad,dbc->abc", np.eye(basis.size) - Q @ Q.T, Gm)


@dataclass(frozen=True)
class DeskConfig:
    """Resolution of the desk solver."""

    space: tuple[int, int, int] = (4, 4, 8)
    velocity_nodes: int = 4
    degree: int = 2
    kernel_nodes: int = 6
    steps_per_unit: int = 8

    def __post_init__(self):
        if self.velocity_nodes % 2:
            raise InvalidParameters("use an even number of Gauss-Hermite nodes (no zero velocity component)")
        if self.velocity_nodes < self.degree + 1:
            raise InvalidParameters("velocity grid too coarse for the Hermite degree")

    def refined(self, factor: int = 2) -> "DeskConfig":
        nr, nc, npf = self.space
        return DeskConfig((factor * nr, factor * nc, factor * npf), factor * self.velocity_nodes, self.degree,
                          self.kernel_nodes, factor * self.steps_per_unit)

    def describe(self) -> dict:
        return {"space": list(self.space), "velocity_nodes": self.velocity_nodes, "degree": self.degree,
                "kernel_nodes": self.kernel_nodes, "steps_per_unit": self.steps_per_unit,
                "time_rule": "trapezoid"}


class _Desk:
    """Shared machinery: grids, Galerkin operators and backward traces per time lag."""

    def __init__(self, domain: LevelSetDomain, bc: BCSpec, cfg: KernelConfig, desk: DeskConfig):
        if bc.kind is BCKind.DIFFUSE:
            raise InvalidParameters("the desk Duhamel solver supports inflow, bounce-back and specular walls")
        self.domain, self.bc, self.cfg, self.desk = domain, bc, cfg, desk
        self.space = SpatialGrid.ellipsoid(domain, *desk.space)
        self.vgrid = VelocityGrid.gauss_hermite(desk.velocity_nodes)
        self.basis = HermiteBasis(desk.degree)
        self.A, self.Q = galerkin_K(cfg, desk.degree, desk.kernel_nodes)
        self.Phi = self.basis(self.vgrid.nodes)                       # (N_v, nb)
        self.Pi = (self.vgrid.weights[:, None] * self.Phi).T          # (nb, N_v)
        self.nu = collision_frequency(cfg, self.vgrid.nodes, check=False)
        nx, nv = len(self.space), len(self.vgrid.nodes)
        self.X = np.repeat(self.space.nodes, nv, axis=0)
        self.V = np.tile(self.vgrid.nodes, (nx, 1))

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.space), len(self.vgrid.nodes)

    def traces(self, x: np.ndarray, v: np.ndarray, dt: float, n_lags: int) -> list:
        """``[(X_m, V_m, alive_m, tb)]`` for ``m = 0..n_lags``; ``tb`` only for inflow."""
        out = [(x, v, np.ones(len(x), dtype=bool))]
        if self.bc.kind is BCKind.INFLOW:
            tb = exit_times(self.domain, x, v)
            self.tb = tb
            for m in range(1, n_lags + 1):
                s = m * dt
                out.append((x - s * v, v, s <= tb))
            return out
        X, V = x, v
        for _ in range(n_lags):
            tr = trace_back(self.domain, self.bc.cycle_kind, X, V, dt)
            if tr.grazing.any():
                raise GrazingAbort("a desk characteristic hit a grazing point")
            X, V = tr.x, tr.v
            out.append((X, V, np.ones(len(x), dtype=bool)))
        return out

    def coeffs(self, U: np.ndarray) -> np.ndarray:
        """Hermite coefficients of node values ``(..., N_v) -> (..., nb)``."""
        return U @ self.Pi.T

    def apply_lag(self, C: np.ndarray, trace, nu_pts: np.ndarray, s: float) -> np.ndarray:
        """``G(s)`` (zero inflow datum) applied to the field with coefficients ``C`` at traced points."""
        X, V, alive = trace
        vals = self.space.interpolate(C, X)
        out = np.sum(vals * self.basis(V), axis=1) * np.exp(-nu_pts * s)
        return np.where(alive, out, 0.0)

    def free_part(self, f0: FieldFn, trace, nu_pts: np.ndarray, s: float, x: np.ndarray, v: np.ndarray,
                  tb: Optional[np.ndarray]) -> np.ndarray:
        """``G(s) f0`` at traced points, including the inflow datum."""
        X, V, alive = trace
        out = np.zeros(len(X))
        if alive.any():
            out[alive] = np.exp(-nu_pts[alive] * s) * np.asarray(f0(X[alive], V[alive]), dtype=float)
        if self.bc.kind is BCKind.INFLOW and (~alive).any():
            dead = ~alive
            xb = x[dead] - tb[dead, None] * v[dead]
            out[dead] = np.exp(-nu_pts[dead] * tb[dead]) * _datum_at(self.bc, s - tb[dead], xb, v[dead])
        return out


@dataclass
class DuhamelResult:
    """Time series from the desk solver; ``values`` are unweighted ``f`` at the nodes."""

    times: np.ndarray
    values: np.ndarray
    space: SpatialGrid
    vgrid: VelocityGrid
    nu: np.ndarray
    params: Optional[WeightParams]
    differences: list
    method: str
    quadrature: dict
    desk: _Desk = field(repr=False)
    source_coeffs: np.ndarray = field(repr=False)
    f0: FieldFn = field(repr=False)

    @property
    def weight(self) -> np.ndarray:
        return np.ones(len(self.vgrid.nodes)) if self.params is None else weight_w(self.params, self.vgrid.nodes)

    def field(self, i: int = -1) -> FieldSample:
        mode = WeightMode.UNWEIGHTED_F if self.params is None else WeightMode.WEIGHTED_H
        return FieldSample(self.space.nodes, self.vgrid, self.values[i] * self.weight[None, :], mode,
                           self.space.weights, float(self.times[i]))

    def sup_norms(self) -> np.ndarray:
        """``sup |h|`` (or ``sup |f|`` without weights) at each time."""
        return np.max(np.abs(self.values * self.weight[None, None, :]), axis=(1, 2))

    def l2_norms(self) -> np.ndarray:
        sq = np.einsum("txq,q,x->t", self.values ** 2, self.vgrid.weights, self.space.weights)
        return np.sqrt(sq)

    def evaluate(self, i: int, x, v) -> np.ndarray:
        """``f(t_i)`` at arbitrary phase points, from the discrete Duhamel formula."""
        x, v = _as_points(x, v)
        d = self.desk
        dt = self.quadrature["dt"]
        tr = d.traces(x, v, dt, i)
        tb = getattr(d, "tb", None) if d.bc.kind is BCKind.INFLOW else None
        nu_pts = collision_frequency(d.cfg, v, check=False)
        out = d.free_part(self.f0, tr[i], nu_pts, i * dt, x, v, tb)
        for j in range(i + 1):
            w = 0.5 if j in (0, i) else 1.0
            out += dt * w * d.apply_lag(self.source_coeffs[j], tr[i - j], nu_pts, (i - j) * dt)
        return out

    def snapshots(self, boundary: bool = False, surface: tuple[int, int] = (8, 16)) -> Snapshots:
        bsq = None
        if boundary:
            xb, wb, nb = self.space.boundary_rule(*surface)
            V = self.vgrid.nodes
            X = np.repeat(xb, len(V), axis=0)
            VV = np.tile(V, (len(xb), 1))
            flux = np.abs(np.sum(VV * np.repeat(nb, len(V), axis=0), axis=1))
            wts = np.repeat(wb, len(V)) * np.tile(self.vgrid.weights, len(xb)) * flux
            bsq = np.array([float(np.sum(wts * self.evaluate(i, X, VV) ** 2)) for i in range(len(self.times))])
        return Snapshots(self.times, self.values, self.space.nodes, self.space.weights, self.vgrid, self.nu, bsq)


def _time_grid(t: float, steps_per_unit: int, time_nodes: Optional[int]) -> tuple[int, float]:
    if t < 0:
        raise InvalidParameters("t must be nonnegative")
    n = time_nodes if time_nodes is not None else max(1, int(math.ceil(t * steps_per_unit)))
    if n < 1:
        raise InvalidParameters("time_nodes must be positive")
    return n, (t / n if n else 0.0)


def _weighted_initial(params: Optional[WeightParams], h0: FieldFn) -> FieldFn:
    if params is None:
        return h0
    return lambda x, v: np.asarray(h0(x, v), dtype=float) / weight_w(params, v)


def _weighted_bc(bc: BCSpec, params: Optional[WeightParams]) -> BCSpec:
    if params is None or bc.boundary is None:
        return bc
    g = bc.boundary
    return BCSpec(bc.kind, lambda t, x, v: np.asarray(g(t, x, v), dtype=float) / weight_w(params, v),
                  bc.k_trunc, bc.mc_paths, bc.params, bc.remainder_cap, bc.h_bound)


def _solve(d: _Desk, f0: FieldFn, n: int, dt: float, method: str, picard_iters: int,
           source: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray, list]:
    """Core solver.  ``source`` holds extra coefficient fields ``(n+1, N_x, nb)`` added to ``K U``."""
    nx, nv = d.shape
    nb = d.basis.size
    nu_pts = np.tile(d.nu, nx)
    tr = d.traces(d.X, d.V, dt, n)
    tb = getattr(d, "tb", None) if d.bc.kind is BCKind.INFLOW else None
    Gf = np.stack([d.free_part(f0, tr[i], nu_pts, i * dt, d.X, d.V, tb) for i in range(n + 1)])
    Gf = Gf.reshape(n + 1, nx, nv)
    Gf[0] = np.asarray(f0(d.X, d.V), dtype=float).reshape(nx, nv)
    src = np.zeros((n + 1, nx, nb)) if source is None else source

    def history(C, i, include_last):
        acc = np.zeros(nx * nv)
        for j in range(i + (1 if include_last else 0)):
            w = 0.5 if j == 0 else 1.0
            if include_last and j == i:
                w = 0.5 if i > 0 else 0.0
            acc += w * d.apply_lag(C[j], tr[i - j], nu_pts, (i - j) * dt)
        return dt * acc.reshape(nx, nv)

    diffs: list = []
    if method == "march":
        U = np.empty_like(Gf)
        C = np.empty((n + 1, nx, nb))
        U[0] = Gf[0]
        C[0] = d.coeffs(U[0]) @ d.A.T + src[0]
        Kmat = d.Phi @ d.A @ d.Pi
        M = np.linalg.inv(np.eye(nv) - 0.5 * dt * Kmat)
        for i in range(1, n + 1):
            rhs = Gf[i] + history(C, i, False) + 0.5 * dt * (src[i] @ d.Phi.T)
            U[i] = rhs @ M.T
            C[i] = d.coeffs(U[i]) @ d.A.T + src[i]
        return U, C, diffs
    if method != "picard":
        raise InvalidParameters("method must be 'picard' or 'march'")
    if picard_iters < 1:
        raise InvalidParameters("picard_iters must be at least 1")
    U = Gf.copy()
    growth = 0
    C = None
    for _ in range(picard_iters):
        C = d.coeffs(U) @ d.A.T + src
        new = np.stack([Gf[i] + history(C, i, True) for i in range(n + 1)])
        diffs.append(float(np.max(np.abs(new - U))))
        U = new
        if len(diffs) > 1 and diffs[-1] > diffs[-2]:
            growth += 1
            if growth >= 3:
                raise NonConvergence(f"Picard differences grew three times in a row: {diffs}")
        else:
            growth = 0
    return U, C, diffs


def duhamel_U(domain: LevelSetDomain, bc: BCSpec, cfg: KernelConfig, params: Optional[WeightParams],
              h0: FieldFn, t: float, picard_iters: int = 3, time_nodes: Optional[int] = None, *,
              method: str = "picard", desk: DeskConfig = DeskConfig()) -> DuhamelResult:
    """Desk solution of ``U(t) h0 = G(t) h0 + int_0^t G(t-s) K_w U(s) h0 ds``.

    With ``params`` the initial field (and inflow datum) are in weighted
    units ``h = w f`` and the returned fields are weighted; without them the
    fields are unweighted.  ``method="picard"`` runs ``picard_iters``
    iterates from ``U^(0) = G``; ``method="march"`` solves the discrete
    Volterra equation exactly by implicit time stepping.  ``time_nodes`` is
    the number of uniform steps (default ``desk.steps_per_unit`` per unit
    time).
    """
    n, dt = _time_grid(float(t), desk.steps_per_unit, time_nodes)
    d = _Desk(domain, _weighted_bc(bc, params), cfg, desk)
    f0 = _weighted_initial(params, h0)
    if t == 0:
        nx, nv = d.shape
        U = np.asarray(f0(d.X, d.V), dtype=float).reshape(1, nx, nv)
        C = (d.coeffs(U) @ d.A.T)
        times = np.zeros(1)
        diffs: list = []
    else:
        U, C, diffs = _solve(d, f0, n, dt, method, picard_iters)
        times = dt * np.arange(n + 1)
    quad = {"dt": dt, "steps": n, **desk.describe(), "kernel": cfg.describe()}
    return DuhamelResult(times, U, d.space, d.vgrid, d.nu, params, diffs, method, quad, d, C, f0)


# ---------------------------------------------------------------------------
# nonlinear and positivity iterations
# ---------------------------------------------------------------------------
@dataclass
class IterationReport:
    field: FieldSample
    differences: list
    contraction: list
    result: DuhamelResult = field(repr=False)


def nonlinear_iterate(domain: LevelSetDomain, bc: BCSpec, cfg: KernelConfig, params: Optional[WeightParams],
                      h0: FieldFn, t: float, m_steps: int = 3, *, smallness: float = 0.1,
                      desk: DeskConfig = DeskConfig(), time_nodes: Optional[int] = None) -> IterationReport:
    """Iterate ``{d_t + v.grad + nu - K} f^{m+1} = Gamma(f^m, f^m)`` from ``f^0 = 0``.

    Every iterate has the initial field ``h0`` (and the inflow datum), so
    ``f^1`` is the linear solution.  Each linear solve is the implicit desk
    march with the Galerkin ``Gamma`` source; ``differences[m]`` is
    ``sup |h^{m+1} - h^m|`` over all times and nodes.
    """
    if m_steps < 1:
        raise InvalidParameters("m_steps must be at least 1")
    n, dt = _time_grid(float(t), desk.steps_per_unit, time_nodes)
    d = _Desk(domain, _weighted_bc(bc, params), cfg, desk)
    f0 = _weighted_initial(params, h0)
    nx, nv = d.shape
    wv = np.ones(nv) if params is None else weight_w(params, d.vgrid.nodes)
    h_nodes = np.asarray(h0(d.X, d.V), dtype=float)
    if np.max(np.abs(h_nodes)) > smallness:
        raise InvalidParameters(f"sup|h0| = {np.max(np.abs(h_nodes)):.3g} exceeds the smallness threshold {smallness}")
    Gam = galerkin_gamma(cfg, desk.degree)
    U = np.zeros((n + 1, nx, nv))
    diffs: list = []
    growth = 0
    for _ in range(m_steps):
        c = d.coeffs(U)
        src = np.einsum("abc,txb,txc->txa", Gam, c, c)
        new, C, _ = _solve(d, f0, n, dt, "march", 1, source=src)
        diffs.append(float(np.max(np.abs((new - U) * wv))))
        U = new
        if len(diffs) > 1 and not diffs[-1] < diffs[-2]:
            growth += 1
            if growth >= 3:
                raise NonContraction(f"iterate differences failed to decrease three times: {diffs}")
        else:
            growth = 0
    contraction = [diffs[k + 1] / diffs[k] if diffs[k] > 0 else 0.0 for k in range(len(diffs) - 1)]
    quad = {"dt": dt, "steps": n, **desk.describe(), "kernel": cfg.describe()}
    res = DuhamelResult(dt * np.arange(n + 1), U, d.space, d.vgrid, d.nu, params, diffs, "nonlinear", quad,
                        d, C, f0)
    return IterationReport(res.field(-1), diffs, contraction, res)


def positivity_iterate(domain: LevelSetDomain, bc: BCSpec, cfg: KernelConfig, F0: FieldFn, t: float,
                       m_steps: int = 3, *, desk: DeskConfig = DeskConfig(),
                       time_nodes: Optional[int] = None) -> dict:
    """Iterate ``{d_t + v.grad + nu(F^m)} F^{m+1} = Q_gain(F^m, F^m)`` along bounce-back cycles.

    ``F`` is represented through ``F / sqrt(mu)`` in the Hermite basis.  Each
    iterate is integrated with the integrating factor using cell-averaged
    rates (exact when ``nu(F^m)`` and the gain are constant in time, so
    ``F0 = mu`` is reproduced to rounding).  Returns the minimum over all
    nodes and times of each iterate.
    """
    if bc.kind is not BCKind.BOUNCE_BACK:
        raise InvalidParameters("positivity_iterate supports bounce-back walls")
    n, dt = _time_grid(float(t), desk.steps_per_unit, time_nodes)
    d = _Desk(domain, bc, cfg, desk)
    nx, nv = d.shape
    F_init = np.asarray(F0(d.X, d.V), dtype=float).reshape(nx, nv)
    if np.any(F_init < 0):
        raise InvalidParameters("F0 must be nonnegative")
    sq = sqrt_maxwellian(d.vgrid.nodes)
    Gt = gamma_pair_table(cfg, d.basis, d.vgrid.nodes, gain_only=True)      # (N_v, nb, nb)
    Lt = loss_frequency_table(cfg, d.basis, d.vgrid.nodes)                   # (N_v, nb)
    tr = d.traces(d.X, d.V, dt, n)
    q_self = np.tile(np.arange(nv), nx)
    mirror = nv - 1 - q_self
    q_lag = [np.where(np.sum(V * d.V, axis=1) > 0, q_self, mirror) for (_, V, _) in tr]
    sq_pts = np.tile(sq, nx)
    F = np.broadcast_to(F_init, (n + 1, nx, nv)).copy()
    mins = [float(F.min())]
    for _ in range(m_steps):
        c = d.coeffs(F / sq[None, None, :])                                  # (n+1, N_x, nb)
        new = np.empty_like(F)
        new[0] = F_init
        for i in range(1, n + 1):
            nus = np.empty((i + 1, nx * nv))
            gains = np.empty((i + 1, nx * nv))
            for m in range(i + 1):
                X, _, _ = tr[m]
                cm = d.space.interpolate(c[i - m], X)                           # (P, nb)
                q = q_lag[m]
                nus[m] = np.einsum("pb,pb->p", Lt[q], cm)
                gains[m] = sq_pts * np.einsum("pb,pbc,pc->p", cm, Gt[q], cm)
            I = np.ones(nx * nv)
            acc = np.zeros(nx * nv)
            for m in range(i):
                nb_ = 0.5 * (nus[m] + nus[m + 1])
                gb = 0.5 * (gains[m] + gains[m + 1])
                e = np.exp(-nb_ * dt)
                with np.errstate(invalid="ignore", divide="ignore"):
                    frac = np.where(np.abs(nb_) > 1e-14, -np.expm1(-nb_ * dt) / nb_, dt)
                acc += I * gb * frac
                I = I * e
            X, V, _ = tr[i]
            new[i] = (I * np.asarray(F0(X, V), dtype=float) + acc).reshape(nx, nv)
        F = new
        mins.append(float(F.min()))
    return {"min_value": float(min(mins[1:])), "iterate_minima": mins, "times": dt * np.arange(n + 1),
            "final": F, "space": d.space, "grid": d.vgrid}
