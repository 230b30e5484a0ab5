"""Collision operator pieces: Maxwellian, weights, nu, K, K_w, Gamma.

Velocities are plain ``(..., 3)`` arrays.  The Maxwellian is the
unnormalised ``mu(v) = exp(-|v|^2/2)`` and the weight is
``w(v) = (1 + rho |v|^2)^beta exp(theta |v|^2)`` with its boundary
companion ``wtilde = 1/(w sqrt(mu))``.

The collision kernel is ``B = q0_scale * |v - u|^gamma * q0(cos)`` with
``cos = (u - v).omega / |u - v|`` and post-collision velocities

    u' = u + ((v - u).omega) omega,    v' = v - ((v - u).omega) omega.

``K`` and ``Gamma`` are evaluated straight from their gain/loss
definitions with a deterministic product rule:

* ``u`` in spherical coordinates about the origin: Gauss-Legendre in
  ``|u|`` on ``[0, U_max]``, Gauss-Legendre in the polar cosine, uniform
  azimuth;
* ``omega`` in a frame whose pole is ``(u - v)/|u - v|``.  The integrand is
  even under ``omega -> -omega`` (``u', v'`` only see ``(v-u).omega omega``)
  so only the upper hemisphere is sampled, with angular factor
  ``q0(c) + q0(-c)``.

For the five collision invariants the gain and loss parts cancel node by
node, so ``K(phi sqrt(mu)) = nu_h phi sqrt(mu)`` holds to round-off with
``nu_h`` the same rule's collision frequency; comparing against
:func:`collision_frequency` (a one-dimensional reduction) measures the
remaining quadrature error.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import integrate
from scipy.interpolate import RegularGridInterpolator
from scipy.special import roots_hermitenorm, roots_legendre

from .errors import DiagonalSingularity, InvalidParameters, QuadratureUnderResolved

TWO_PI = 2.0 * np.pi
MU_MASS = TWO_PI ** 1.5  # int mu dv


# ---------------------------------------------------------------------------
# Maxwellian and weights
# ---------------------------------------------------------------------------
def _sq(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return np.einsum("...i,...i->...", v, v)


def maxwellian(v) -> np.ndarray:
    """``exp(-|v|^2/2)`` (not normalised)."""
    return np.exp(-0.5 * _sq(v))


def sqrt_maxwellian(v) -> np.ndarray:
    return np.exp(-0.25 * _sq(v))


@dataclass(frozen=True)
class WeightParams:
    """Parameters of ``w(v) = (1 + rho |v|^2)^beta exp(theta |v|^2)``.

    ``theta`` must lie in ``[0, 1/4)``.  ``allow_boundary=True`` admits the
    excluded endpoint ``theta = 1/4`` so that diagnostics can demonstrate
    what goes wrong there; such parameters are marked ``admissible=False``.
    """

    rho: float
    beta: float
    theta: float
    allow_boundary: bool = False

    def __post_init__(self):
        if not (np.isfinite(self.rho) and self.rho > 0):
            raise InvalidParameters(f"rho must be > 0, got {self.rho}")
        if not np.isfinite(self.beta):
            raise InvalidParameters("beta must be finite")
        upper_ok = self.theta <= 0.25 if self.allow_boundary else self.theta < 0.25
        if not (self.theta >= 0 and upper_ok):
            raise InvalidParameters(f"theta must lie in [0, 1/4), got {self.theta}")

    @property
    def admissible(self) -> bool:
        return self.theta < 0.25

    @property
    def integrable(self) -> bool:
        """Whether ``w^-2 (1+|v|)^3`` is integrable over R^3.

        Decided by comparing the masses of successive dyadic shells
        ``{2^k <= |v| < 2^(k+1)}``: a convergent tail has shell ratios that
        settle strictly below one.
        """
        return _weight_tail_integrable(self)


def _weight_tail_integrable(params: WeightParams) -> bool:
    def shell(k):
        # substitute r = 2^k e^s so the shell is s in [0, ln 2]; work in logs
        s = np.linspace(0.0, np.log(2.0), 65)
        r = 2.0 ** k * np.exp(s)
        logf = (3 * np.log(r) + 3 * np.log1p(r)
                - 2 * params.beta * np.log1p(params.rho * r * r) - 2 * params.theta * r * r)
        m = logf.max()
        return m + np.log(integrate.trapezoid(np.exp(logf - m), s))

    logs = np.array([shell(k) for k in range(20, 27)])
    steps = np.diff(logs)
    return bool(np.all(steps < -1e-3))


def weight_w(params: WeightParams, v) -> np.ndarray:
    s = _sq(v)
    return (1.0 + params.rho * s) ** params.beta * np.exp(params.theta * s)


def weight_wtilde(params: WeightParams, v) -> np.ndarray:
    """``1 / (w sqrt(mu)) = exp((1/4 - theta)|v|^2) / (1 + rho |v|^2)^beta``."""
    s = _sq(v)
    return np.exp((0.25 - params.theta) * s) / (1.0 + params.rho * s) ** params.beta


def wtilde_sq_mu(params: WeightParams, v) -> np.ndarray:
    """``wtilde^2 mu = exp(-2 theta |v|^2) / (1 + rho |v|^2)^(2 beta)``, free of overflow."""
    s = _sq(v)
    return np.exp(-2.0 * params.theta * s) / (1.0 + params.rho * s) ** (2.0 * params.beta)


# ---------------------------------------------------------------------------
# kernel configuration
# ---------------------------------------------------------------------------
def _abs_cos(c):
    return np.abs(c)


@dataclass(frozen=True)
class KernelConfig:
    """Collision kernel and quadrature specification.

    ``q0`` is a vectorised function of the cosine of the deflection angle
    (default ``|cos|``); ``q0_scale`` multiplies the whole kernel, which is
    handy to normalise ``nu`` (``gamma = 0`` gives ``nu = q0_scale * 2 pi *
    (2 pi)^{3/2}`` with the default ``q0``).
    """

    gamma: float = 0.0
    q0: Callable = _abs_cos
    q0_scale: float = 1.0
    U_max: float = 8.0
    u_radial: int = 16
    u_polar: int = 8
    u_azimuth: int = 8
    omega_polar: int = 4
    omega_azimuth: int = 8
    nu_nodes: int = 48

    def __post_init__(self):
        if not (0.0 <= self.gamma <= 1.0):
            raise InvalidParameters(f"gamma must lie in [0, 1], got {self.gamma}")
        if not self.q0_scale > 0:
            raise InvalidParameters("q0_scale must be positive")
        for name in ("u_radial", "u_polar", "u_azimuth", "omega_polar", "omega_azimuth", "nu_nodes"):
            if int(getattr(self, name)) < 1:
                raise InvalidParameters(f"{name} must be >= 1")
        if not self.U_max > 0:
            raise InvalidParameters("U_max must be positive")
        if not np.isfinite(self.cutoff_constant):
            raise InvalidParameters("q0 violates the angular cutoff 0 <= q0 <= C |cos|")

    @property
    def cutoff_constant(self) -> float:
        """Smallest ``C`` with ``0 <= q0(c) <= C |c|`` on a sample of cosines."""
        c = np.linspace(-1.0, 1.0, 2001)
        q = np.asarray(self.q0(c), dtype=float)
        if np.any(q < 0) or not np.all(np.isfinite(q)):
            return np.inf
        nz = np.abs(c) > 0
        if np.any(q[~nz] > 0):
            return np.inf
        return float(np.max(q[nz] / np.abs(c[nz])))

    def refined(self, factor: int = 2) -> "KernelConfig":
        return KernelConfig(self.gamma, self.q0, self.q0_scale, self.U_max,
                            self.u_radial * factor, self.u_polar * factor, self.u_azimuth * factor,
                            self.omega_polar * factor, self.omega_azimuth * factor,
                            self.nu_nodes * factor)

    def describe(self) -> dict:
        """Quadrature spec, for reports."""
        return {
            "gamma": self.gamma,
            "q0": getattr(self.q0, "__name__", "custom"),
            "q0_scale": self.q0_scale,
            "U_max": self.U_max,
            "u_nodes": [self.u_radial, self.u_polar, self.u_azimuth],
            "omega_nodes": [self.omega_polar, self.omega_azimuth],
            "nu_nodes": self.nu_nodes,
        }


def _gl(n, a, b):
    x, w = roots_legendre(n)
    return 0.5 * (b - a) * x + 0.5 * (b + a), 0.5 * (b - a) * w


def _q0_integral(cfg: KernelConfig) -> float:
    """``int_{S^2} q0 domega`` with a Gauss-Legendre rule split at cos = 0."""
    c1, w1 = _gl(64, -1.0, 0.0)
    c2, w2 = _gl(64, 0.0, 1.0)
    c = np.concatenate([c1, c2])
    w = np.concatenate([w1, w2])
    return TWO_PI * float(np.sum(w * cfg.q0(c)))


# ---------------------------------------------------------------------------
# velocity grids
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class VelocityGrid:
    """Quadrature for ``int dv``: nodes ``(N, 3)`` and positive weights ``(N,)``."""

    V_max: float
    nodes: np.ndarray
    weights: np.ndarray
    kind: str = "custom"
    shape: Tuple[int, ...] = ()
    axis: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.nodes.ndim != 2 or self.nodes.shape[1] != 3 or len(self.weights) != len(self.nodes):
            raise InvalidParameters("nodes must be (N, 3) with one weight per node")
        if np.any(self.weights <= 0):
            raise InvalidParameters("quadrature weights must be positive")
        mass = float(np.sum(self.weights * maxwellian(self.nodes)))
        if abs(mass / MU_MASS - 1.0) > 1e-6:
            raise InvalidParameters(f"grid integrates mu to {mass:.8g}, expected {MU_MASS:.8g}")

    @classmethod
    def uniform(cls, V_max: float = 6.0, n: int = 24) -> "VelocityGrid":
        """Cell-centred tensor grid on ``[-V_max, V_max]^3``."""
        h = 2.0 * V_max / n
        ax = -V_max + h * (np.arange(n) + 0.5)
        X = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)
        return cls(V_max, X, np.full(len(X), h ** 3), "uniform", (n, n, n), ax)

    @classmethod
    def gauss_hermite(cls, n: int = 6) -> "VelocityGrid":
        """Tensor Gauss-Hermite rule, exact for ``mu`` times polynomials of degree < 2n."""
        x, w = roots_hermitenorm(n)
        w = w * np.exp(0.5 * x * x)  # weights for plain dv
        X = np.stack(np.meshgrid(x, x, x, indexing="ij"), axis=-1).reshape(-1, 3)
        W = np.einsum("i,j,k->ijk", w, w, w).reshape(-1)
        return cls(float(np.max(np.abs(x))), X, W, "gauss_hermite", (n, n, n), x)

    def integrate(self, values) -> float:
        return float(np.sum(self.weights * np.asarray(values)))


@dataclass
class GridFunction:
    """Values on a uniform :class:`VelocityGrid`, callable at arbitrary velocities.

    Outside the grid box the function is taken as zero.
    """

    grid: VelocityGrid
    values: np.ndarray
    method: str = "cubic"

    def __post_init__(self):
        if self.grid.kind != "uniform":
            raise ValueError("interpolation needs a uniform tensor grid")
        ax = self.grid.axis
        self._interp = RegularGridInterpolator((ax, ax, ax), np.asarray(self.values).reshape(self.grid.shape),
                                               method=self.method, bounds_error=False, fill_value=0.0)

    def __call__(self, v):
        v = np.asarray(v, dtype=float)
        return self._interp(v.reshape(-1, 3)).reshape(v.shape[:-1])


# ---------------------------------------------------------------------------
# collision frequency
# ---------------------------------------------------------------------------
def _radial_moment(gamma: float, speed: np.ndarray, r: np.ndarray) -> np.ndarray:
    """``int_{-1}^{1} |s - r|^gamma dc`` for ``|s| = speed``, ``|r| = r``, c the angle cosine."""
    s = speed[..., None]
    a = s * s + r * r
    x = s * r / np.maximum((s + r) ** 2, 1e-300)
    with np.errstate(divide="ignore", invalid="ignore"):
        exact = ((s + r) ** (gamma + 2) - np.abs(s - r) ** (gamma + 2)) / ((gamma + 2) * s * r)
    # small s r / (s + r)^2: two-term expansion of the average of (a - b c)^{gamma/2}
    g2 = 0.5 * gamma
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio2 = np.where(a > 0, (2 * s * r) ** 2 / np.maximum(a, 1e-300) ** 2, 0.0)
    series = 2.0 * a ** g2 * (1.0 + g2 * (g2 - 1.0) * ratio2 / 6.0)
    return np.where(x < 1e-5, series, exact)


def _nu_rule(cfg: KernelConfig, speed: np.ndarray, n: int) -> np.ndarray:
    R = 12.0
    out = np.zeros_like(speed)
    s_cap = np.minimum(speed, R)
    x, w = roots_legendre(n)
    # panel [0, |v|] and [|v|, R]: the radial moment has a kink of order gamma+2 at r = |v|
    for lo, hi in ((np.zeros_like(s_cap), s_cap), (s_cap, np.full_like(s_cap, R))):
        half = 0.5 * (hi - lo)
        r = half[:, None] * x[None, :] + (0.5 * (hi + lo))[:, None]
        vals = r * r * np.exp(-0.5 * r * r) * _radial_moment(cfg.gamma, speed, r)
        out += half * np.sum(w[None, :] * vals, axis=1)
    return cfg.q0_scale * _q0_integral(cfg) * TWO_PI * out


def collision_frequency(cfg: KernelConfig, v, *, check: bool = True) -> np.ndarray:
    """``nu(v) = int int B(v - u, omega) mu(u) domega du``.

    The ``u`` integral is reduced to one radial integral using the exact
    angular average of ``|v - u|^gamma``; Gauss-Legendre on two panels
    split at ``|u| = |v|``.  With ``check`` the rule is repeated with twice
    the nodes and :class:`QuadratureUnderResolved` is raised when the two
    disagree by more than ``1e-4`` relative.
    """
    v = np.asarray(v, dtype=float)
    speed = np.sqrt(_sq(v)).reshape(-1)
    nu = _nu_rule(cfg, speed, cfg.nu_nodes)
    if check:
        fine = _nu_rule(cfg, speed, 2 * cfg.nu_nodes)
        gap = np.max(np.abs(fine - nu) / np.abs(fine))
        if gap > 1e-4:
            raise QuadratureUnderResolved(f"nu refinement gap {gap:.2e} > 1e-4")
        nu = fine
    return nu.reshape(v.shape[:-1])


# ---------------------------------------------------------------------------
# product rule over (u, omega)
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class _Rule:
    u: np.ndarray         # (Nu, 3)
    wu: np.ndarray        # (Nu,)
    c: np.ndarray         # (No,) polar cosines in [0, 1]
    psi: np.ndarray       # (No,) azimuths
    wo: np.ndarray        # (No,) weights including q0(c) + q0(-c)


def _rule(cfg: KernelConfig) -> _Rule:
    r, wr = _gl(cfg.u_radial, 0.0, cfg.U_max)
    ct, wt = _gl(cfg.u_polar, -1.0, 1.0)
    ph = TWO_PI * (np.arange(cfg.u_azimuth) + 0.5) / cfg.u_azimuth
    R, C, P = np.meshgrid(r, ct, ph, indexing="ij")
    S = np.sqrt(1.0 - C * C)
    u = np.stack([R * S * np.cos(P), R * S * np.sin(P), R * C], axis=-1).reshape(-1, 3)
    wu = np.einsum("i,j->ij", wr * r * r, wt)[:, :, None] * (TWO_PI / cfg.u_azimuth)
    wu = np.broadcast_to(wu, R.shape).reshape(-1)
    oc, ow = _gl(cfg.omega_polar, 0.0, 1.0)
    ps = TWO_PI * (np.arange(cfg.omega_azimuth) + 0.5) / cfg.omega_azimuth
    OC, PS = np.meshgrid(oc, ps, indexing="ij")
    ang = np.asarray(cfg.q0(OC), dtype=float) + np.asarray(cfg.q0(-OC), dtype=float)
    wo = (ow[:, None] * (TWO_PI / cfg.omega_azimuth) * ang).reshape(-1)
    return _Rule(u, wu, OC.reshape(-1), PS.reshape(-1), wo)


def _frames(zhat):
    """Orthonormal ``e1, e2`` completing each unit vector in ``zhat`` (..., 3)."""
    a = np.zeros_like(zhat)
    use_x = np.abs(zhat[..., 0]) < 0.9
    a[..., 0] = np.where(use_x, 1.0, 0.0)
    a[..., 1] = np.where(use_x, 0.0, 1.0)
    e1 = a - np.sum(a * zhat, axis=-1, keepdims=True) * zhat
    e1 /= np.linalg.norm(e1, axis=-1, keepdims=True)
    e2 = np.cross(zhat, e1)
    return e1, e2


def _collide(cfg: KernelConfig, rule: _Rule, v_chunk):
    """Post-collision velocities and weights for a chunk of output velocities.

    Returns ``u (Nu,3)``, ``up, vp (M, Nu, No, 3)``, ``W (M, Nu, No)``, where
    ``W = wu * wo * q0_scale * |u - v|^gamma``.
    """
    z = rule.u[None, :, :] - v_chunk[:, None, :]            # (M, Nu, 3)
    zn = np.linalg.norm(z, axis=-1)
    zhat = np.where(zn[..., None] > 0, z / np.where(zn > 0, zn, 1.0)[..., None], np.array([0.0, 0.0, 1.0]))
    e1, e2 = _frames(zhat)
    s = np.sqrt(1.0 - rule.c * rule.c)
    omega = (rule.c[None, None, :, None] * zhat[:, :, None, :]
             + (s * np.cos(rule.psi))[None, None, :, None] * e1[:, :, None, :]
             + (s * np.sin(rule.psi))[None, None, :, None] * e2[:, :, None, :])
    # (v - u).omega = -|z| c
    shift = (zn[:, :, None] * rule.c[None, None, :])[..., None] * omega
    up = rule.u[None, :, None, :] - shift
    vp = v_chunk[:, None, None, :] + shift
    B = cfg.q0_scale * (zn ** cfg.gamma if cfg.gamma > 0 else np.ones_like(zn))
    W = (rule.wu[None, :] * B)[:, :, None] * rule.wo[None, None, :]
    return up, vp, W


def _chunks(v, size):
    for i in range(0, len(v), size):
        yield i, v[i:i + size]


def _chunk_size(rule: _Rule) -> int:
    per = len(rule.u) * len(rule.wo)
    return max(1, int(2_000_000 // per))


def _as_velocity_array(v):
    v = np.asarray(v, dtype=float)
    return v.reshape(-1, 3), v.shape[:-1]


def loss_frequency(cfg: KernelConfig, v) -> np.ndarray:
    """``nu`` computed with the same product rule as :func:`apply_K`."""
    rule = _rule(cfg)
    V, shape = _as_velocity_array(v)
    wsum = float(np.sum(rule.wo))
    z = np.linalg.norm(rule.u[None, :, :] - V[:, None, :], axis=-1)
    B = cfg.q0_scale * (z ** cfg.gamma if cfg.gamma > 0 else np.ones_like(z))
    return (np.sum(rule.wu * maxwellian(rule.u) * B, axis=1) * wsum).reshape(shape)


def _eval(f, x):
    """``f(x)`` with a trailing component axis always present."""
    out = np.asarray(f(x), dtype=float)
    return out[..., None] if out.ndim == x.ndim - 1 else out


def _K_raw(cfg: KernelConfig, f: Callable, v, rule: Optional[_Rule] = None) -> np.ndarray:
    rule = rule or _rule(cfg)
    V, shape = _as_velocity_array(v)
    sq_u = sqrt_maxwellian(rule.u)
    raw = np.asarray(f(rule.u), dtype=float)
    scalar = raw.ndim == 1
    f_u = raw[:, None] if scalar else raw                     # (Nu, m)
    out = np.empty((len(V), f_u.shape[-1]))
    wsum = np.sum(rule.wo)
    for i, vc in _chunks(V, _chunk_size(rule)):
        up, vp, W = _collide(cfg, rule, vc)
        Wg = W * sq_u[None, :, None]
        gain = (np.einsum("mun,munk->mk", Wg * sqrt_maxwellian(up), _eval(f, vp))
                + np.einsum("mun,munk->mk", Wg * sqrt_maxwellian(vp), _eval(f, up)))
        z = np.linalg.norm(rule.u[None, :, :] - vc[:, None, :], axis=-1)
        B = cfg.q0_scale * (z ** cfg.gamma if cfg.gamma > 0 else np.ones_like(z))
        loss = sqrt_maxwellian(vc)[:, None] * np.einsum("mu,uk->mk", rule.wu * B * sq_u, f_u) * wsum
        out[i:i + len(vc)] = gain - loss
    return out[:, 0].reshape(shape) if scalar else out.reshape(shape + (out.shape[-1],))


def _refinement_guard(coarse, fine, what):
    scale = max(float(np.max(np.abs(fine))), 1e-300)
    gap = float(np.max(np.abs(fine - coarse))) / scale
    if gap > 1e-4:
        raise QuadratureUnderResolved(f"{what}: refinement gap {gap:.2e} > 1e-4")


def apply_K(cfg: KernelConfig, params: Optional[WeightParams], f: Callable, v, *,
            weighted: bool = False, check: bool = False) -> np.ndarray:
    """``(K f)(v)`` by quadrature of the gain/loss definition.

    ``f`` is a vectorised callable on ``(..., 3)`` velocity arrays (a
    :class:`GridFunction` for grid data).  With ``weighted=True`` the
    weighted operator ``K_w h = w K(h/w)`` is returned instead, ``f`` then
    playing the role of ``h`` and ``params`` supplying ``w``.  ``check``
    repeats the computation on the doubled rule and raises
    :class:`QuadratureUnderResolved` if the sup-norm gap exceeds ``1e-4``
    relative.
    """
    if weighted:
        if params is None:
            raise ValueError("weighted K needs WeightParams")
        g = lambda u: f(u) / weight_w(params, u)  # noqa: E731
        scale = weight_w(params, v)
    else:
        g, scale = f, 1.0
    out = _K_raw(cfg, g, v)
    if check:
        _refinement_guard(out, _K_raw(cfg.refined(), g, v), "K")
    return scale * out


def K_w(cfg: KernelConfig, params: WeightParams, h: Callable, v, **kw) -> np.ndarray:
    return apply_K(cfg, params, h, v, weighted=True, **kw)


def _gamma_raw(cfg, f1, f2, v, rule=None):
    rule = rule or _rule(cfg)
    V, shape = _as_velocity_array(v)
    out = np.empty(len(V))
    sq_u = sqrt_maxwellian(rule.u)
    f1_u = f1(rule.u)
    for i, vc in _chunks(V, _chunk_size(rule)):
        up, vp, W = _collide(cfg, rule, vc)
        gain = np.sum(W * sq_u[None, :, None] * f1(up) * f2(vp), axis=(1, 2))
        loss = np.sum(W * (sq_u * f1_u)[None, :, None], axis=(1, 2)) * f2(vc)
        out[i:i + len(vc)] = gain - loss
    return out.reshape(shape)


def gamma_bilinear(cfg: KernelConfig, params: Optional[WeightParams], f1: Callable, f2: Callable, v, *,
                   weighted: bool = False, check: bool = False) -> np.ndarray:
    """``Gamma(f1, f2)(v) = mu^{-1/2} Q(sqrt(mu) f1, sqrt(mu) f2)``.

    Written out, ``int int B sqrt(mu(u)) [f1(u') f2(v') - f1(u) f2(v)]``.
    ``weighted=True`` returns ``w Gamma(h1/w, h2/w)``.
    """
    if weighted:
        if params is None:
            raise ValueError("weighted Gamma needs WeightParams")
        g1 = lambda u: f1(u) / weight_w(params, u)  # noqa: E731
        g2 = lambda u: f2(u) / weight_w(params, u)  # noqa: E731
        scale = weight_w(params, v)
    else:
        g1, g2, scale = f1, f2, 1.0
    out = _gamma_raw(cfg, g1, g2, v)
    if check:
        _refinement_guard(out, _gamma_raw(cfg.refined(), g1, g2, v), "Gamma")
    return scale * out


def gamma_pair_table(cfg: KernelConfig, basis: Callable, v, *, gain_only: bool = False) -> np.ndarray:
    """``Gamma(psi_b, psi_c)(v)`` for every pair of a vector-valued basis.

    ``basis`` maps ``(..., 3)`` velocities to ``(..., nb)``.  Returns an
    array ``(len(v), nb, nb)``; with ``gain_only`` the loss part is dropped.
    """
    rule = _rule(cfg)
    V, _ = _as_velocity_array(v)
    sq_u = sqrt_maxwellian(rule.u)
    b_u = np.asarray(basis(rule.u), dtype=float)
    nb = b_u.shape[-1]
    out = np.empty((len(V), nb, nb))
    size = max(1, _chunk_size(rule) // max(1, nb))
    for i, vc in _chunks(V, size):
        up, vp, W = _collide(cfg, rule, vc)
        Wg = W * sq_u[None, :, None]
        gain = np.einsum("mun,muna,munb->mab", Wg, basis(up), basis(vp), optimize=True)
        if not gain_only:
            # loss: psi_b(u) psi_c(v) weighted by the omega-summed kernel
            Wl = np.sum(Wg, axis=2)                      # (M, Nu)
            gain -= np.einsum("mu,ua,mb->mab", Wl, b_u, basis(vc), optimize=True)
        out[i:i + len(vc)] = gain
    return out


def loss_frequency_table(cfg: KernelConfig, basis: Callable, v) -> np.ndarray:
    """``int int B sqrt(mu(u)) psi_b(u)`` at each ``v``: shape ``(len(v), nb)``.

    For ``F = sqrt(mu) g`` with ``g = sum_b c_b psi_b`` the loss frequency
    ``int int B F(u)`` is the table times ``c``.
    """
    rule = _rule(cfg)
    V, _ = _as_velocity_array(v)
    z = np.linalg.norm(rule.u[None, :, :] - V[:, None, :], axis=-1)
    B = cfg.q0_scale * (z ** cfg.gamma if cfg.gamma > 0 else np.ones_like(z))
    wsum = float(np.sum(rule.wo))
    return np.einsum("mu,ub->mb", rule.wu * B * sqrt_maxwellian(rule.u), np.asarray(basis(rule.u))) * wsum


def gamma_loss(cfg: KernelConfig, f1: Callable, f2: Callable, v) -> np.ndarray:
    """Loss part ``f2(v) int int B sqrt(mu(u)) f1(u)``."""
    rule = _rule(cfg)
    V, shape = _as_velocity_array(v)
    z = np.linalg.norm(rule.u[None, :, :] - V[:, None, :], axis=-1)
    B = cfg.q0_scale * (z ** cfg.gamma if cfg.gamma > 0 else np.ones_like(z))
    s = np.sum(rule.wu * B * sqrt_maxwellian(rule.u) * f1(rule.u), axis=1) * np.sum(rule.wo)
    return (s * f2(V)).reshape(shape)


# ---------------------------------------------------------------------------
# Grad majorant and the weighted kernel bound
# ---------------------------------------------------------------------------
def grad_majorant(params: Optional[WeightParams], v, vprime, epsilon: float = 0.0) -> np.ndarray:
    """``(|v-v'| + |v-v'|^-1) exp(-(1-eps)/8 |v-v'|^2 - (1-eps)/8 (|v|^2-|v'|^2)^2/|v-v'|^2)``.

    The majorant carries no weight; ``params`` is accepted so that all
    kernel diagnostics share one signature.
    """
    v = np.asarray(v, dtype=float)
    vp = np.asarray(vprime, dtype=float)
    d = np.sqrt(_sq(v - vp))
    if np.any(d < 1e-12):
        raise DiagonalSingularity("the majorant is singular on the diagonal v = v'")
    k = (1.0 - epsilon) / 8.0
    return (d + 1.0 / d) * np.exp(-k * d * d - k * (_sq(v) - _sq(vp)) ** 2 / (d * d))


def kw_quadratic_form(theta: float, epsilon: float) -> dict:
    """Coefficients of the exponent ``A a^2 + B a b + C b^2`` in ``a = |eta|``, ``b = v.eta/|eta|``.

    The exponent of majorant times weight ratio is negative definite iff
    ``A < 0`` and ``B^2 - 4 A C < 0``.
    """
    A = -(1.0 - epsilon) / 4.0 - theta
    B = (1.0 - epsilon) / 2.0 + 2.0 * theta
    C = -(1.0 - epsilon) / 2.0
    disc = B * B - 4.0 * A * C
    return {"A": A, "B": B, "C": C, "discriminant": disc, "negative_definite": bool(A < 0 and disc < 0)}


def _kw_integral(params: WeightParams, speed: float, epsilon: float, n: int) -> float:
    """``I(v) = int majorant(v, v', eps) w(v)/w(v') dv'`` for ``|v| = speed``.

    With ``eta = v - v'``, ``a = |eta|`` and ``y = 2|v| cos(eta, v) - a`` the
    integrand becomes ``2 pi a^2 (a + 1/a) exp(-k a^2 - k y^2 + theta a y)``
    times ``((1 + rho|v|^2)/(1 + rho(|v|^2 - a y)))^beta`` with Jacobian
    ``1/(2|v|)``; ``k = (1-eps)/8``.
    """
    k = (1.0 - epsilon) / 8.0
    th, rho, beta = params.theta, params.rho, params.beta
    s2 = speed * speed
    # marginal decay in a after the y-integral: exp(-(k - th^2/(4k)) a^2)
    kappa = k - th * th / (4.0 * k)
    a_max = np.sqrt(60.0 / kappa) + 2.0 * speed
    x, w = roots_legendre(n)
    # panels in a; the cut at 2|v| lets the clipped y-range shrink smoothly
    edges = np.unique(np.clip([0.0, 1.0, 2.0 * speed, a_max], 0.0, a_max))
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        if hi <= lo:
            continue
        a = 0.5 * (hi - lo) * x + 0.5 * (hi + lo)
        wa = 0.5 * (hi - lo) * w
        if speed < 1e-8:
            # y = -a identically; the c-integral contributes a factor 2
            expo = -2.0 * k * a * a - th * a * a
            ratio = ((1.0 + rho * s2) / (1.0 + rho * (s2 + a * a))) ** beta
            inner = 2.0 * np.exp(expo) * ratio
        else:
            # y-window: the full range clipped to where the Gaussian in y matters
            centre = th * a / (2.0 * k)
            width = 12.0 / np.sqrt(k)
            ylo = np.maximum(-2.0 * speed - a, centre - width)
            yhi = np.minimum(2.0 * speed - a, centre + width)
            valid = yhi > ylo
            Y = 0.5 * (yhi - ylo)[:, None] * x[None, :] + 0.5 * (yhi + ylo)[:, None]
            WY = 0.5 * (yhi - ylo)[:, None] * w[None, :]
            A = a[:, None]
            expo = -k * A * A - k * Y * Y + th * A * Y
            ratio = ((1.0 + rho * s2) / (1.0 + rho * np.maximum(s2 - A * Y, 0.0))) ** beta
            inner = np.where(valid, np.sum(WY * np.exp(expo) * ratio, axis=1), 0.0) / (2.0 * speed)
        total += float(np.sum(wa * TWO_PI * a * a * (a + 1.0 / a) * inner))
    return total


def kw_bound_check(params: WeightParams, cfg: Optional[KernelConfig], v_samples, epsilon: float = 0.0,
                   *, nodes: int = 96, tol: float = 0.02) -> dict:
    """Check that ``(1+|v|) int majorant * w(v)/w(v') dv'`` is bounded.

    The negative-definiteness of the combined exponent is checked first; if
    it fails, no integral is attempted and ``ok`` is false.  Otherwise the
    integral is evaluated at each sample speed with ``nodes`` and
    ``2*nodes`` Gauss-Legendre points per panel, and ``ok`` requires the
    maximum products at the two levels to agree within ``tol``.
    """
    if not 0.0 <= epsilon < 1.0:
        raise InvalidParameters("epsilon must lie in [0, 1)")
    form = kw_quadratic_form(params.theta, epsilon)
    speeds = np.sqrt(_sq(np.asarray(v_samples, dtype=float))).reshape(-1) \
        if np.ndim(v_samples) > 1 else np.abs(np.asarray(v_samples, dtype=float)).reshape(-1)
    report = {"precheck": form, "epsilon": epsilon, "theta": params.theta, "speeds": speeds.tolist(),
              "quadrature": {"nodes": [nodes, 2 * nodes], "tol": tol},
              "kernel": cfg.describe() if cfg is not None else None}
    if not form["negative_definite"]:
        report.update(max_product=None, ok=False, reason="exponent is not negative definite")
        return report
    coarse = np.array([(1 + s) * _kw_integral(params, s, epsilon, nodes) for s in speeds])
    fine = np.array([(1 + s) * _kw_integral(params, s, epsilon, 2 * nodes) for s in speeds])
    mc, mf = float(coarse.max()), float(fine.max())
    stable = bool(np.isfinite(mf) and abs(mf - mc) <= tol * abs(mf))
    report.update(products=fine.tolist(), max_product=mf, max_product_coarse=mc,
                  refinement_gap=abs(mf - mc) / abs(mf) if mf else np.inf, ok=stable,
                  reason=None if stable else "not refinement stable")
    return report


# ---------------------------------------------------------------------------
# diffuse flux measure
# ---------------------------------------------------------------------------
def _hemisphere_rule(n, n_polar=16, n_azimuth=32):
    from .cycles import tangent_frame

    n = np.asarray(n, dtype=float)
    n = n / np.linalg.norm(n)
    t1, t2 = tangent_frame(n)
    c, wc = _gl(n_polar, 0.0, 1.0)
    ph = TWO_PI * (np.arange(n_azimuth) + 0.5) / n_azimuth
    C, P = np.meshgrid(c, ph, indexing="ij")
    S = np.sqrt(1.0 - C * C)
    dirs = (C[..., None] * n + (S * np.cos(P))[..., None] * t1 + (S * np.sin(P))[..., None] * t2).reshape(-1, 3)
    W = (wc[:, None] * np.full(n_azimuth, TWO_PI / n_azimuth)[None, :]).reshape(-1)
    return n, dirs, W


def _half_space_integral(integrand, n, rtol=1e-11):
    """``int_{v.n > 0} integrand(v) (n.v) dv`` in spherical coordinates about ``n``."""
    n, dirs, W = _hemisphere_rule(n)
    cosn = dirs @ n

    def radial(r):
        v = r * dirs
        return r ** 3 * float(np.sum(W * cosn * integrand(v)))

    val, err = integrate.quad(radial, 0.0, np.inf, epsabs=0.0, epsrel=rtol, limit=200)
    if not np.isfinite(val) or err > 1e3 * rtol * abs(val):
        raise QuadratureUnderResolved(f"half-space integral error {err:.2e} for value {val:.6g}")
    return val


def flux_measure(params: WeightParams, n) -> dict:
    """Normalisation of ``d sigma = c_mu mu(v) (n.v) dv`` on ``{v.n > 0}``.

    Returns ``c_mu``, the total mass of ``d sigma`` (one) and
    ``int wtilde^2 d sigma``, all by quadrature in the half-space about ``n``.
    """
    flux = _half_space_integral(maxwellian, n)
    c_mu = 1.0 / flux
    # second evaluation on a finer angular rule gives an independent mass check
    n_, dirs, W = _hemisphere_rule(n, 24, 48)
    cosn = dirs @ n_
    mass = c_mu * integrate.quad(lambda r: r ** 3 * float(np.sum(W * cosn * maxwellian(r * dirs))),
                                 0.0, np.inf, epsabs=0.0, epsrel=1e-12, limit=200)[0]
    wt2 = c_mu * _half_space_integral(lambda v: wtilde_sq_mu(params, v), n)
    return {"c_mu": c_mu, "total_mass": mass, "wtilde_sq_integral": wt2}
