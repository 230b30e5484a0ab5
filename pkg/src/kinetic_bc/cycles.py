"""Generalised characteristics (cycles) for reflecting boundary laws.

Cycles run backward in time.  From ``(t_k, x_k, v_k)`` the next node is
``t_{k+1} = t_k - t_b(x_k, v_k)``, ``x_{k+1} = x_b(x_k, v_k)`` and
``v_{k+1}`` is given by the boundary law at ``x_{k+1}``:

* bounce-back ``v_{k+1} = -v_k``;
* specular ``v_{k+1} = R(x_{k+1}) v_k`` with ``R v = v - 2 (n.v) n``;
* diffuse: ``v_{k+1}`` drawn from ``c_mu mu(v) (n.v) dv`` on ``{n.v > 0}``.

The module also holds the integer sequence ``zeta(k)`` that governs the
k-bounce specular Jacobian near the grazing set, a finite-difference
Jacobian probe, and the Monte Carlo estimate of diffuse stuck mass.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache
from typing import List, Optional, Sequence

import numpy as np

from .errors import GrazingAbort, IllConditioned
from .geometry import LevelSetDomain, outward_normal
from .trajectory import PhasePoint, exit_times

GRAZE_REL = 1e-8
DEFAULT_MAX_BOUNCES = 10_000


class CycleKind(enum.Enum):
    BOUNCE_BACK = "bounce_back"
    SPECULAR = "specular"
    DIFFUSE = "diffuse"


class Termination(enum.Enum):
    REACHED_TIME = "reached_time"
    GRAZING_ABORT = "grazing_abort"
    MAX_BOUNCES = "max_bounces"


@dataclass(frozen=True)
class CycleNode:
    t: float
    x: np.ndarray
    v: np.ndarray


@dataclass
class Cycle:
    kind: CycleKind
    nodes: List[CycleNode]
    termination: Termination
    start: tuple  # (t, PhasePoint)

    @property
    def times(self) -> np.ndarray:
        return np.array([nd.t for nd in self.nodes])

    @property
    def positions(self) -> np.ndarray:
        return np.array([nd.x for nd in self.nodes])

    @property
    def velocities(self) -> np.ndarray:
        return np.array([nd.v for nd in self.nodes])

    def state_at(self, s: float) -> tuple[np.ndarray, np.ndarray]:
        """``(X_cl(s), V_cl(s))`` for a time ``s`` covered by the cycle."""
        for k in range(len(self.nodes) - 1):
            if self.nodes[k + 1].t <= s <= self.nodes[k].t:
                nd = self.nodes[k]
                return nd.x + (s - nd.t) * nd.v, nd.v.copy()
        raise ValueError("time not covered by this cycle")


# ---------------------------------------------------------------------------
# diffuse re-emission sampler
# ---------------------------------------------------------------------------
def tangent_frame(n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Two unit vectors completing ``n`` (shape ``(..., 3)``) to an orthonormal frame."""
    n = np.asarray(n, dtype=float)
    a = np.zeros_like(n)
    use_z = np.abs(n[..., 2]) < 0.9
    a[..., 2] = np.where(use_z, 1.0, 0.0)
    a[..., 0] = np.where(use_z, 0.0, 1.0)
    e1 = np.cross(n, a)
    e1 /= np.linalg.norm(e1, axis=-1, keepdims=True)
    e2 = np.cross(n, e1)
    return e1, e2


@dataclass
class DiffuseSampler:
    """Draws outgoing velocities from ``c_mu mu(v) (n.v) dv``.

    The stream is ``default_rng(SeedSequence(rng_seed, spawn_key=(stream_id,)))``,
    so distinct ``stream_id`` values give independent, reproducible streams.
    Tangential components are standard normal and the normal component is
    Rayleigh distributed -- the density factorises exactly this way, so
    there is no rejection step.
    """

    rng_seed: int
    stream_id: int = 0
    _rng: Optional[np.random.Generator] = field(default=None, repr=False, compare=False)

    @property
    def rng(self) -> np.random.Generator:
        if self._rng is None:
            self._rng = np.random.default_rng(np.random.SeedSequence(self.rng_seed, spawn_key=(self.stream_id,)))
        return self._rng

    def fresh(self) -> "DiffuseSampler":
        """An identical sampler rewound to the start of its stream."""
        return DiffuseSampler(self.rng_seed, self.stream_id)

    def substream(self, offset: int) -> "DiffuseSampler":
        return DiffuseSampler(self.rng_seed, self.stream_id * 1_000_003 + offset + 1)

    def sample(self, normals) -> np.ndarray:
        normals = np.atleast_2d(np.asarray(normals, dtype=float))
        m = len(normals)
        tang = self.rng.standard_normal((m, 2))
        vn = self.rng.rayleigh(1.0, size=m)
        e1, e2 = tangent_frame(normals)
        return vn[:, None] * normals + tang[:, :1] * e1 + tang[:, 1:] * e2


# ---------------------------------------------------------------------------
# scalar cycle generation
# ---------------------------------------------------------------------------
def _reflect(v: np.ndarray, n: np.ndarray) -> np.ndarray:
    return v - 2.0 * np.sum(v * n, axis=-1, keepdims=True) * n


def _start_checks(domain: LevelSetDomain, p: PhasePoint) -> None:
    if float(np.linalg.norm(p.v)) == 0.0:
        raise GrazingAbort("zero velocity has no cycle")
    if abs(float(domain.xi(p.x))) <= domain.boundary_tol:
        n = outward_normal(domain, p.x)
        if abs(float(np.dot(n, p.v))) < GRAZE_REL * np.linalg.norm(p.v):
            raise GrazingAbort("start point is grazing")


def _generate(domain: LevelSetDomain, kind: CycleKind, t: float, p: PhasePoint, stop_time: float,
              max_bounces: int, sampler: Optional[DiffuseSampler], strict: bool) -> Cycle:
    if stop_time > t:
        raise ValueError("stop_time must not exceed t")
    _start_checks(domain, p)
    nodes = [CycleNode(float(t), p.x.copy(), p.v.copy())]
    tk, xk, vk = float(t), p.x.copy(), p.v.copy()
    termination = Termination.MAX_BOUNCES
    for k in range(max_bounces + 1):
        tb = float(exit_times(domain, xk[None], vk[None])[0])
        t_next = tk - tb
        x_next = xk - tb * vk
        if t_next <= stop_time:
            nodes.append(CycleNode(t_next, x_next, vk.copy() if kind is CycleKind.DIFFUSE else
                                   _next_velocity(domain, kind, x_next, vk, None)))
            termination = Termination.REACHED_TIME
            break
        if k == max_bounces:
            break
        n = domain.normal(x_next)
        speed = float(np.linalg.norm(vk))
        if abs(float(np.dot(n, vk))) < GRAZE_REL * speed:
            if strict or (kind is CycleKind.DIFFUSE and k == 0):
                raise GrazingAbort(f"grazing bounce at t = {t_next:.6g}")
            nodes.append(CycleNode(t_next, x_next, vk.copy()))
            termination = Termination.GRAZING_ABORT
            break
        v_next = _next_velocity(domain, kind, x_next, vk, sampler)
        nodes.append(CycleNode(t_next, x_next, v_next))
        tk, xk, vk = t_next, x_next, v_next
    return Cycle(kind, nodes, termination, (float(t), p))


def _next_velocity(domain, kind, x_next, vk, sampler):
    if kind is CycleKind.BOUNCE_BACK:
        return -vk
    if kind is CycleKind.SPECULAR:
        return _reflect(vk, domain.normal(x_next))
    return sampler.sample(domain.normal(x_next)[None])[0]


def bounce_back_cycle(domain: LevelSetDomain, t: float, p: PhasePoint, stop_time: float = 0.0,
                      max_bounces: int = DEFAULT_MAX_BOUNCES, strict: bool = True) -> Cycle:
    return _generate(domain, CycleKind.BOUNCE_BACK, t, p, stop_time, max_bounces, None, strict)


def specular_cycle(domain: LevelSetDomain, t: float, p: PhasePoint, stop_time: float = 0.0,
                   max_bounces: int = DEFAULT_MAX_BOUNCES, strict: bool = True) -> Cycle:
    return _generate(domain, CycleKind.SPECULAR, t, p, stop_time, max_bounces, None, strict)


def diffuse_cycle_sample(domain: LevelSetDomain, t: float, p: PhasePoint, stop_time: float,
                         max_bounces: int, sampler: DiffuseSampler) -> Cycle:
    """One sampled diffuse cycle.

    The node that first reaches ``stop_time`` keeps the incoming velocity
    (no draw is spent on a re-emission that is never used).
    """
    return _generate(domain, CycleKind.DIFFUSE, t, p, stop_time, max_bounces, sampler, strict=False)


# ---------------------------------------------------------------------------
# vectorised deterministic tracing
# ---------------------------------------------------------------------------
@dataclass
class TraceResult:
    x: np.ndarray          # position at the target time
    v: np.ndarray          # velocity at the target time
    bounces: np.ndarray    # number of wall interactions on the way
    grazing: np.ndarray    # True where a bounce was within the grazing band
    exit_time: np.ndarray  # time to the first wall hit (np.inf if none within the window)
    first_exit: np.ndarray  # first wall point (NaN if none)


def trace_back(domain: LevelSetDomain, kind: CycleKind, x, v, elapsed,
               max_bounces: int = DEFAULT_MAX_BOUNCES) -> TraceResult:
    """Follow the backward bounce-back or specular cycle for ``elapsed`` time.

    ``x``, ``v`` have shape ``(N, 3)`` and ``elapsed`` is a scalar or ``(N,)``.
    Returns ``X_cl`` and ``V_cl`` at ``t - elapsed`` for cycles started at
    time ``t``.
    """
    if kind is CycleKind.DIFFUSE:
        raise ValueError("diffuse cycles are random; use diffuse_cycle_sample")
    x = np.array(np.atleast_2d(x), dtype=float)
    v = np.array(np.atleast_2d(v), dtype=float)
    n_pts = len(x)
    remaining = np.broadcast_to(np.asarray(elapsed, dtype=float), (n_pts,)).copy()
    bounces = np.zeros(n_pts, dtype=int)
    grazing = np.zeros(n_pts, dtype=bool)
    first_time = np.full(n_pts, np.inf)
    first_exit = np.full((n_pts, 3), np.nan)
    active = np.arange(n_pts)
    for _ in range(max_bounces + 1):
        if active.size == 0:
            break
        xa, va = x[active], v[active]
        tb = exit_times(domain, xa, va)
        ra = remaining[active]
        hit = tb < ra
        done = active[~hit]
        x[done] = xa[~hit] - ra[~hit, None] * va[~hit]
        hit_idx = active[hit]
        if hit_idx.size == 0:
            active = hit_idx
            break
        tbh = tb[hit]
        xh = xa[hit] - tbh[:, None] * va[hit]
        first = bounces[hit_idx] == 0
        first_time[hit_idx[first]] = tbh[first]
        first_exit[hit_idx[first]] = xh[first]
        n = domain.normal(xh)
        vh = va[hit]
        vn = np.sum(vh * n, axis=1)
        grazing[hit_idx] |= np.abs(vn) < GRAZE_REL * np.linalg.norm(vh, axis=1)
        if kind is CycleKind.BOUNCE_BACK:
            v[hit_idx] = -vh
        else:
            v[hit_idx] = vh - 2.0 * vn[:, None] * n
        x[hit_idx] = xh
        remaining[hit_idx] = ra[hit] - tbh
        bounces[hit_idx] += 1
        active = hit_idx
    if active.size:
        grazing[active] = True  # did not finish within max_bounces
    return TraceResult(x, v, bounces, grazing, first_time, first_exit)


# ---------------------------------------------------------------------------
# zeta recursion and the specular Jacobian
# ---------------------------------------------------------------------------
@lru_cache(maxsize=None)
def zeta(k: int) -> int:
    """Integer coefficient of ``n (x) n`` in the k-bounce specular Jacobian.

    ``zeta(1) = 0`` and, for ``k >= 2``,
    ``zeta(k) = 4 sum_{p=1}^{k-2} (-1)^(k-p+1) + 4 sum_{p=1}^{k-2} (-1)^(k-1-p) zeta(p)
    + 2 + 3 zeta(k-1)``.
    """
    if k < 1:
        raise ValueError("zeta is defined for k >= 1")
    if k == 1:
        return 0
    s1 = sum((-1) ** (k - p + 1) for p in range(1, k - 1))
    s2 = sum((-1) ** (k - 1 - p) * zeta(p) for p in range(1, k - 1))
    return 4 * s1 + 4 * s2 + 2 + 3 * zeta(k - 1)


@dataclass(frozen=True)
class JacobianReport:
    k: int
    eps0: float
    det_fd: float
    zeta_pred: int
    det_pred: float
    rel_gap: float
    incidence: str
    cumulative_time: float
    time_flag: bool
    condition: float

    def as_row(self) -> dict:
        return {
            "k": self.k, "eps0": self.eps0, "incidence": self.incidence,
            "det_fd": self.det_fd, "zeta_pred": self.zeta_pred, "det_pred": self.det_pred,
            "rel_gap": self.rel_gap, "cumulative_time": self.cumulative_time,
            "time_flag": self.time_flag, "condition": self.condition,
        }


def specular_velocity_map(domain: LevelSetDomain, x1, v1, k: int) -> tuple[np.ndarray, np.ndarray]:
    """``v_k`` after ``k - 1`` specular bounces of the backward cycle from ``(x1, v1)``.

    Vectorised over rows of ``v1``; returns ``(v_k, cumulative_time)``.
    """
    v = np.array(np.atleast_2d(v1), dtype=float)
    x = np.broadcast_to(np.asarray(x1, dtype=float), v.shape).copy()
    elapsed = np.zeros(len(v))
    for _ in range(k - 1):
        tb = exit_times(domain, x, v)
        x = x - tb[:, None] * v
        n = domain.normal(x)
        vn = np.sum(v * n, axis=1)
        if np.any(np.abs(vn) < GRAZE_REL * np.linalg.norm(v, axis=1)):
            raise GrazingAbort("grazing bounce inside the Jacobian probe")
        v = v - 2.0 * vn[:, None] * n
        elapsed += tb
    return v, elapsed


def specular_jacobian_fd(domain: LevelSetDomain, x1, eps0: float, k: int, *,
                         incidence: str = "tangential", tangent=None,
                         step_rel: float = 1e-6) -> JacobianReport:
    """Finite-difference determinant of ``dv_k / dv_1`` for the specular cycle.

    ``incidence="tangential"`` starts at the boundary point ``x1`` with
    ``|v1| = eps0`` and ``v1.n(x1) = eps0^2``; the determinant approaches
    ``zeta(k) + 1`` as ``eps0 -> 0``.

    ``incidence="normal"`` probes the opposite regime, where the exit time is
    small: the start point sits at depth ``eps0^2`` below ``x1`` along the
    normal and ``v1 = -eps0 n(x1)``, so the first wall hit happens after
    time ``eps0`` and ``dv_2/dv_1`` tends to the reflection ``R(x1)``
    (determinant ``-1``).
    """
    x1 = np.asarray(x1, dtype=float).reshape(3)
    n1 = outward_normal(domain, x1)
    if incidence == "tangential":
        if tangent is None:
            tangent = tangent_frame(n1)[0]
        tangent = np.asarray(tangent, dtype=float)
        tangent = tangent - np.dot(tangent, n1) * n1
        tangent /= np.linalg.norm(tangent)
        v1 = eps0**2 * n1 + np.sqrt(eps0**2 - eps0**4) * tangent
        x_start = x1
        det_pred = float(zeta(k) + 1)
    elif incidence == "normal":
        v1 = -eps0 * n1
        x_start = x1 - eps0**2 * n1
        det_pred = -1.0 if k >= 2 else 1.0
    else:
        raise ValueError("incidence must be 'tangential' or 'normal'")
    h = step_rel * eps0
    pert = np.concatenate([v1 + h * np.eye(3), v1 - h * np.eye(3), v1[None]])
    vk, elapsed = specular_velocity_map(domain, x_start, pert, k)
    J = (vk[:3] - vk[3:6]).T / (2.0 * h)
    cond = float(np.linalg.cond(J))
    if cond > 1e8:
        raise IllConditioned(f"finite-difference Jacobian condition number {cond:.3e}")
    det = float(np.linalg.det(J))
    cum = float(elapsed[6])
    return JacobianReport(
        k=k, eps0=float(eps0), det_fd=det, zeta_pred=zeta(k), det_pred=det_pred,
        rel_gap=abs(det - det_pred) / abs(det_pred), incidence=incidence,
        cumulative_time=cum, time_flag=bool(cum > 10.0 * domain.bounding_radius / eps0),
        condition=cond,
    )


# ---------------------------------------------------------------------------
# diffuse stuck mass
# ---------------------------------------------------------------------------
def _stuck_levels(domain: LevelSetDomain, t: float, p: PhasePoint, k_max: int, samples: int,
                  sampler: DiffuseSampler) -> np.ndarray:
    """Boolean matrix ``alive[k-2, i] = 1{t_k > 0}`` for k = 2..k_max (common random numbers)."""
    tb0 = float(exit_times(domain, p.x[None], p.v[None])[0])
    t1 = t - tb0
    x1 = p.x - tb0 * p.v
    rng_sampler = sampler.fresh()
    tk = np.full(samples, t1)
    xk = np.broadcast_to(x1, (samples, 3)).copy()
    alive = np.zeros((max(k_max - 1, 0), samples), dtype=bool)
    for level in range(1, k_max):
        # every path draws at every level, so the stream does not depend on k_max
        n = domain.normal(xk)
        vk = rng_sampler.sample(n)
        tb = exit_times(domain, xk, vk)
        tk = tk - tb
        xk = xk - tb[:, None] * vk
        alive[level - 1] = tk > 0.0
    if t1 <= 0.0:
        alive[:] = False
    # once a path has reached the initial plane it stays there
    return np.logical_and.accumulate(alive, axis=0) if alive.size else alive


def stuck_fraction_mc(domain: LevelSetDomain, t: float, p: PhasePoint, k: int, samples: int,
                      sampler: DiffuseSampler) -> dict:
    """Monte Carlo estimate of ``int 1{t_k > 0} prod_{l<k} d sigma_l``.

    The sampler is rewound before use, so calls with different ``k`` share
    their random numbers and the estimates are monotone in ``k``.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    if samples < 100:
        raise ValueError("samples must be >= 100")
    alive = _stuck_levels(domain, t, p, k, samples, sampler)
    frac = float(alive[k - 2].mean())
    return {"fraction": frac, "stderr": float(np.sqrt(frac * (1.0 - frac) / samples))}


def stuck_fraction_sweep(domain: LevelSetDomain, t: float, p: PhasePoint, ks: Sequence[int],
                         samples: int, sampler: DiffuseSampler, threshold: float = 0.05) -> dict:
    """Stuck fractions for several ``k`` from one simulation; records the first ``k`` below ``threshold``."""
    ks = sorted(int(k) for k in ks)
    if ks[0] < 2:
        raise ValueError("k must be >= 2")
    alive = _stuck_levels(domain, t, p, ks[-1], samples, sampler)
    fr = [float(alive[k - 2].mean()) for k in ks]
    se = [float(np.sqrt(f * (1 - f) / samples)) for f in fr]
    k0 = next((k for k, f in zip(ks, fr) if f < threshold), None)
    return {"k": ks, "fraction": fr, "stderr": se, "k0": k0, "threshold": threshold}
