"""Command-line front end.

    kinetic-bc jacobian --k 2 --eps0 1e-3 --domain ball
    kinetic-bc stuck-mass --k 2..30 --t 1 --paths 100000 --seed 3
    kinetic-bc decay --bc bounceback --t 0..2 --format text
    kinetic-bc solve --config scenario.yaml --out reports/

Every subcommand builds a :class:`ReportBundle` with named checks.  Exit
codes: 0 when all checks pass, 2 when the configuration is invalid, 3 when
the run completed but a numerical check failed (or a numerical guard
aborted it).
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from typing import Callable, List, Optional

import numpy as np

from . import __version__
from .collision import (VelocityGrid, apply_K, collision_frequency, flux_measure, kw_bound_check,
                        sqrt_maxwellian, weight_w)
from .config import ScenarioConfig, load_config, parse_range
from .cycles import (DiffuseSampler, bounce_back_cycle, diffuse_cycle_sample, specular_cycle,
                     specular_jacobian_fd, stuck_fraction_sweep, zeta)
from .errors import CheckFailed, ConfigInvalid, KineticError
from .geometry import sample_interior
from .report import FORMATS, ReportBundle, emit_report, render
from .semigroup import (BCKind, coercivity_terms, conservation_check, decay_fit, diffuse_decay_bound,
                        duhamel_U, transport_G_batch)
from .trajectory import PhasePoint, exit_times

COMMANDS = ("trace", "cycles", "jacobian", "kernel-check", "stuck-mass", "decay", "solve", "coercivity")

EXIT_OK, EXIT_INVALID, EXIT_CHECK = 0, 2, 3

# CSV column schema of the rows of each subcommand
SCHEMAS = {
    "trace": ["i", "x1", "x2", "x3", "v1", "v2", "v3", "t_b", "xb1", "xb2", "xb3", "v_dot_n", "grazing"],
    "cycles": ["k", "t", "x1", "x2", "x3", "v1", "v2", "v3"],
    "jacobian": ["k", "eps0", "incidence", "det_fd", "zeta_pred", "det_pred", "rel_gap",
                 "cumulative_time", "time_flag", "condition"],
    "kernel-check": ["check", "theta", "phi", "value", "tolerance", "passed"],
    "stuck-mass": ["k", "fraction", "stderr"],
    "decay": ["t", "norm", "bound", "max_stderr", "remainder_bound"],
    "solve": ["t", "sup_norm", "l2_norm"],
    "coercivity": ["t", "P_nu_sq", "micro_nu_sq"],
}


# ---------------------------------------------------------------------------
# initial data profiles (functions of x (N, 3) and v (N, 3)); ``sup`` where known
# ---------------------------------------------------------------------------
def _x1_v1sq(x, v):
    return x[:, 0] * (v[:, 0] ** 2 - 1.0) * sqrt_maxwellian(v)


def _bump(x, v):
    return np.exp(-2.0 * np.sum(x * x, axis=1)) * (1.0 + v[:, 0]) * sqrt_maxwellian(v)


def _constant(x, v):
    return np.ones(len(x))


def _smooth(x, v):
    return np.cos(x[:, 0] + 0.5 * x[:, 2]) * np.exp(-0.1 * np.sum(v * v, axis=1))


PROFILES: dict[str, tuple[Callable, Optional[float]]] = {
    "x1_v1sq": (_x1_v1sq, None),
    "bump": (_bump, None),
    "constant": (_constant, 1.0),
    "smooth": (_smooth, 1.0),
}


def _profile(name: str, need_sup: bool = False) -> tuple[Callable, Optional[float]]:
    if name not in PROFILES:
        raise ConfigInvalid(f"unknown initial profile {name!r}; choose from {sorted(PROFILES)}")
    fn, sup = PROFILES[name]
    if need_sup and sup is None:
        raise ConfigInvalid(f"profile {name!r} has no known sup norm; use one of "
                            f"{sorted(k for k, (_, s) in PROFILES.items() if s is not None)}")
    return fn, sup


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------
def resolve_threads(arg: Optional[int]) -> int:
    if arg is None:
        env = os.environ.get("KC_THREADS")
        if env:
            try:
                arg = int(env)
            except ValueError as exc:
                raise ConfigInvalid(f"KC_THREADS must be an integer, got {env!r}") from exc
        else:
            arg = os.cpu_count() or 1
    if arg < 1:
        raise ConfigInvalid("threads must be >= 1")
    return arg


def _pmap(fn: Callable, items: list, threads: int) -> list:
    """Ordered map; results are assembled in input order whatever the thread count."""
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=min(threads, len(items))) as pool:
        return list(pool.map(fn, items))


def _vec(prefix: str, a) -> dict:
    return {f"{prefix}{i + 1}": float(a[i]) for i in range(3)}


def _nu0(kcfg, velocities: np.ndarray) -> float:
    """Minimum of nu over the origin and the given velocities."""
    pts = np.vstack([np.zeros((1, 3)), np.asarray(velocities, dtype=float).reshape(-1, 3)])
    return float(np.min(collision_frequency(kcfg, pts, check=False)))


def _phase_samples(cfg: ScenarioConfig, domain, count: int, stream: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(stream,)))
    x = sample_interior(domain, count, rng)
    v = rng.standard_normal((count, 3))
    return x, v


def _bc(cfg: ScenarioConfig):
    return cfg.bc.build(cfg.weights.build())


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------
def cmd_trace(cfg: ScenarioConfig, threads: int) -> ReportBundle:
    domain = cfg.domain.build()
    x, v = _phase_samples(cfg, domain, cfg.run.samples, 0)
    chunks = np.array_split(np.arange(len(x)), max(1, min(threads, len(x))))
    tb = np.concatenate(_pmap(lambda idx: exit_times(domain, x[idx], v[idx]), chunks, threads))
    xb = x - tb[:, None] * v
    dots = np.sum(v * domain.normal(xb), axis=1)
    grazing = np.abs(dots) < 1e-8 * np.linalg.norm(v, axis=1)
    b = ReportBundle("trace")
    for i in range(len(x)):
        b.rows.append({"i": i, **_vec("x", x[i]), **_vec("v", v[i]), "t_b": float(tb[i]),
                       **_vec("xb", xb[i]), "v_dot_n": float(dots[i]), "grazing": bool(grazing[i])})
    resid = float(np.max(np.abs(domain.xi(xb))))
    b.summary = {"samples": len(x), "max_boundary_residual": resid, "grazing_count": int(grazing.sum()),
                 "mean_t_b": float(np.mean(tb))}
    b.add_check("exit_points_on_boundary", resid <= 1e-8, f"max |xi(x_b)| = {resid:.3e}")
    b.add_check("exit_velocities_incoming", bool(np.all(dots <= 1e-12)), "v.n(x_b) <= 0")
    return b


def cmd_cycles(cfg: ScenarioConfig, threads: int) -> ReportBundle:
    domain = cfg.domain.build()
    run = cfg.run
    p = PhasePoint(run.x, run.v)
    kind = cfg.bc.kind
    b = ReportBundle("cycles")
    if kind == "inflow":
        tb = float(exit_times(domain, p.x[None], p.v[None])[0])
        nodes = [(run.t, p.x, p.v), (run.t - tb, p.x - tb * p.v, p.v)]
        termination = "exit"
    else:
        if kind == "diffuse":
            cyc = diffuse_cycle_sample(domain, run.t, p, 0.0, run.max_bounces, DiffuseSampler(cfg.seed))
        elif kind == "specular":
            cyc = specular_cycle(domain, run.t, p, 0.0, run.max_bounces)
        else:
            cyc = bounce_back_cycle(domain, run.t, p, 0.0, run.max_bounces)
        nodes = [(nd.t, nd.x, nd.v) for nd in cyc.nodes]
        termination = cyc.termination.value
    for k, (t, x, v) in enumerate(nodes):
        b.rows.append({"k": k, "t": float(t), **_vec("x", x), **_vec("v", v)})
    pos = np.array([n[1] for n in nodes[1:]])
    resid = float(np.max(np.abs(domain.xi(pos)))) if len(pos) else 0.0
    b.summary = {"bc": kind, "termination": termination, "nodes": len(nodes), "t": run.t,
                 "max_boundary_residual": resid}
    b.add_check("nodes_on_boundary", resid <= 1e-8, f"max |xi| = {resid:.3e}")
    times = np.array([n[0] for n in nodes])
    b.add_check("times_decreasing", bool(np.all(np.diff(times) < 0)))
    if kind in ("bounceback", "bounce_back", "specular"):
        speeds = np.array([np.linalg.norm(n[2]) for n in nodes])
        gap = float(np.max(np.abs(speeds - speeds[0])) / speeds[0])
        b.add_check("speed_preserved", gap <= 1e-12, f"relative gap {gap:.3e}")
    return b


def cmd_jacobian(cfg: ScenarioConfig, threads: int) -> ReportBundle:
    domain = cfg.domain.build()
    run = cfg.run
    x1 = domain.project_to_boundary(np.array([[1.0, 0.0, 0.0]]))[0]
    rep = specular_jacobian_fd(domain, x1, run.eps0, run.jacobian_k, incidence=run.incidence)
    b = ReportBundle("jacobian", rows=[rep.as_row()])
    b.summary = {"x1": x1.tolist(), "zeta": zeta(run.jacobian_k), "tolerance": run.jacobian_tol}
    b.add_check("zeta_even", zeta(run.jacobian_k) % 2 == 0)
    b.add_check("det_matches_prediction", rep.rel_gap <= run.jacobian_tol,
                f"rel_gap {rep.rel_gap:.3e} vs tolerance {run.jacobian_tol}")
    return b


def cmd_kernel_check(cfg: ScenarioConfig, threads: int) -> ReportBundle:
    kcfg = cfg.kernel.build()
    run = cfg.run
    b = ReportBundle("kernel-check")
    grid = VelocityGrid.uniform(6.0, run.kernel_grid)
    V = grid.nodes
    nu = collision_frequency(kcfg, V, check=False)
    phis = {"1": lambda u: np.ones(u.shape[:-1]), "v1": lambda u: u[..., 0], "v2": lambda u: u[..., 1],
            "v3": lambda u: u[..., 2], "|v|^2": lambda u: np.sum(u * u, axis=-1)}

    def null_gap(item):
        name, phi = item
        f = lambda u: phi(np.asarray(u)) * sqrt_maxwellian(u)  # noqa: E731
        ref = nu * f(V)
        return float(np.max(np.abs(apply_K(kcfg, None, f, V) - ref)) / np.max(np.abs(ref)))

    gaps = _pmap(null_gap, list(phis.items()), threads)
    for name, gap in zip(phis, gaps):
        b.rows.append({"check": "null_space", "theta": None, "phi": name, "value": gap, "tolerance": 1e-3,
                       "passed": gap <= 1e-3})
        b.add_check(f"null_space[{name}]", gap <= 1e-3, f"relative sup gap {gap:.3e}")

    from .collision import WeightParams
    speeds = np.linspace(0.0, 8.0, 17)

    def kw(theta):
        return kw_bound_check(WeightParams(cfg.weights.rho, cfg.weights.beta, theta, allow_boundary=True),
                              kcfg, speeds)

    thetas = [float(t) for t in run.thetas]
    for theta, rep in zip(thetas, _pmap(kw, thetas, threads)):
        gap = rep.get("refinement_gap")
        b.rows.append({"check": "kw_bound", "theta": theta, "phi": None, "value": rep["max_product"],
                       "tolerance": 0.02, "passed": bool(rep["ok"])})
        b.add_check(f"kw_bound[theta={theta}]", bool(rep["ok"]),
                    f"max product {rep['max_product']}, refinement gap {gap}")
    edge = kw(0.25)
    b.rows.append({"check": "kw_precheck_edge", "theta": 0.25, "phi": None,
                   "value": edge["precheck"]["discriminant"],
                   "tolerance": 0.0, "passed": not edge["precheck"]["negative_definite"]})
    b.add_check("kw_precheck_fails_at_quarter", not edge["precheck"]["negative_definite"])
    fm = flux_measure(cfg.weights.build(), np.array([0.0, 0.0, 1.0]))
    mass_gap = abs(fm["total_mass"] - 1.0)
    b.rows.append({"check": "flux_mass", "theta": cfg.weights.theta, "phi": None, "value": fm["total_mass"],
                   "tolerance": 1e-8, "passed": mass_gap <= 1e-8})
    b.add_check("flux_measure_mass", mass_gap <= 1e-8, f"|mass - 1| = {mass_gap:.3e}")
    b.summary = {"kernel": kcfg.describe(), "grid": {"V_max": 6.0, "n": run.kernel_grid},
                 "flux": fm, "kw_speeds": speeds.tolist()}
    return b


def cmd_stuck_mass(cfg: ScenarioConfig, threads: int) -> ReportBundle:
    domain = cfg.domain.build()
    run = cfg.run
    p = PhasePoint(run.stuck_x, run.stuck_v)
    sweep = stuck_fraction_sweep(domain, run.t, p, run.k, run.paths, DiffuseSampler(cfg.seed),
                                 threshold=run.stuck_threshold)
    b = ReportBundle("stuck-mass")
    for k, f, s in zip(sweep["k"], sweep["fraction"], sweep["stderr"]):
        b.rows.append({"k": k, "fraction": f, "stderr": s})
    fr, se = np.array(sweep["fraction"]), np.array(sweep["stderr"])
    rises = fr[1:] - fr[:-1] - 3.0 * np.sqrt(se[1:] ** 2 + se[:-1] ** 2)
    b.summary = {"k0": sweep["k0"], "threshold": run.stuck_threshold, "paths": run.paths, "t": run.t}
    b.add_check("monotone_within_3sigma", bool(np.all(rises <= 0.0)))
    b.add_check("drops_below_threshold", sweep["k0"] is not None,
                f"k0 = {sweep['k0']}" if sweep["k0"] is not None else f"no k <= {max(run.k)} below threshold")
    return b


def cmd_decay(cfg: ScenarioConfig, threads: int) -> ReportBundle:
    domain = cfg.domain.build()
    run = cfg.run
    kcfg = cfg.kernel.build()
    params = cfg.weights.build()
    bc = _bc(cfg)
    h0, h_sup = _profile(run.decay_initial, need_sup=True)
    diffuse = bc.kind is BCKind.DIFFUSE
    if diffuse:
        bc = replace(bc, h_bound=h_sup)
    x, v = _phase_samples(cfg, domain, run.samples, 1)
    nu0 = _nu0(kcfg, v)
    times = np.linspace(run.t_start, run.t_end, run.t_steps)
    sampler = DiffuseSampler(cfg.seed, stream_id=2) if diffuse else None
    results = _pmap(lambda t: transport_G_batch(domain, bc, kcfg, h0, float(t), x, v, sampler=sampler),
                    list(times), threads)
    b = ReportBundle("decay")
    norms = np.array([float(np.max(np.abs(r.value))) for r in results])
    if diffuse:
        vgrid = VelocityGrid.uniform(6.0, 12)
        c_bound = diffuse_decay_bound(params, kcfg, h0, vgrid, x, nu0)
        bounds = [c_bound * np.exp(-0.5 * nu0 * t) if t >= 1.0 else None for t in times]
    else:
        bounds = [h_sup * np.exp(-nu0 * t) for t in times]
    rem = []
    for t, r, n, bd in zip(times, results, norms, bounds):
        rb = float(np.max(r.remainder_bound)) if r.remainder_bound is not None else 0.0
        rem.append(rb)
        b.rows.append({"t": float(t), "norm": float(n), "bound": bd, "max_stderr": float(np.max(r.stderr)),
                       "remainder_bound": rb})
    for t, r, bd in zip(times, results, bounds):
        if bd is None:
            continue
        slack = 3.0 * np.max(r.stderr) + (np.max(r.remainder_bound) if r.remainder_bound is not None else 0.0)
        excess = float(np.max(np.abs(r.value)) - bd - slack)
        b.add_check(f"damping_bound[t={t:.6g}]", excess <= 1e-12 * max(1.0, bd), f"excess {excess:.3e}")
    t_min = max(0.25, run.t_start)
    try:
        fit = decay_fit(times, norms, t_min=t_min)
        lam, resid = fit.lambda_hat, fit.fit_residual
    except KineticError as exc:
        lam, resid = None, None
        b.add_check("decay_fit", False, str(exc))
    if lam is not None and not diffuse:
        b.add_check("rate_at_least_nu0", lam >= nu0 - run.rate_tol, f"lambda_hat {lam:.6g} vs nu0 {nu0:.6g}")
    b.summary = {"bc": bc.kind.value, "nu0": nu0, "times": times, "norms": norms, "lambda_hat": lam,
                 "residual": resid, "remainder_bounds": rem,
                 "quadrature_spec": {"kernel": kcfg.describe(), "samples": run.samples, "fit_t_min": t_min,
                                     "mc_paths": bc.mc_paths if diffuse else 0,
                                     "k_trunc": bc.k_trunc if diffuse else 0}}
    return b


def _desk_run(cfg: ScenarioConfig, t_end: float):
    domain = cfg.domain.build()
    kcfg = cfg.kernel.build()
    params = cfg.weights.build()
    bc = _bc(cfg)
    if bc.kind is BCKind.DIFFUSE:
        raise ConfigInvalid("the desk solver supports inflow, bounce-back and specular walls")
    f0, _ = _profile(cfg.run.initial)
    h0 = lambda x, v: weight_w(params, v) * f0(x, v)  # noqa: E731
    res = duhamel_U(domain, bc, kcfg, params, h0, t_end, cfg.run.picard_iters, method=cfg.run.method,
                    desk=cfg.run.desk())
    return domain, bc, kcfg, res


def cmd_solve(cfg: ScenarioConfig, threads: int) -> ReportBundle:
    domain, bc, kcfg, res = _desk_run(cfg, cfg.run.t_end)
    sup, l2 = res.sup_norms(), res.l2_norms()
    b = ReportBundle("solve")
    for t, s, n in zip(res.times, sup, l2):
        b.rows.append({"t": float(t), "sup_norm": float(s), "l2_norm": float(n)})
    fit = decay_fit(res.times, sup, t_min=0.25)
    b.summary = {"bc": bc.kind.value, "times": res.times, "norms": sup, "lambda_hat": fit.lambda_hat,
                 "residual": fit.fit_residual, "remainder_bounds": [],
                 "quadrature_spec": {"kernel": kcfg.describe(), **{k: v for k, v in res.quadrature.items()}},
                 "picard_differences": res.differences}
    if bc.kind in (BCKind.BOUNCE_BACK, BCKind.SPECULAR):
        cons = conservation_check(res.snapshots(), bc)
        b.summary["conservation"] = {k: v for k, v in cons.items() if k.endswith("_drift")}
    b.add_check("decay_rate_positive", fit.lambda_hat > 0, f"lambda_hat {fit.lambda_hat:.6g}")
    b.add_check("fit_residual_below_10pct", fit.fit_residual < 0.1, f"residual {fit.fit_residual:.3e}")
    return b


def cmd_coercivity(cfg: ScenarioConfig, threads: int) -> ReportBundle:
    domain, bc, kcfg, res = _desk_run(cfg, max(1.0, cfg.run.t))
    snap = res.snapshots(boundary=bc.kind is BCKind.INFLOW)
    terms = coercivity_terms(snap, bc)
    den = terms["micro_nu_sq"] + terms["boundary_sq"]
    ratio = terms["P_nu_sq"] / den if den > 0 else (0.0 if terms["P_nu_sq"] == 0 else float("inf"))
    b = ReportBundle("coercivity")
    for i, t in enumerate(terms["times"]):
        b.rows.append({"t": float(t), "P_nu_sq": float(terms["P_series"][i]),
                       "micro_nu_sq": float(terms["micro_series"][i])})
    b.summary = {"bc": bc.kind.value, "ratio": ratio,
                 **{k: v for k, v in terms.items() if k.endswith("_sq")},
                 "quadrature_spec": res.quadrature}
    b.add_check("ratio_finite", bool(np.isfinite(ratio)), f"M_hat = {ratio}")
    return b


DISPATCH = {"trace": cmd_trace, "cycles": cmd_cycles, "jacobian": cmd_jacobian,
            "kernel-check": cmd_kernel_check, "stuck-mass": cmd_stuck_mass, "decay": cmd_decay,
            "solve": cmd_solve, "coercivity": cmd_coercivity}


def run_scenario(config: ScenarioConfig | str | os.PathLike | None, command: str, *,
                 threads: Optional[int] = None) -> ReportBundle:
    """Run one subcommand and return its report (checks are recorded, not raised)."""
    if command not in DISPATCH:
        raise ConfigInvalid(f"unknown subcommand {command!r}")
    cfg = config if isinstance(config, ScenarioConfig) else load_config(config)
    bundle = DISPATCH[command](cfg, resolve_threads(threads))
    bundle.provenance = {"config_hash": cfg.config_hash(), "seed": cfg.seed, "version": __version__,
                         "command": command}
    return bundle


def raise_on_failure(bundle: ReportBundle) -> None:
    if bundle.failed_checks:
        c = bundle.failed_checks[0]
        raise CheckFailed(c["name"], c["detail"])


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------
def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="YAML or JSON scenario file")
    p.add_argument("--seed", type=int, default=None, help="root seed for all random streams")
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: $KC_THREADS or all cores)")
    p.add_argument("--out", default=None, help="directory for the report file (default: stdout only)")
    p.add_argument("--format", choices=FORMATS, default="json")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kinetic-bc", description="Kinetic boundary-value diagnostics")
    sub = parser.add_subparsers(dest="command", required=True)
    sp = {name: sub.add_parser(name) for name in COMMANDS}
    for p in sp.values():
        _common(p)
    for name in ("trace", "cycles", "jacobian", "stuck-mass", "decay", "solve", "coercivity"):
        sp[name].add_argument("--domain", choices=("ball", "ellipsoid"), default=None)
    for name in ("trace", "cycles", "decay", "solve", "coercivity"):
        sp[name].add_argument("--bc", choices=("inflow", "bounceback", "specular", "diffuse"), default=None)
    for name in ("trace", "decay"):
        sp[name].add_argument("--samples", type=int, default=None)
    sp["cycles"].add_argument("--t", type=float, default=None)
    sp["cycles"].add_argument("--x", type=float, nargs=3, default=None)
    sp["cycles"].add_argument("--v", type=float, nargs=3, default=None)
    sp["jacobian"].add_argument("--k", type=int, default=None)
    sp["jacobian"].add_argument("--eps0", type=float, default=None)
    sp["jacobian"].add_argument("--incidence", choices=("tangential", "normal"), default=None)
    sp["kernel-check"].add_argument("--gamma", type=float, default=None)
    sp["kernel-check"].add_argument("--grid", type=int, default=None)
    sp["stuck-mass"].add_argument("--k", default=None, help="range like 2..30 or list 2,5,10")
    sp["stuck-mass"].add_argument("--t", type=float, default=None)
    sp["stuck-mass"].add_argument("--paths", type=int, default=None)
    sp["decay"].add_argument("--t", default=None, help="time range like 0..2")
    sp["decay"].add_argument("--steps", type=int, default=None)
    sp["solve"].add_argument("--t", type=float, default=None, help="final time")
    sp["solve"].add_argument("--picard-iters", type=int, default=None)
    sp["solve"].add_argument("--method", choices=("picard", "march"), default=None)
    sp["coercivity"].add_argument("--t", type=float, default=None)
    return parser


def _apply_overrides(cfg: ScenarioConfig, args: argparse.Namespace) -> ScenarioConfig:
    g = lambda name: getattr(args, name, None)  # noqa: E731
    cfg = cfg.with_overrides("seed", seed=g("seed"))
    cfg = cfg.with_overrides("domain", kind=g("domain"))
    cfg = cfg.with_overrides("bc", kind=g("bc"))
    cfg = cfg.with_overrides("kernel", gamma=g("gamma"))
    run: dict = {"samples": g("samples"), "eps0": g("eps0"), "incidence": g("incidence"),
                 "paths": g("paths"), "kernel_grid": g("grid"), "picard_iters": g("picard_iters"),
                 "method": g("method"), "t_steps": g("steps")}
    if g("x") is not None:
        run["x"] = list(g("x"))
    if g("v") is not None:
        run["v"] = list(g("v"))
    cmd = args.command
    if cmd == "jacobian":
        run["jacobian_k"] = g("k")
    elif cmd == "stuck-mass" and g("k") is not None:
        run["k"] = parse_range(g("k"), integer=True)
    t = g("t")
    if t is not None:
        if cmd == "decay":
            rng = parse_range(t)
            if len(rng) != 2:
                raise ConfigInvalid("decay --t expects a range like 0..2")
            run["t_start"], run["t_end"] = rng
        elif cmd == "solve":
            run["t_end"] = t
        else:
            run["t"] = t
    return cfg.with_overrides("run", **run)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        bundle = run_scenario(cfg, args.command, threads=args.threads)
    except ConfigInvalid as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except KineticError as exc:
        print(f"numerical check failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CHECK
    path = emit_report(bundle, args.format, args.out)
    if path is None:
        sys.stdout.write(render(bundle, args.format))
    try:
        raise_on_failure(bundle)
    except CheckFailed as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
