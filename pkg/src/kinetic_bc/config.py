"""Scenario configuration: a nested YAML (or JSON) mapping, validated up front.

Example::

    domain: {kind: ellipsoid, semi_axes: [0.8, 0.8, 1.2]}
    bc: {kind: specular}
    weights: {rho: 1.0, beta: 0.0, theta: 0.2}
    kernel: {gamma: 0.0, normalize_nu: true}
    run: {t_start: 0.0, t_end: 2.0, t_steps: 9, samples: 1000}
    seed: 7

Unknown keys are rejected so that typos cannot silently fall back to
defaults.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .collision import KernelConfig, WeightParams
from .errors import ConfigInvalid, InvalidParameters
from .geometry import LevelSetDomain
from .semigroup import BCKind, BCSpec, DeskConfig

BC_NAMES = {"inflow": BCKind.INFLOW, "bounceback": BCKind.BOUNCE_BACK, "bounce_back": BCKind.BOUNCE_BACK,
            "specular": BCKind.SPECULAR, "diffuse": BCKind.DIFFUSE}


def _section(cls, data: Optional[dict], name: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigInvalid(f"section '{name}' must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigInvalid(f"unknown keys in '{name}': {', '.join(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(f"invalid '{name}' section: {exc}") from exc


@dataclass(frozen=True)
class DomainConfig:
    kind: str = "ball"
    radius: float = 1.0
    semi_axes: list = field(default_factory=lambda: [2.0, 1.0, 1.0])
    center: list = field(default_factory=lambda: [0.0, 0.0, 0.0])

    def __post_init__(self):
        if self.kind not in ("ball", "ellipsoid"):
            raise ConfigInvalid(f"domain kind must be 'ball' or 'ellipsoid', got {self.kind!r}")
        if self.kind == "ball" and not float(self.radius) > 0:
            raise ConfigInvalid("ball radius must be positive")
        if self.kind == "ellipsoid":
            if len(self.semi_axes) != 3 or min(self.semi_axes) <= 0:
                raise ConfigInvalid("ellipsoid needs three positive semi_axes")
        if len(self.center) != 3:
            raise ConfigInvalid("center must have three components")

    def build(self) -> LevelSetDomain:
        if self.kind == "ball":
            return LevelSetDomain.ball(float(self.radius), self.center)
        return LevelSetDomain.ellipsoid(self.semi_axes, self.center)


@dataclass(frozen=True)
class BCConfig:
    kind: str = "bounceback"
    inflow_value: float = 0.0
    k_trunc: int = 20
    mc_paths: int = 10_000
    remainder_cap: float = 0.05

    def __post_init__(self):
        if self.kind not in BC_NAMES:
            raise ConfigInvalid(f"bc kind must be one of {sorted(BC_NAMES)}, got {self.kind!r}")
        if self.k_trunc < 2 or self.mc_paths < 1:
            raise ConfigInvalid("diffuse k_trunc must be >= 2 and mc_paths >= 1")

    def build(self, params: WeightParams) -> BCSpec:
        kind = BC_NAMES[self.kind]
        if kind is BCKind.INFLOW:
            value = float(self.inflow_value)
            if value == 0.0:
                return BCSpec.inflow()
            return BCSpec.inflow(lambda t, x, v: np.full(len(x), value))
        if kind is BCKind.DIFFUSE:
            return BCSpec.diffuse(params, self.k_trunc, self.mc_paths, self.remainder_cap)
        return BCSpec(kind)


@dataclass(frozen=True)
class WeightConfig:
    rho: float = 1.0
    beta: float = 0.0
    theta: float = 0.2

    def __post_init__(self):
        if not self.rho > 0:
            raise ConfigInvalid(f"rho must be > 0, got {self.rho}")
        if not 0 <= self.theta < 0.25:
            raise ConfigInvalid(f"theta must satisfy 0 <= theta < 1/4, got {self.theta}")

    def build(self) -> WeightParams:
        try:
            return WeightParams(float(self.rho), float(self.beta), float(self.theta))
        except InvalidParameters as exc:
            raise ConfigInvalid(str(exc)) from exc


@dataclass(frozen=True)
class KernelSection:
    gamma: float = 0.0
    normalize_nu: bool = True
    U_max: float = 8.0
    u_radial: int = 16
    u_polar: int = 8
    u_azimuth: int = 8
    omega_polar: int = 4
    omega_azimuth: int = 8
    nu_nodes: int = 48

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigInvalid(f"gamma must lie in [0, 1], got {self.gamma}")

    def build(self) -> KernelConfig:
        kw = {k: v for k, v in asdict(self).items() if k != "normalize_nu"}
        cfg = KernelConfig(**kw)
        if self.normalize_nu:
            # scale the kernel so that nu(0) = 1
            from .collision import collision_frequency
            nu0 = float(collision_frequency(cfg, np.zeros(3), check=False))
            cfg = replace(cfg, q0_scale=cfg.q0_scale / nu0)
        return cfg


@dataclass(frozen=True)
class RunConfig:
    t: float = 1.0
    t_start: float = 0.0
    t_end: float = 2.0
    t_steps: int = 9
    samples: int = 1000
    paths: int = 10_000
    k: list = field(default_factory=lambda: list(range(2, 31)))
    stuck_threshold: float = 0.05
    stuck_x: list = field(default_factory=lambda: [0.9, 0.0, 0.0])
    stuck_v: list = field(default_factory=lambda: [-1.0, 0.0, 0.0])
    eps0: float = 1e-3
    jacobian_k: int = 2
    incidence: str = "tangential"
    jacobian_tol: float = 0.1
    picard_iters: int = 3
    method: str = "picard"
    initial: str = "x1_v1sq"
    decay_initial: str = "constant"
    rate_tol: float = 1e-6
    thetas: list = field(default_factory=lambda: [0.05, 0.1, 0.2, 0.24])
    kernel_grid: int = 12
    x: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    v: list = field(default_factory=lambda: [1.0, 0.3, 0.0])
    max_bounces: int = 50
    space: list = field(default_factory=lambda: [4, 4, 8])
    velocity_nodes: int = 4
    steps_per_unit: int = 8

    def __post_init__(self):
        if self.t_steps < 5:
            raise ConfigInvalid("t_steps must be at least 5 (decay fits need five samples)")
        if not self.t_end > self.t_start >= 0:
            raise ConfigInvalid("need 0 <= t_start < t_end")
        if self.samples < 1 or self.paths < 100:
            raise ConfigInvalid("samples must be >= 1 and paths >= 100")
        if self.picard_iters < 1:
            raise ConfigInvalid("picard_iters must be >= 1")
        if self.method not in ("picard", "march"):
            raise ConfigInvalid("method must be 'picard' or 'march'")
        if self.incidence not in ("tangential", "normal"):
            raise ConfigInvalid("incidence must be 'tangential' or 'normal'")
        if min(self.k) < 2:
            raise ConfigInvalid("stuck-mass k values must be >= 2")

    def desk(self) -> DeskConfig:
        try:
            return DeskConfig(tuple(int(s) for s in self.space), int(self.velocity_nodes),
                              steps_per_unit=int(self.steps_per_unit))
        except InvalidParameters as exc:
            raise ConfigInvalid(str(exc)) from exc


@dataclass(frozen=True)
class ScenarioConfig:
    domain: DomainConfig = DomainConfig()
    bc: BCConfig = BCConfig()
    weights: WeightConfig = WeightConfig()
    kernel: KernelSection = KernelSection()
    run: RunConfig = RunConfig()
    seed: int = 0

    @classmethod
    def from_mapping(cls, data: Optional[dict]) -> "ScenarioConfig":
        data = dict(data or {})
        top = {"domain", "bc", "weights", "kernel", "run", "seed"}
        unknown = sorted(set(data) - top)
        if unknown:
            raise ConfigInvalid(f"unknown top-level keys: {', '.join(unknown)}")
        seed = data.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigInvalid("seed must be a nonnegative integer")
        return cls(
            _section(DomainConfig, data.get("domain"), "domain"),
            _section(BCConfig, data.get("bc"), "bc"),
            _section(WeightConfig, data.get("weights"), "weights"),
            _section(KernelSection, data.get("kernel"), "kernel"),
            _section(RunConfig, data.get("run"), "run"),
            seed,
        )

    def to_mapping(self) -> dict:
        return asdict(self)

    def with_overrides(self, section: str, **values) -> "ScenarioConfig":
        """Copy with some fields of one section replaced (validated again)."""
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        if section == "seed":
            return self.from_mapping({**self.to_mapping(), "seed": values["seed"]})
        merged = self.to_mapping()
        merged[section] = {**merged[section], **values}
        return self.from_mapping(merged)

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_mapping(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()


def load_config(path: Optional[str | Path]) -> ScenarioConfig:
    """Read YAML or JSON (JSON is a subset of YAML, so one parser handles both)."""
    if path is None:
        return ScenarioConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigInvalid(f"cannot parse config {path}: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigInvalid("config root must be a mapping")
    return ScenarioConfig.from_mapping(data)


def parse_range(text: str, *, integer: bool = False, steps: Optional[int] = None) -> list:
    """``"2..30"`` -> ``[2, ..., 30]`` (integers) or ``"0..2"`` -> ``[0, 2]`` endpoints; plain numbers pass through."""
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            if integer:
                return list(range(int(lo), int(hi) + 1))
            return [float(lo), float(hi)]
        if "," in text:
            return [int(s) if integer else float(s) for s in text.split(",")]
        return [int(text) if integer else float(text)]
    except ValueError as exc:
        raise ConfigInvalid(f"cannot parse range {text!r}") from exc
