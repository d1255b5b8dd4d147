"""Simulation configuration: typed parameter blocks and the key-value text format.

The on-disk format is plain ``section.key = value`` lines (``#`` starts a
comment).  The exact text is embedded verbatim into dataset files so every
dataset carries the parameters that produced it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields


class ConfigError(ValueError):
    """Raised for unparseable or invalid configuration input."""


@dataclass(frozen=True)
class FingerConfig:
    """Passive finger: a chain of identical spring-loaded links.

    Joint axes alternate between flexion/extension (even joints) and
    adduction/abduction (odd joints) from base to tip.  ``mount_pitch``
    tilts the rest direction away from straight-down toward radial;
    the production value is 0 (finger hangs from the arm tip).
    """

    n_joints: int = 20
    link_length: float = 0.025     # m
    link_radius: float = 0.008     # m, collision + rendering capsule radius
    link_mass: float = 0.01        # kg
    spring_k: float = 0.05         # N*m/rad, identical per joint
    joint_damping: float = 0.04    # N*m*s/rad
    mount_pitch: float = 0.0       # rad, 0 = hanging straight down

    def __post_init__(self) -> None:
        if self.n_joints < 1:
            raise ConfigError(f"n_joints must be >= 1, got {self.n_joints}")
        if self.spring_k <= 0 or self.link_mass <= 0:
            raise ConfigError("spring_k and link_mass must be positive")
        if self.link_length <= 0 or self.link_radius <= 0:
            raise ConfigError("link geometry must be positive")
        if self.joint_damping < 0:
            raise ConfigError("joint_damping must be >= 0")

    def axis_pattern(self) -> list[str]:
        """Per-joint axis tags, strictly alternating, FE first."""
        return ["FE" if i % 2 == 0 else "AA" for i in range(self.n_joints)]


@dataclass(frozen=True)
class ContactParams:
    """Penalty contact: one-sided spring-damper plus clamped Coulomb friction."""

    penalty_stiffness: float = 1200.0   # N/m
    penalty_damping: float = 1.5        # N*s/m
    friction_mu: float = 0.5
    friction_vel_eps: float = 0.01      # m/s, sliding-speed regularization

    def __post_init__(self) -> None:
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"{f.name} must be >= 0")


@dataclass(frozen=True)
class ArmGeometry:
    """Cylindrical arm: rotary base, vertical prismatic, radial prismatic."""

    column_height: float = 1.3   # m, boom height at q2 = 0
    base_offset: float = 0.1     # m, boom tip radius at q3 = 0
    column_radius: float = 0.06  # m, rendering only
    boom_radius: float = 0.05    # m, rendering only


@dataclass(frozen=True)
class BoxSpawnParams:
    """Cluttered-scenario boxes, spawned in the annulus swept by the arm."""

    count: int = 3
    half_extent_min: float = 0.05   # m, per axis
    half_extent_max: float = 0.10   # m
    density: float = 100.0          # kg/m^3
    ground_friction_mu: float = 0.2
    spawn_radius_min: float = 0.35  # m
    spawn_radius_max: float = 1.35  # m
    spawn_angle_min: float = 3 * math.pi / 4
    spawn_angle_max: float = 5 * math.pi / 4
    min_separation: float = 0.35    # m, between box centers


@dataclass(frozen=True)
class CameraParams:
    """Fixed exocentric camera overseeing the whole arm workspace."""

    position: tuple[float, float, float] = (1.6, 0.0, 1.9)
    look_at: tuple[float, float, float] = (-0.7, 0.0, 0.25)
    vertical_fov_deg: float = 55.0

    def __post_init__(self) -> None:
        if tuple(self.position) == tuple(self.look_at):
            raise ConfigError("camera position must differ from look_at")
        if not 0 < self.vertical_fov_deg < 180:
            raise ConfigError("vertical_fov_deg must be in (0, 180)")


@dataclass(frozen=True)
class SimConfig:
    """Everything the simulator, renderer, and episode runner need."""

    finger: FingerConfig = field(default_factory=FingerConfig)
    contact: ContactParams = field(default_factory=ContactParams)
    arm: ArmGeometry = field(default_factory=ArmGeometry)
    boxes: BoxSpawnParams = field(default_factory=BoxSpawnParams)
    camera: CameraParams = field(default_factory=CameraParams)
    gravity: float = 9.81                 # m/s^2, directed -z
    quasi_static_max_velocity: float = 6.0  # rad/s bound at 10 Hz sample instants
    max_joint_step: float = 0.6           # rad bound on |dq| between samples


_SECTIONS = {
    "finger": FingerConfig,
    "contact": ContactParams,
    "arm": ArmGeometry,
    "boxes": BoxSpawnParams,
    "camera": CameraParams,
}
_SCALARS = ("gravity", "quasi_static_max_velocity", "max_joint_step")


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(cfg: SimConfig) -> str:
    """Render a SimConfig as canonical key-value text (stable ordering)."""
    lines = ["# softsense simulation configuration"]
    for name in _SCALARS:
        lines.append(f"{name} = {_format_value(getattr(cfg, name))}")
    for section, cls in _SECTIONS.items():
        lines.append("")
        block = getattr(cfg, section)
        for f in fields(cls):
            lines.append(f"{section}.{f.name} = {_format_value(getattr(block, f.name))}")
    return "\n".join(lines) + "\n"


def _parse_scalar(text: str, kind):
    text = text.strip()
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    if kind is tuple:
        return tuple(float(p) for p in text.split(","))
    raise ConfigError(f"unsupported value type {kind}")


def parse_config(text: str) -> SimConfig:
    """Parse key-value text into a SimConfig, validating every key."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = value.strip()

    scalars = {}
    for name in _SCALARS:
        if name in raw:
            scalars[name] = float(raw.pop(name))

    sections = {}
    for section, cls in _SECTIONS.items():
        kwargs = {}
        for f in fields(cls):
            key = f"{section}.{f.name}"
            if key in raw:
                kind = tuple if f.name in ("position", "look_at") else (
                    int if f.type == "int" else float)
                kwargs[f.name] = _parse_scalar(raw.pop(key), kind)
        sections[section] = cls(**kwargs)

    if raw:
        raise ConfigError(f"unknown config keys: {sorted(raw)}")
    return SimConfig(**sections, **scalars)


def default_config() -> SimConfig:
    return SimConfig()


DEFAULT_CONFIG_TEXT = dump_config(default_config())
