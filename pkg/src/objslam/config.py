"""Run configuration: one YAML document with nested per-module sections.

Every field has a documented default and can be overridden either in the
file or from the command line as dotted `section.key=value` pairs. The only
settings read from the environment are the hosted-LLM credentials (see
priors.HTTPLLMClient); experiment manifests stay credential-free.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .association import AssociationConfig
from .geometry import CameraIntrinsics
from .optimizer import FactorPolicy, SolverConfig
from .priors import PriorConfig
from .simulator import SimConfig

MODES = ("batch", "incremental")


class ConfigError(ValueError):
    """Bad configuration file, key, or value."""


@dataclass(frozen=True)
class Paths:
    """Input/output locations; unset inputs disable the matching feature."""

    dataset: str | None = None
    priors_csv: str | None = None
    embeddings: str | None = None
    output_dir: str = "out"


@dataclass(frozen=True)
class CameraConfig:
    """Pinhole model used by the simulate command."""

    fx: float = 500.0
    fy: float = 500.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480

    def __post_init__(self) -> None:
        if min(self.fx, self.fy) <= 0.0 or min(self.width, self.height) <= 0:
            raise ValueError("camera focal lengths and image size must be positive")

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy)

    def image_size(self) -> tuple[int, int]:
        return (self.width, self.height)


@dataclass(frozen=True)
class SceneConfig:
    """Scene and orbit shape for the simulate command."""

    n_objects: int = 10
    n_frames: int = 30
    area: tuple[float, float] = (2.0, 1.2)
    surface_height: float = 0.0
    radius: float = 2.2
    height: float = 1.2
    arc: float = 5.2

    def __post_init__(self) -> None:
        if self.n_frames < 0:
            raise ValueError("frame count must be non-negative")
        object.__setattr__(self, "area", tuple(float(a) for a in self.area))
        if len(self.area) != 2 or min(self.area) <= 0.0:
            raise ValueError("area must be two positive extents")


@dataclass(frozen=True)
class NoiseConfig:
    """Factor noise scales assumed by the estimator (not the simulator)."""

    bbox_sigma_px: float = 10.0
    bbox_huber_multiplier: float = 2.0
    odom_sigma_rot: float = 0.01
    odom_sigma_trans: float = 0.01

    def __post_init__(self) -> None:
        if min(self.bbox_sigma_px, self.odom_sigma_rot, self.odom_sigma_trans) <= 0.0:
            raise ValueError("noise scales must be positive")
        if self.bbox_huber_multiplier <= 0.0:
            raise ValueError("huber multiplier must be positive")


@dataclass(frozen=True)
class Flags:
    """Prior-factor ablation switches; independent of each other."""

    size_prior: bool = True
    orientation_prior: bool = True
    centroid_factor: bool = True


@dataclass(frozen=True)
class RunConfig:
    paths: Paths = field(default_factory=Paths)
    mode: str = "incremental"
    match_threshold: float = 0.5
    flags: Flags = field(default_factory=Flags)
    prior: PriorConfig = field(default_factory=PriorConfig)
    association: AssociationConfig = field(default_factory=AssociationConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.match_threshold <= 0.0:
            raise ValueError("match threshold must be positive")

    def factor_policy(self, image_size: tuple[int, int] | None = None) -> FactorPolicy:
        return FactorPolicy(
            bbox_sigma_px=self.noise.bbox_sigma_px,
            bbox_huber_multiplier=self.noise.bbox_huber_multiplier,
            odom_sigma_rot=self.noise.odom_sigma_rot,
            odom_sigma_trans=self.noise.odom_sigma_trans,
            prior_config=self.prior,
            enable_size_prior=self.flags.size_prior,
            enable_orientation_prior=self.flags.orientation_prior,
            enable_centroid_factor=self.flags.centroid_factor,
            image_size=(float(image_size[0]), float(image_size[1]))
            if image_size is not None
            else None,
        )


_SECTIONS = {
    "paths": Paths,
    "flags": Flags,
    "prior": PriorConfig,
    "association": AssociationConfig,
    "solver": SolverConfig,
    "noise": NoiseConfig,
    "sim": SimConfig,
    "scene": SceneConfig,
    "camera": CameraConfig,
}
_SCALARS = ("mode", "match_threshold")


def _build_section(cls, data: dict, section: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{section}] section: {exc}") from exc


def build_run_config(document: dict | None) -> RunConfig:
    """Construct a validated RunConfig from a parsed YAML document."""
    document = dict(document or {})
    kwargs = {}
    for section, cls in _SECTIONS.items():
        data = document.pop(section, {})
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError(f"section [{section}] must be a mapping")
        kwargs[section] = _build_section(cls, data, section)
    for key in _SCALARS:
        if key in document:
            kwargs[key] = document.pop(key)
    if document:
        raise ConfigError(f"unknown top-level key(s): {sorted(document)}")
    try:
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def apply_overrides(document: dict, overrides: list[str]) -> dict:
    """Apply command-line `dotted.key=value` pairs onto a YAML document.

    Values parse as YAML scalars, so `solver.max_iterations=50` yields an
    int and `flags.size_prior=false` a bool.
    """
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, raw = item.split("=", 1)
        keys = dotted.strip().split(".")
        if not all(keys):
            raise ConfigError(f"override {item!r} has an empty key component")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"override {item!r} value does not parse: {exc}") from exc
        node = document
        for key in keys[:-1]:
            child = node.setdefault(key, {})
            if not isinstance(child, dict):
                raise ConfigError(f"override {item!r} descends into non-mapping {key!r}")
            node = child
        node[keys[-1]] = value
    return document


def load_run_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Load, override, and validate a run configuration.

    With no path, starts from all defaults.
    """
    document: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            loaded = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {path} must be a mapping at top level")
        document = loaded
    if overrides:
        document = apply_overrides(document, list(overrides))
    return build_run_config(document)


def config_document(cfg: RunConfig) -> dict:
    """The config as a plain nested dict (round-trips through build_run_config)."""
    doc = dataclasses.asdict(cfg)
    doc["scene"]["area"] = list(doc["scene"]["area"])
    return doc


def write_config_yaml(cfg: RunConfig, path: str | Path) -> None:
    """Persist the effective configuration as a reproducible manifest."""
    Path(path).write_text(yaml.safe_dump(config_document(cfg), sort_keys=True))
