"""Flat ``key = value`` study configuration with strict key checking."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional

from .exceptions import ConfigError, ParameterError
from .monitoring import CalibrationConfig
from .simulation import DEFECT_KINDS, SHAPES, DefectSpec, NoiseSpec


@dataclass(frozen=True)
class StudyConfig:
    # nominal design
    shape: str = "sphere"
    n: int = 1500
    design_path: Optional[str] = None
    # noise
    tau_s: float = 0.001
    tau_c: float = 0.01
    n_min: int = 1492
    n_max: int = 1499
    # defect
    defect_kind: str = "none"
    region_fraction: float = 0.05
    spot_fraction: float = 0.01
    snr: float = 1.0
    color_shift: float = 0.0
    # features and solver
    k_eig: int = 51
    n_neighbors: int = 30
    epsilon_fraction: float = 1e-4
    # calibration
    m1: int = 200
    m2: int = 100
    m3: int = 500
    arl0: float = 100.0
    k_s: float = 0.05
    k_c: float = 0.05
    n_bootstrap: int = 1000
    max_run_length: int = 4000
    # study
    method: str = "smac"
    n_replications: int = 10
    stream_pool: int = 0
    runs_per_replication: int = 1000
    cross_references: bool = False
    # diagnosis
    eta: float = 1e-3
    alpha: float = 0.01
    n_permutations: int = 999
    tfce_neighbors: int = 10
    # files
    reference: Optional[str] = None
    stream: Optional[str] = None
    calibration: Optional[str] = None
    ic: Optional[str] = None
    oc: Optional[str] = None
    rng_seed: int = 0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ConfigError(f"shape must be one of {SHAPES}, got {self.shape!r}")
        if self.defect_kind not in ("none",) + DEFECT_KINDS:
            raise ConfigError(f"defect_kind must be 'none' or one of {DEFECT_KINDS}")
        if self.method not in ("smac", "gl"):
            raise ConfigError(f"method must be 'smac' or 'gl', got {self.method!r}")
        if self.k_eig < 2:
            raise ConfigError(f"k_eig must be at least 2, got {self.k_eig}")
        if self.n_neighbors < 6:
            raise ConfigError(f"n_neighbors must be at least 6, got {self.n_neighbors}")
        if self.n_replications < 0 or self.stream_pool < 0:
            raise ConfigError("n_replications and stream_pool must be nonnegative")
        try:
            self.calibration_config()
            self.noise_spec()
            self.defect_spec()
        except ParameterError as exc:
            raise ConfigError(str(exc)) from None

    def calibration_config(self) -> CalibrationConfig:
        return CalibrationConfig(self.m1, self.m2, self.m3, self.arl0, self.k_s, self.k_c,
                                 self.n_bootstrap, self.max_run_length, self.rng_seed)

    def noise_spec(self) -> NoiseSpec:
        return NoiseSpec(self.tau_s, self.tau_c, (self.n_min, self.n_max))

    def defect_spec(self) -> Optional[DefectSpec]:
        if self.defect_kind == "none":
            return None
        return DefectSpec(self.defect_kind, self.region_fraction, self.spot_fraction,
                          self.snr, self.color_shift)

    def to_text(self) -> str:
        lines = ["# resolved configuration"]
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                v = ""
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def updated(self, **changes) -> "StudyConfig":
        changes = {k: v for k, v in changes.items() if v is not None}
        unknown = set(changes) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        return replace(self, **changes)


def _convert(name, raw, default):
    kind = type(default) if default is not None else str
    if raw == "":
        return None
    try:
        if kind is bool:
            flag = raw.lower()
            if flag not in ("1", "true", "yes", "on", "0", "false", "no", "off"):
                raise ValueError(raw)
            return flag in ("1", "true", "yes", "on")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind.__name__}") from None
    return raw


def parse_config(text: str, source: str = "<config>") -> StudyConfig:
    known = {f.name: f.default for f in fields(StudyConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = _convert(key, raw, known[key])
    return StudyConfig(**values)


def load_config(path) -> StudyConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    return parse_config(path.read_text(encoding="utf-8"), str(path))
