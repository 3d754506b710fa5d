"""
Run configuration: typed sections, TOML/JSON loading, validation and presets.

A configuration has the sections [model], [discretization], [filter],
[study], [output] plus top-level `seed` and `name`. Unknown keys are errors.
"""

import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Union, get_args, get_origin, get_type_hints

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError

logger = logging.getLogger(__name__)

# Process-level settings
OUTPUT_ROOT = os.getenv("LOWRANK_KBP_OUTPUT", "runs")
DEFAULT_THREADS = int(os.getenv("LOWRANK_KBP_THREADS", "1"))
LOG_LEVEL = os.getenv("LOWRANK_KBP_LOG_LEVEL", "INFO")

SCHEMA_VERSION = 1
PRESET_DIR = Path(__file__).resolve().parent / "presets"

MODEL_KINDS = ("advection", "fem", "custom")
FILTER_KINDS = ("kbp", "dlr-kbp", "enkf", "dlr-enkf")
STUDY_KINDS = ("single", "rank-sweep", "sigma-sweep", "poc", "ensemble-rmse", "consistency")
INTEGRATORS = ("em", "bug")
OBSERVATIONS = ("full", "partial")


# ============================================================================
# DATA MODELS
# ============================================================================

@dataclass
class ModelConfig:
    builtin: str = "advection"
    # advection
    d: int = 100
    length: float = 10.0
    decay: float = 0.1
    forcing: float = 0.03
    gamma: float = 2.0
    # shared
    sigma: float = 1e-3
    true_rank: int = 25
    # fem
    nodes: int = 21
    diffusion: float = 0.1
    velocity: List[float] = field(default_factory=lambda: [1.0, 0.0])
    observation: str = "full"
    squares: Optional[List[List[float]]] = None    # [x1_min, x1_max, x2_min, x2_max] per square
    # custom
    matrices: Optional[str] = None                 # .npz with A, f, Sigma, H, Gamma[, mass], U0, U, MY


@dataclass
class DiscretizationConfig:
    dt: float = 1e-4
    T: float = 1.0

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))


@dataclass
class FilterConfig:
    kind: str = "dlr-kbp"
    rank: int = 15
    particles: int = 50
    small_particles: int = 10      # the small-ensemble EnKF of the ensemble-rmse study
    integrator: str = "em"


@dataclass
class StudyConfig:
    kind: str = "single"
    grid: List[float] = field(default_factory=list)
    replicates: int = 1


@dataclass
class OutputConfig:
    directory: Optional[str] = None
    stride: int = 100              # rows kept in the per-replicate mean CSVs
    dump_modes: bool = False
    snapshot_stride: int = 1000
    w2: bool = True


@dataclass
class RunConfig:
    name: str = "run"
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    discretization: DiscretizationConfig = field(default_factory=DiscretizationConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    study: StudyConfig = field(default_factory=StudyConfig)
    output: OutputConfig = field(default_factory=OutputConfig)


# ============================================================================
# PARSING
# ============================================================================

def _coerce(value: Any, hint: Any, path: str) -> Any:
    """Checks `value` against the field annotation, recursing into Optional and List."""
    origin = get_origin(hint)
    if origin is Union:
        if value is None:
            return None
        inner = [arg for arg in get_args(hint) if arg is not type(None)]
        return _coerce(value, inner[0], path)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
        (item,) = get_args(hint)
        return [_coerce(v, item, f"{path}[{i}]") for i, v in enumerate(value)]
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if hint is str and not isinstance(value, str):
        raise ConfigError(path, f"expected a string, got {value!r}")
    return value


def _fill(instance: Any, data: Dict[str, Any], prefix: str) -> Any:
    known = {f.name: f for f in fields(instance)}
    hints = get_type_hints(type(instance))
    for key, value in data.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in known:
            raise ConfigError(path, "unknown key")
        current = getattr(instance, key)
        if is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(path, "expected a table")
            _fill(current, value, path)
        else:
            setattr(instance, key, _coerce(value, hints[key], path))
    return instance


def config_from_dict(data: Dict[str, Any]) -> RunConfig:
    data = dict(data)
    data.pop("schema_version", None)
    return _fill(RunConfig(), data, "")


def load_config(path: Union[str, Path]) -> RunConfig:
    """Reads a TOML preset/config or a config.json snapshot of a previous run."""
    path = resolve_config_path(path)
    try:
        if path.suffix == ".json":
            data = json.loads(path.read_text(encoding="utf-8"))
        else:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
    except (OSError, ValueError) as e:
        raise ConfigError(str(path), f"cannot parse: {e}") from e
    config = config_from_dict(data)
    logger.debug(f"Loaded config '{config.name}' from {path}")
    return config


def resolve_config_path(name_or_path: Union[str, Path]) -> Path:
    path = Path(name_or_path)
    if path.exists():
        return path
    preset = PRESET_DIR / f"{path.stem}.toml"
    if preset.exists():
        return preset
    raise ConfigError(str(name_or_path), "no such file or preset")


def list_presets() -> List[str]:
    return sorted(p.stem for p in PRESET_DIR.glob("*.toml"))


# ============================================================================
# VALIDATION
# ============================================================================

def _choice(value: str, allowed, path: str) -> None:
    if value not in allowed:
        raise ConfigError(path, f"'{value}' is not one of {', '.join(allowed)}")


def _positive(value: float, path: str) -> None:
    if not value > 0:
        raise ConfigError(path, f"must be positive, got {value}")


def validate_config(config: RunConfig) -> List[str]:
    """Raises ConfigError on invalid values; returns (and logs) non-fatal warnings."""
    m, disc, flt, study = config.model, config.discretization, config.filter, config.study
    _choice(m.builtin, MODEL_KINDS, "model.builtin")
    _choice(flt.kind, FILTER_KINDS, "filter.kind")
    _choice(flt.integrator, INTEGRATORS, "filter.integrator")
    _choice(study.kind, STUDY_KINDS, "study.kind")
    _choice(m.observation, OBSERVATIONS, "model.observation")
    _positive(disc.dt, "discretization.dt")
    _positive(disc.T, "discretization.T")
    if flt.rank < 1:
        raise ConfigError("filter.rank", f"must be >= 1, got {flt.rank}")
    if study.replicates < 1:
        raise ConfigError("study.replicates", f"must be >= 1, got {study.replicates}")
    if m.sigma < 0:
        raise ConfigError("model.sigma", f"must be non-negative, got {m.sigma}")
    if m.builtin == "custom" and not m.matrices:
        raise ConfigError("model.matrices", "custom models need an .npz file")
    if m.builtin == "advection":
        _positive(m.gamma, "model.gamma")
        if m.d < 2:
            raise ConfigError("model.d", f"must be >= 2, got {m.d}")
    if m.builtin == "fem":
        _positive(m.gamma, "model.gamma")
        if m.nodes < 3:
            raise ConfigError("model.nodes", f"must be >= 3, got {m.nodes}")
        if len(m.velocity) != 2:
            raise ConfigError("model.velocity", "must have two components")
        if m.squares is not None and any(len(s) != 4 for s in m.squares):
            raise ConfigError("model.squares", "each square is [x1_min, x1_max, x2_min, x2_max]")
        if study.kind in ("rank-sweep", "sigma-sweep", "poc"):
            raise ConfigError("study.kind", f"'{study.kind}' runs on the advection model only")
    if m.builtin != "fem" and study.kind in ("ensemble-rmse", "consistency"):
        raise ConfigError("study.kind", f"'{study.kind}' needs the fem model")

    ensemble_study = study.kind in ("poc", "ensemble-rmse", "consistency")
    if flt.kind in ("enkf", "dlr-enkf") or ensemble_study:
        if flt.particles < 2:
            raise ConfigError("filter.particles", f"ensemble filters need P >= 2, got {flt.particles}")
    if study.kind == "ensemble-rmse" and flt.small_particles < 2:
        raise ConfigError("filter.small_particles", f"must be >= 2, got {flt.small_particles}")

    if study.kind in ("rank-sweep", "sigma-sweep", "poc", "consistency") and not study.grid:
        raise ConfigError("study.grid", f"'{study.kind}' needs a non-empty grid")
    if study.kind == "poc":
        if any(p < 2 or p != int(p) for p in study.grid):
            raise ConfigError("study.grid", "particle counts must be integers >= 2")
    if study.kind in ("rank-sweep", "consistency"):
        if any(r < 1 or r != int(r) for r in study.grid):
            raise ConfigError("study.grid", "ranks must be integers >= 1")
    if study.kind == "sigma-sweep" and any(s < 0 for s in study.grid):
        raise ConfigError("study.grid", "noise levels must be non-negative")

    warnings = []
    particle_counts = [int(p) for p in study.grid] if study.kind == "poc" else [flt.particles]
    rank = m.true_rank if study.kind == "poc" else flt.rank
    uses_ensemble = flt.kind == "dlr-enkf" or study.kind in ("poc", "ensemble-rmse", "consistency")
    for P in particle_counts:
        if uses_ensemble and P <= 4 * rank - 1:
            warnings.append(f"P={P} <= 4R-1={4 * rank - 1}: below the particle count the theory requires")
    for message in warnings:
        logger.warning(message)
    return warnings


# ============================================================================
# SNAPSHOT
# ============================================================================

def config_to_dict(config: RunConfig) -> Dict[str, Any]:
    out = asdict(config)
    out["schema_version"] = SCHEMA_VERSION
    return out


def config_hash(config: RunConfig) -> str:
    payload = json.dumps(config_to_dict(config), sort_keys=True).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()


def write_config_snapshot(config: RunConfig, path: Union[str, Path]) -> str:
    path = Path(path)
    path.write_text(json.dumps(config_to_dict(config), indent=2, sort_keys=True), encoding="utf-8")
    return config_hash(config)
