import dataclasses
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from .errors import ParseError, ValidationError

LOG_ENV_VAR = "MOUND_LOG"
LOG_LEVELS = {
    "error": logging.ERROR,
    "warn": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}
MODEL_KINDS = ("linear", "svr", "lasso", "mlp")


def _default_lambdas() -> Tuple[float, ...]:
    # 13 log-spaced points over 1e-4 .. 1e1
    return tuple(float(10.0 ** (-4 + 5 * k / 12)) for k in range(13))


@dataclass(frozen=True)
class PipelineConfig:
    """
    Every tunable of the counting pipeline, with its built-in default.
    """
    patch_size: int = 608
    include_partial: bool = True
    score_threshold: float = 0.5
    seed: int = 0
    jobs: Optional[int] = None
    models: Tuple[str, ...] = MODEL_KINDS
    selection_folds: int = 5

    lasso_lambdas: Tuple[float, ...] = field(default_factory=_default_lambdas)
    lasso_folds: int = 5

    svr_C: float = 10.0
    svr_epsilon: float = 0.5
    # rbf predictions fall back to the mean outside the training block's density range
    svr_kernel: str = "linear"
    svr_gamma: float = 0.25
    svr_tune: bool = True
    svr_C_factors: Tuple[float, ...] = (0.1, 1.0, 10.0)
    svr_epsilons: Tuple[float, ...] = (0.1, 0.5, 1.0)

    mlp_hidden_sizes: Tuple[int, ...] = (16, 8)
    mlp_learning_rate: float = 0.01
    mlp_epochs: int = 5000

    blob_channel: int = 0
    blob_threshold: int = 150
    blob_min_area: int = 4
    blob_max_area: int = 100000
    blob_connectivity: int = 8

    def __post_init__(self):
        if self.patch_size < 1:
            raise ValidationError(f"patch_size must be >= 1, got {self.patch_size}")
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ValidationError(f"score_threshold must be in [0, 1], got {self.score_threshold}")
        if self.jobs is not None and self.jobs < 1:
            raise ValidationError(f"jobs must be >= 1, got {self.jobs}")
        unknown = [m for m in self.models if not isinstance(m, str) or m not in MODEL_KINDS]
        if unknown or not self.models:
            got = ', '.join(map(str, self.models)) or 'nothing'
            raise ValidationError(f"models must be a non-empty subset of {', '.join(MODEL_KINDS)}; got {got}")
        if self.selection_folds < 2:
            raise ValidationError(f"selection_folds must be >= 2, got {self.selection_folds}")
        _check_numbers("lasso_lambdas", self.lasso_lambdas, positive=False)
        _check_numbers("svr_C_factors", self.svr_C_factors, positive=True)
        _check_numbers("svr_epsilons", self.svr_epsilons, positive=False)
        for size in self.mlp_hidden_sizes:
            if isinstance(size, bool) or not isinstance(size, int) or size < 1:
                raise ValidationError(f"mlp_hidden_sizes must hold positive integers, got {size!r}")
        if self.svr_gamma <= 0:
            raise ValidationError(f"svr_gamma must be > 0, got {self.svr_gamma}")
        if self.mlp_learning_rate <= 0:
            raise ValidationError(f"mlp_learning_rate must be > 0, got {self.mlp_learning_rate}")
        if self.mlp_epochs < 0:
            raise ValidationError(f"mlp_epochs must be >= 0, got {self.mlp_epochs}")
        if self.svr_kernel not in ("rbf", "linear"):
            raise ValidationError(f"svr_kernel must be 'rbf' or 'linear', got {self.svr_kernel!r}")
        if self.svr_C <= 0:
            raise ValidationError(f"svr_C must be > 0, got {self.svr_C}")
        if self.svr_epsilon < 0:
            raise ValidationError(f"svr_epsilon must be >= 0, got {self.svr_epsilon}")
        if self.lasso_folds < 2:
            raise ValidationError(f"lasso_folds must be >= 2, got {self.lasso_folds}")
        if self.blob_connectivity not in (4, 8):
            raise ValidationError(f"blob_connectivity must be 4 or 8, got {self.blob_connectivity}")

    def to_dict(self) -> dict:
        data = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in data.items()}

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)


def _check_numbers(name: str, values: Tuple, positive: bool):
    if not values:
        raise ValidationError(f"{name} must not be empty")
    for value in values:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ValidationError(f"{name} must hold finite numbers, got {value!r}")
        if value < 0 or (positive and value == 0):
            raise ValidationError(f"{name} must hold values {'>' if positive else '>='} 0, got {value}")


def _coerce(name: str, value: Any, default: Any) -> Any:
    """Check a config-file value against the type of its default."""
    if value is None:
        if default is None:
            return None
        raise ValidationError(f"config key '{name}' must not be null")
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValidationError(f"config key '{name}' must be a boolean")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ValidationError(f"config key '{name}' must be a list")
        return tuple(value)
    # the only Optional field (jobs) is an integer
    if default is None or isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValidationError(f"config key '{name}' must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"config key '{name}' must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ValidationError(f"config key '{name}' must be a string")
        return value
    return value


class Config:
    """
    Loads a JSON configuration file and merges it with CLI overrides.

    Precedence is CLI flag > config file > built-in default.
    """
    def __init__(self, config_path: str = None):
        self.config_path = Path(config_path).expanduser() if config_path else None
        self.data = self._load()

    def _load(self) -> dict:
        if self.config_path is None:
            return {}
        if not self.config_path.exists():
            raise ValidationError(f"config file not found: {self.config_path}")
        try:
            with open(self.config_path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ParseError(e.msg, source=str(self.config_path), line=e.lineno) from e
        except UnicodeDecodeError as e:
            raise ParseError(f"not UTF-8 text: {e.reason}", source=str(self.config_path)) from e
        if not isinstance(data, dict):
            raise ValidationError(f"config file {self.config_path} must contain a JSON object")

        known = {f.name for f in fields(PipelineConfig)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValidationError(f"unknown config keys in {self.config_path}: {', '.join(unknown)}")

        defaults = PipelineConfig()
        data = {
            name: _coerce(name, value, getattr(defaults, name))
            for name, value in data.items()
        }
        PipelineConfig(**data)
        return data

    def resolve(self, **overrides) -> PipelineConfig:
        """Build the effective PipelineConfig; overrides that are None are ignored."""
        merged = dict(self.data)
        merged.update({k: v for k, v in overrides.items() if v is not None})
        return PipelineConfig(**merged)


def derive_seed(base_seed: int, name: str) -> int:
    """Derive a 31-bit sub-seed for a named component from the base seed."""
    digest = hashlib.sha256(f"{base_seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") & 0x7FFFFFFF


def log_level_from_env(environ: Dict[str, str] = None) -> int:
    """Read MOUND_LOG and map it to a logging level (default: warn)."""
    environ = os.environ if environ is None else environ
    value = environ.get(LOG_ENV_VAR, "warn").strip().lower()
    if value not in LOG_LEVELS:
        raise ValidationError(
            f"{LOG_ENV_VAR} must be one of {', '.join(LOG_LEVELS)}, got {value!r}")
    return LOG_LEVELS[value]


def configure_logging(level: int = None) -> logging.Logger:
    """Send package logs to stderr, replacing any handler installed earlier."""
    if level is None:
        level = log_level_from_env()
    logger = logging.getLogger("mound_counter")
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logger.addHandler(handler)
    logger.setLevel(level)
    logger.propagate = False
    return logger
