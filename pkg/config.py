import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Union

from dotenv import load_dotenv

from services.cohort_service import CohortConfig
from services.consensus_service import DEFAULT_MAX_ROUNDS, SiteConfig
from services.lasso_service import DEFAULT_PATH_LEN
from services.svm_service import HyperGrid
from services.transport_service import DEFAULT_BARRIER_TIMEOUT, DEFAULT_PORT
from utils.errors import ConfigError, DataError
from utils.logger import get_logger

# Load environment variables from .env file
load_dotenv()

logger = get_logger(__name__)

MODES = ("simulate", "server", "site", "synth", "sweep")
# Sparsity levels of the reproducibility sweep
SWEEP_LEVELS = (0.13, 0.20, 0.23, 0.26, 0.30, 0.33, 0.36, 0.40, 0.43, 0.46)


class Config:
    """Environment-level settings shared by every mode."""

    LOG_LEVEL: str = os.getenv("MSWL_LOG", "INFO")
    LOG_FILE: Optional[str] = os.getenv("MSWL_LOG_FILE")

    HOST: str = os.getenv("MSWL_HOST", "127.0.0.1")
    PORT: int = int(os.getenv("MSWL_PORT") or DEFAULT_PORT)
    BARRIER_TIMEOUT: float = float(os.getenv("MSWL_BARRIER_TIMEOUT") or DEFAULT_BARRIER_TIMEOUT)

    OUTPUT_DIR: str = os.getenv("MSWL_OUTPUT_DIR", "results")

    @classmethod
    def log_configuration(cls):
        """Log the current configuration."""
        logger.info("Configuration loaded:")
        logger.info(f"  Log Level: {cls.LOG_LEVEL}")
        logger.info(f"  Log File: {cls.LOG_FILE or '<not set>'}")
        logger.info(f"  Endpoint: {cls.HOST}:{cls.PORT}")
        logger.info(f"  Barrier Timeout: {cls.BARRIER_TIMEOUT}s")
        logger.info(f"  Output Dir: {cls.OUTPUT_DIR}")

    @classmethod
    def get_transport_config(cls) -> dict:
        """Get transport endpoint configuration as a dictionary."""
        config = {
            "host": cls.HOST,
            "port": cls.PORT,
            "barrier_timeout": cls.BARRIER_TIMEOUT,
        }
        logger.debug(f"Transport config: {config}")
        return config


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment, as read from a JSON document with the same field names."""

    mode: str = "simulate"
    data: tuple[str, ...] = ()
    cohort: CohortConfig = field(default_factory=CohortConfig)
    sparsity_fraction: float = 0.16
    sweep: tuple[float, ...] = SWEEP_LEVELS
    svm_grid: HyperGrid = field(default_factory=HyperGrid.default)
    folds: int = 5
    fold_seed: int = 0
    max_rounds: int = DEFAULT_MAX_ROUNDS
    path_len: int = DEFAULT_PATH_LEN
    host: str = Config.HOST
    port: int = Config.PORT
    n_sites: Optional[int] = None
    barrier_timeout: float = Config.BARRIER_TIMEOUT
    output_dir: str = Config.OUTPUT_DIR
    workers: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {', '.join(MODES)}, got {self.mode!r}")
        object.__setattr__(self, "data", tuple(str(p) for p in self.data))
        object.__setattr__(self, "sweep", tuple(float(f) for f in self.sweep))
        for fraction in (self.sparsity_fraction,) + self.sweep:
            if not 0.0 < fraction < 1.0:
                raise ConfigError(f"sparsity fractions must lie in (0, 1), got {fraction}")
        if self.folds < 2:
            raise ConfigError(f"folds must be at least 2, got {self.folds}")
        if self.max_rounds < 1:
            raise ConfigError(f"max_rounds must be at least 1, got {self.max_rounds}")
        if self.path_len < 20:
            raise ConfigError(f"path_len must be at least 20, got {self.path_len}")
        if not 0 <= self.port < 65536:
            raise ConfigError(f"port must lie in [0, 65535], got {self.port}")
        if self.n_sites is not None and self.n_sites < 1:
            raise ConfigError(f"n_sites must be at least 1, got {self.n_sites}")
        if self.barrier_timeout <= 0:
            raise ConfigError(f"barrier_timeout must be positive, got {self.barrier_timeout}")
        if self.workers < 1:
            raise ConfigError(f"workers must be at least 1, got {self.workers}")

    @classmethod
    def from_dict(cls, raw: dict, **overrides) -> "ExperimentConfig":
        values = {**raw, **{k: v for k, v in overrides.items() if v is not None}}
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"Unknown configuration keys: {', '.join(unknown)}")
        try:
            if isinstance(values.get("cohort"), dict):
                values["cohort"] = CohortConfig(**values["cohort"])
            if isinstance(values.get("svm_grid"), dict):
                values["svm_grid"] = HyperGrid(**values["svm_grid"])
            if isinstance(values.get("data"), str):
                values["data"] = (values["data"],)
            return cls(**values)
        except ConfigError:
            raise
        except (TypeError, ValueError, DataError) as e:
            raise ConfigError(f"Invalid configuration: {e}") from e

    @classmethod
    def from_json(cls, path: Union[str, Path], **overrides) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"Cannot read config {path}: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"Config {path} must hold a JSON object")
        logger.debug(f"Loaded experiment config from {path}")
        return cls.from_dict(raw, **overrides)

    def site_config(self, sparsity_fraction: Optional[float] = None) -> SiteConfig:
        return SiteConfig(
            target_fraction=sparsity_fraction or self.sparsity_fraction,
            path_len=self.path_len,
            grid=self.svm_grid,
            k=self.folds,
            fold_seed=self.fold_seed,
        )
