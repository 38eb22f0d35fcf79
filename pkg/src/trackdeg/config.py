"""Pipeline configuration loaded from a TOML file.

Example::

    seed = 7

    [paths]
    raw = ["data/raw_2020.csv"]
    out = "out"

    [segmentation]
    segment_length = 100.0
    statistic = "max_abs"
    channels = ["top_l", "top_r", "align_l", "align_r"]

    [identification]
    min_drop = 0.5

    [fit]
    n_chains = 4

    [fit.hyperprior]
    b_mu = 10.0

    [thresholds]
    label = "M1"
    limits = 12.0

Relative paths are resolved against the directory of the config file. The
``TRACKDEG_OUT`` environment variable replaces ``paths.out``; command-line
flags override both.
"""

from __future__ import annotations

import logging
import os
import sys
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - Python 3.10 backport
    import tomli as tomllib

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from trackdeg.errors import ConfigError
from trackdeg.ingest import SegmentationConfig
from trackdeg.maintenance import IdentificationConfig
from trackdeg.mcmc import FitConfig
from trackdeg.predict import PredictConfig, Thresholds
from trackdeg.synthgen import ScenarioSpec

logger = logging.getLogger(__name__)

OUT_ENV = "TRACKDEG_OUT"


class PathsConfig(BaseModel):
    """Input and output locations."""

    model_config = ConfigDict(extra="forbid")

    raw: list[Path] = Field(default_factory=list)
    series: Path | None = None
    posterior: Path | None = None
    univariate_posterior: Path | None = None
    work_orders: Path | None = None
    scenario: Path | None = None
    out: Path = Path("out")

    def resolved(self, base: Path) -> PathsConfig:
        def fix(p: Path | None) -> Path | None:
            if p is None or p.is_absolute():
                return p
            return base / p

        return PathsConfig(
            raw=[fix(p) or p for p in self.raw],
            series=fix(self.series),
            posterior=fix(self.posterior),
            univariate_posterior=fix(self.univariate_posterior),
            work_orders=fix(self.work_orders),
            scenario=fix(self.scenario),
            out=fix(self.out) or self.out,
        )


class PipelineConfig(BaseModel):
    """Everything a pipeline run needs."""

    model_config = ConfigDict(extra="forbid")

    seed: int | None = Field(default=None, ge=0)
    paths: PathsConfig = Field(default_factory=PathsConfig)
    segmentation: SegmentationConfig = Field(default_factory=SegmentationConfig)
    identification: IdentificationConfig = Field(default_factory=IdentificationConfig)
    fit: FitConfig = Field(default_factory=FitConfig)
    thresholds: Thresholds | None = None
    predict: PredictConfig = Field(default_factory=PredictConfig)

    @property
    def effective_seed(self) -> int:
        return self.seed if self.seed is not None else self.fit.seed

    def with_overrides(
        self,
        seed: int | None = None,
        threads: int | None = None,
        out: Path | None = None,
    ) -> PipelineConfig:
        """Apply command-line overrides (and ``TRACKDEG_OUT``)."""
        data = self.model_dump(by_alias=True)
        if seed is not None:
            data["seed"] = seed
        if data["seed"] is not None:
            data["fit"]["seed"] = data["seed"]
        if threads is not None:
            data["fit"]["threads"] = threads
        env_out = os.environ.get(OUT_ENV)
        if out is not None:
            data["paths"]["out"] = out
        elif env_out:
            data["paths"]["out"] = Path(env_out)
        try:
            return PipelineConfig.model_validate(data)
        except ValidationError as e:
            raise ConfigError(_format_validation(e)) from e


def _format_validation(error: ValidationError) -> str:
    lines = []
    for item in error.errors():
        where = ".".join(str(p) for p in item["loc"]) or "<root>"
        lines.append(f"{where}: {item['msg']}")
    return "invalid configuration: " + "; ".join(lines)


def _read_toml(path: Path) -> dict[str, Any]:
    try:
        with path.open("rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError as e:
        raise ConfigError(f"{path}: config file not found") from e
    except tomllib.TOMLDecodeError as e:
        # message carries "(at line L, column C)"
        raise ConfigError(f"{path}: {e}") from e
    except OSError as e:
        raise ConfigError(f"{path}: {e}") from e


def load_config(path: str | Path | None = None) -> PipelineConfig:
    """Read and validate a pipeline config; defaults when ``path`` is None.

    Raises:
        ConfigError: unreadable file, TOML syntax error or invalid values
    """
    if path is None:
        return PipelineConfig()
    path = Path(path)
    data = _read_toml(path)
    try:
        config = PipelineConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"{path}: {_format_validation(e)}") from e
    config.paths = config.paths.resolved(path.parent)
    logger.debug(f"Loaded config from {path}")
    return config


def load_scenario(path: str | Path) -> ScenarioSpec:
    """Read a synthetic scenario from TOML.

    Raises:
        ConfigError: unreadable file or invalid scenario
    """
    path = Path(path)
    data = _read_toml(path)
    data = data.get("scenario", data)
    try:
        return ScenarioSpec.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"{path}: {_format_validation(e)}") from e


def require_file(path: Path | None, what: str) -> Path:
    """Check that an input exists before anything is written.

    Raises:
        ConfigError: path missing from the config/flags or not on disk
    """
    if path is None:
        raise ConfigError(f"No {what} given (flag or [paths] entry)")
    if not path.exists():
        raise ConfigError(f"{what} not found: {path}")
    return path
