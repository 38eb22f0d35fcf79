"""trackdeg - multivariate Wiener degradation of railway track geometry.

Fits a hierarchical Bayesian model of correlated geometry indicators with
imperfect tamping resets, and predicts when a segment reaches its
maintenance thresholds.

Usage:
    from trackdeg import FitConfig, SeriesDataset, Thresholds, fit, hitting_time

    dataset = SeriesDataset.read_csv("out/segment_series_flagged.csv")
    samples = fit(dataset.series, FitConfig(seed=7))
    result = hitting_time(samples, dataset.segment_ids[0], Thresholds(limits=12.0))

CLI:
    trackdeg --help
"""

from trackdeg.errors import (
    ConfigError,
    ConvergenceError,
    DataError,
    InitializationError,
    TrackDegError,
)
from trackdeg.ingest import SegmentationConfig, SeriesDataset, ingest_files
from trackdeg.maintenance import IdentificationConfig, identify, identify_all
from trackdeg.mcmc import FitConfig, fit, log_posterior
from trackdeg.model import SegmentSeries, WienerParams, loglik_multivariate, simulate_path
from trackdeg.posterior import ModelKind, PosteriorSamples, summarize
from trackdeg.predict import Thresholds, compare_models, hitting_time, predictive_bands, validate
from trackdeg.priors import HyperpriorConfig, Hyperparams
from trackdeg.synthgen import ScenarioSpec, generate

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "SegmentSeries",
    "WienerParams",
    "loglik_multivariate",
    "simulate_path",
    "Hyperparams",
    "HyperpriorConfig",
    "FitConfig",
    "fit",
    "log_posterior",
    "ModelKind",
    "PosteriorSamples",
    "summarize",
    "SegmentationConfig",
    "SeriesDataset",
    "ingest_files",
    "IdentificationConfig",
    "identify",
    "identify_all",
    "Thresholds",
    "predictive_bands",
    "validate",
    "hitting_time",
    "compare_models",
    "ScenarioSpec",
    "generate",
    "TrackDegError",
    "ConfigError",
    "DataError",
    "InitializationError",
    "ConvergenceError",
]
