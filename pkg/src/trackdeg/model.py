"""Multivariate Wiener degradation model with imperfect-maintenance resets.

Defines the data and parameter types shared by every other module and
evaluates the model's likelihoods and forward simulation:

- Between inspections without tamping, increments follow
  N(mu * dt, Sigma * dt).
- In an interval with tamping, the track is reset to z+ at the interval
  midpoint, so the end-of-interval value follows
  N(z+ + mu * dt / 2, Sigma * dt / 2).

All densities are evaluated in the log domain. Time is measured in days and
indicator values in mm.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any, NamedTuple

import numpy as np
from scipy import linalg

from trackdeg.errors import (
    DecompositionError,
    EmptySeriesError,
    ModelSpecificationError,
    NumericError,
)

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)

SeedLike = int | np.random.Generator | np.random.SeedSequence | None


def as_generator(seed: SeedLike) -> np.random.Generator:
    """Return a numpy Generator for an int seed, SeedSequence or existing Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class IndicatorVector:
    """Values of all N_q indicators at one inspection (mm)."""

    values: np.ndarray
    labels: tuple[str, ...]

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float).reshape(-1)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "labels", tuple(self.labels))
        if values.size < 1:
            raise ValueError("IndicatorVector needs at least one indicator")
        if len(self.labels) != values.size:
            raise ValueError(
                f"IndicatorVector has {values.size} values but {len(self.labels)} labels"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("IndicatorVector values must be finite")

    def __len__(self) -> int:
        return int(self.values.size)


def default_labels(n_indicators: int) -> tuple[str, ...]:
    """Placeholder indicator names `z0, z1, ...`."""
    return tuple(f"z{q}" for q in range(n_indicators))


@dataclass
class SegmentSeries:
    """Inspection history of one track segment.

    ``maint_flags[k]`` flags tamping in the interval ``(times[k-1], times[k]]``;
    ``maint_flags[0]`` is always False.
    """

    segment_id: int
    times: np.ndarray
    observations: np.ndarray
    maint_flags: np.ndarray | None = None
    labels: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        obs = np.asarray(self.observations, dtype=float)
        if obs.ndim == 1:
            obs = obs.reshape(-1, 1)
        self.observations = obs
        k = self.times.size

        if obs.shape[0] != k:
            raise ValueError(
                f"Segment {self.segment_id}: {k} times but {obs.shape[0]} observations"
            )
        if obs.shape[1] < 1:
            raise ValueError(f"Segment {self.segment_id}: no indicators")
        if not np.all(np.isfinite(obs)) or not np.all(np.isfinite(self.times)):
            raise ValueError(f"Segment {self.segment_id}: non-finite times or observations")
        if k > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError(
                f"Segment {self.segment_id}: times must be strictly increasing "
                "(duplicate timestamps are rejected)"
            )

        if self.maint_flags is None:
            flags = np.zeros(k, dtype=bool)
        else:
            flags = np.asarray(self.maint_flags, dtype=bool).reshape(-1).copy()
        if flags.size != k:
            raise ValueError(f"Segment {self.segment_id}: {k} times but {flags.size} flags")
        if k and flags[0]:
            raise ValueError(f"Segment {self.segment_id}: maint_flags[0] must be False")
        self.maint_flags = flags

        if not self.labels:
            self.labels = default_labels(obs.shape[1])
        self.labels = tuple(self.labels)
        if len(self.labels) != obs.shape[1]:
            raise ValueError(
                f"Segment {self.segment_id}: {obs.shape[1]} indicators but "
                f"{len(self.labels)} labels"
            )

    @property
    def n_obs(self) -> int:
        return int(self.times.size)

    @property
    def n_indicators(self) -> int:
        return int(self.observations.shape[1])

    @property
    def flags(self) -> np.ndarray:
        assert self.maint_flags is not None
        return self.maint_flags

    @property
    def maintenance_intervals(self) -> list[int]:
        """Interval indices k with tamping (the set M_i)."""
        return [int(k) for k in np.flatnonzero(self.flags)]

    def observation(self, k: int) -> IndicatorVector:
        return IndicatorVector(self.observations[k], self.labels)

    def with_flags(self, flags: Sequence[bool] | np.ndarray) -> SegmentSeries:
        return SegmentSeries(
            segment_id=self.segment_id,
            times=self.times.copy(),
            observations=self.observations.copy(),
            maint_flags=np.asarray(flags, dtype=bool),
            labels=self.labels,
        )

    def truncated(self, n_obs: int) -> SegmentSeries:
        """The first ``n_obs`` observations (flags included)."""
        return SegmentSeries(
            segment_id=self.segment_id,
            times=self.times[:n_obs].copy(),
            observations=self.observations[:n_obs].copy(),
            maint_flags=self.flags[:n_obs].copy(),
            labels=self.labels,
        )

    def select(self, indicators: Sequence[int]) -> SegmentSeries:
        """Keep (and reorder) a subset of indicators."""
        idx = list(indicators)
        return SegmentSeries(
            segment_id=self.segment_id,
            times=self.times.copy(),
            observations=self.observations[:, idx].copy(),
            maint_flags=self.flags.copy(),
            labels=tuple(self.labels[q] for q in idx),
        )


def check_correlation(correlation: np.ndarray, atol: float = 1e-8) -> np.ndarray:
    """Validate a correlation matrix and return its lower Cholesky factor.

    Raises:
        ValueError: not square, not symmetric or diagonal not one
        DecompositionError: not positive definite
    """
    r = np.asarray(correlation, dtype=float)
    if r.ndim != 2 or r.shape[0] != r.shape[1]:
        raise ValueError(f"Correlation matrix must be square, got shape {r.shape}")
    if not np.allclose(r, r.T, atol=atol):
        raise ValueError("Correlation matrix must be symmetric")
    if not np.allclose(np.diag(r), 1.0, atol=atol):
        raise ValueError("Correlation matrix must have a unit diagonal")
    return cholesky_lower(r, what="correlation")


def cholesky_lower(matrix: np.ndarray, what: str = "covariance") -> np.ndarray:
    """Lower Cholesky factor, raising DecompositionError when not positive definite."""
    try:
        chol = linalg.cholesky(matrix, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError) as e:
        raise DecompositionError(f"{what} matrix is not positive definite: {e}") from e
    if np.any(np.diag(chol) <= 0.0):
        raise DecompositionError(f"{what} matrix is singular")
    return chol


def build_covariance(marginal_sd: Sequence[float] | np.ndarray, correlation: np.ndarray) -> np.ndarray:
    """Covariance Sigma = D R D with D = diag(marginal_sd).

    Args:
        marginal_sd: Positive marginal standard deviations (mm/sqrt(day))
        correlation: Symmetric, unit-diagonal, positive-definite matrix

    Returns:
        Symmetric positive-definite covariance matrix
    """
    sd = np.asarray(marginal_sd, dtype=float).reshape(-1)
    if np.any(~np.isfinite(sd)) or np.any(sd <= 0.0):
        raise ValueError("marginal_sd must be finite and positive")
    r = np.asarray(correlation, dtype=float)
    if r.shape != (sd.size, sd.size):
        raise ValueError(
            f"Correlation shape {r.shape} does not match {sd.size} standard deviations"
        )
    check_correlation(r)
    sigma = sd[:, None] * r * sd[None, :]
    # exact symmetry
    return 0.5 * (sigma + sigma.T)


@dataclass
class WienerParams:
    """Per-segment Wiener process parameters (mu_i, sigma_i, R_i)."""

    drift: np.ndarray
    marginal_sd: np.ndarray
    correlation: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.drift = np.asarray(self.drift, dtype=float).reshape(-1)
        self.marginal_sd = np.asarray(self.marginal_sd, dtype=float).reshape(-1)
        nq = self.drift.size
        if self.marginal_sd.size != nq:
            raise ValueError(
                f"drift has {nq} entries but marginal_sd has {self.marginal_sd.size}"
            )
        if np.any(~np.isfinite(self.drift)) or np.any(self.drift < 0.0):
            raise ValueError("drift must be finite and nonnegative")
        if np.any(~np.isfinite(self.marginal_sd)) or np.any(self.marginal_sd <= 0.0):
            raise ValueError("marginal_sd must be finite and positive")
        if self.correlation is None:
            self.correlation = np.eye(nq)
        self.correlation = np.asarray(self.correlation, dtype=float)
        self._chol: np.ndarray | None = None

    @property
    def n_indicators(self) -> int:
        return int(self.drift.size)

    @property
    def corr(self) -> np.ndarray:
        assert self.correlation is not None
        return self.correlation

    @property
    def covariance(self) -> np.ndarray:
        return build_covariance(self.marginal_sd, self.corr)

    @property
    def cholesky(self) -> np.ndarray:
        """Lower Cholesky factor L of Sigma (cached)."""
        if self._chol is None:
            self._chol = cholesky_lower(self.covariance)
        return self._chol

    def permuted(self, order: Sequence[int]) -> WienerParams:
        idx = list(order)
        return WienerParams(
            drift=self.drift[idx],
            marginal_sd=self.marginal_sd[idx],
            correlation=self.corr[np.ix_(idx, idx)],
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "drift": self.drift.tolist(),
            "marginal_sd": self.marginal_sd.tolist(),
            "correlation": self.corr.tolist(),
        }


@dataclass(frozen=True)
class PostMaintenanceState:
    """Indicator values z+ just after a tamping event in interval ``interval_index``."""

    segment_id: int
    interval_index: int
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float).reshape(-1)
        object.__setattr__(self, "values", values)
        if np.any(~np.isfinite(values)) or np.any(values <= 0.0):
            raise ValueError(
                f"Post-maintenance values for segment {self.segment_id}, "
                f"interval {self.interval_index} must be positive"
            )


class Increment(NamedTuple):
    """One inspection interval: elapsed time, indicator change, tamping flag."""

    dt: float
    dz: np.ndarray
    maint: bool


def increments(series: SegmentSeries) -> list[Increment]:
    """Interval-by-interval differences of a series.

    Raises:
        EmptySeriesError: fewer than two observations
    """
    if series.n_obs < 2:
        raise EmptySeriesError(
            f"Segment {series.segment_id} has {series.n_obs} observation(s); need at least 2"
        )
    dts = np.diff(series.times)
    dzs = np.diff(series.observations, axis=0)
    return [
        Increment(float(dts[j]), dzs[j].copy(), bool(series.flags[j + 1]))
        for j in range(dts.size)
    ]


@dataclass(frozen=True)
class IncrementTable:
    """Vectorized interval data of one series, rows ordered by interval index."""

    segment_id: int
    dt: np.ndarray
    dz: np.ndarray
    z_end: np.ndarray
    maint: np.ndarray
    interval_index: np.ndarray

    @classmethod
    def from_series(cls, series: SegmentSeries) -> IncrementTable:
        if series.n_obs < 2:
            raise EmptySeriesError(
                f"Segment {series.segment_id} has {series.n_obs} observation(s); need at least 2"
            )
        return cls(
            segment_id=series.segment_id,
            dt=np.diff(series.times),
            dz=np.diff(series.observations, axis=0),
            z_end=series.observations[1:].copy(),
            maint=series.flags[1:].copy(),
            interval_index=np.arange(1, series.n_obs),
        )

    @property
    def maint_intervals(self) -> np.ndarray:
        return self.interval_index[self.maint]

    def select(self, indicators: Sequence[int]) -> IncrementTable:
        idx = list(indicators)
        return IncrementTable(
            segment_id=self.segment_id,
            dt=self.dt,
            dz=self.dz[:, idx],
            z_end=self.z_end[:, idx],
            maint=self.maint,
            interval_index=self.interval_index,
        )


def gaussian_logdensity(resid: np.ndarray, scale: np.ndarray, chol: np.ndarray) -> float:
    """Sum over rows of log N(resid_k; 0, scale_k * L L^T)."""
    if resid.shape[0] == 0:
        return 0.0
    nq = chol.shape[0]
    w = linalg.solve_triangular(chol, resid.T, lower=True, check_finite=False)
    mahal = np.sum(w * w, axis=0) / scale
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return float(-0.5 * np.sum(nq * (LOG_2PI + np.log(scale)) + logdet + mahal))


def wiener_loglik(
    drift: np.ndarray,
    chol: np.ndarray,
    table: IncrementTable,
    zplus: np.ndarray | None,
) -> float:
    """Log-likelihood of one segment given the Cholesky factor of Sigma.

    Args:
        drift: (N_q,) drift vector
        chol: (N_q, N_q) lower Cholesky factor of Sigma
        table: interval data of the segment
        zplus: (|M_i|, N_q) post-maintenance values, one row per flagged
            interval in increasing interval order

    Returns:
        Log of the likelihood; the plain Wiener increment form when no interval is flagged
    """
    maint = table.maint
    free = ~maint
    total = gaussian_logdensity(
        table.dz[free] - drift[None, :] * table.dt[free, None], table.dt[free], chol
    )
    if np.any(maint):
        if zplus is None or zplus.shape[0] != int(maint.sum()):
            raise ModelSpecificationError(
                f"Segment {table.segment_id}: {int(maint.sum())} maintenance intervals but "
                f"{0 if zplus is None else zplus.shape[0]} post-maintenance states"
            )
        half = 0.5 * table.dt[maint]
        resid = table.z_end[maint] - zplus - drift[None, :] * half[:, None]
        total += gaussian_logdensity(resid, half, chol)
    return total


def _zplus_rows(
    series: SegmentSeries,
    post_maint: Mapping[int, PostMaintenanceState | np.ndarray | Sequence[float]] | None,
    indicators: Sequence[int] | None = None,
) -> np.ndarray | None:
    intervals = series.maintenance_intervals
    if not intervals:
        return None
    post_maint = post_maint or {}
    rows = []
    for k in intervals:
        if k not in post_maint:
            raise ModelSpecificationError(
                f"Segment {series.segment_id}: no post-maintenance state for flagged interval {k}"
            )
        entry = post_maint[k]
        values = entry.values if isinstance(entry, PostMaintenanceState) else entry
        row = np.asarray(values, dtype=float).reshape(-1)
        if indicators is not None and row.size == series.n_indicators:
            row = row[list(indicators)]
        rows.append(row)
    return np.vstack(rows)


def _finite(value: float, what: str, segment_id: int) -> float:
    if not math.isfinite(value):
        raise NumericError(f"Segment {segment_id}: {what} log-likelihood is not finite")
    return value


def loglik_multivariate(
    params: WienerParams,
    series: SegmentSeries,
    post_maint: Mapping[int, PostMaintenanceState | np.ndarray | Sequence[float]] | None = None,
) -> float:
    """Log-likelihood of the multivariate model with tamping.

    Args:
        params: Drift, marginal sd and correlation of the segment
        series: Observations with maintenance flags
        post_maint: Post-maintenance state per flagged interval index

    Raises:
        ModelSpecificationError: a flagged interval has no post-maintenance state
        DecompositionError: Sigma is not positive definite
        NumericError: the result is not finite
    """
    if params.n_indicators != series.n_indicators:
        raise ModelSpecificationError(
            f"Segment {series.segment_id}: {series.n_indicators} indicators but parameters "
            f"for {params.n_indicators}"
        )
    table = IncrementTable.from_series(series)
    zplus = _zplus_rows(series, post_maint)
    value = wiener_loglik(params.drift, params.cholesky, table, zplus)
    return _finite(value, "multivariate", series.segment_id)


def loglik_univariate(
    drift: float,
    variance: float,
    series: SegmentSeries,
    indicator: int,
    post_maint: Mapping[int, PostMaintenanceState | np.ndarray | Sequence[float]] | None = None,
) -> float:
    """Log-likelihood of a single indicator under the univariate model.

    ``post_maint`` entries may hold either the full indicator vector or the
    single value of ``indicator``.
    """
    if not variance > 0.0:
        raise ValueError(f"variance must be positive, got {variance}")
    if not 0 <= indicator < series.n_indicators:
        raise ModelSpecificationError(
            f"Segment {series.segment_id}: indicator {indicator} out of range"
        )
    table = IncrementTable.from_series(series).select([indicator])
    zplus = _zplus_rows(series, post_maint, indicators=[indicator])
    chol = np.array([[math.sqrt(variance)]])
    value = wiener_loglik(np.array([float(drift)]), chol, table, zplus)
    return _finite(value, "univariate", series.segment_id)


def simulate_path(
    params: WienerParams,
    start: IndicatorVector | np.ndarray | Sequence[float],
    times: Sequence[float] | np.ndarray,
    maint_schedule: Mapping[int, np.ndarray | Sequence[float] | PostMaintenanceState]
    | None = None,
    seed: SeedLike = None,
    n_paths: int | None = None,
) -> np.ndarray:
    """Sample the process at ``times`` starting from ``start`` at ``times[0]``.

    Args:
        params: Process parameters
        start: State at ``times[0]``
        times: Strictly increasing sample times (days)
        maint_schedule: Reset value per interval index k; the state jumps to
            it at the midpoint of ``(times[k-1], times[k]]``
        seed: Seed or Generator
        n_paths: Number of independent paths; None returns a single path

    Returns:
        (K, N_q) array, or (n_paths, K, N_q) when ``n_paths`` is given
    """
    t = np.asarray(times, dtype=float).reshape(-1)
    if t.size < 1:
        raise ValueError("times must not be empty")
    if np.any(np.diff(t) <= 0):
        raise ValueError("times must be strictly increasing")
    z0 = start.values if isinstance(start, IndicatorVector) else np.asarray(start, dtype=float)
    z0 = z0.reshape(-1)
    nq = params.n_indicators
    if z0.size != nq:
        raise ValueError(f"start has {z0.size} values, parameters have {nq} indicators")

    rng = as_generator(seed)
    chol = params.cholesky
    m = 1 if n_paths is None else int(n_paths)
    schedule = maint_schedule or {}

    out = np.empty((m, t.size, nq))
    out[:, 0, :] = z0
    for k in range(1, t.size):
        dt = t[k] - t[k - 1]
        noise = rng.standard_normal((m, nq)) @ chol.T
        if k in schedule:
            entry = schedule[k]
            reset = entry.values if isinstance(entry, PostMaintenanceState) else entry
            half = 0.5 * dt
            out[:, k, :] = (
                np.asarray(reset, dtype=float)[None, :]
                + params.drift[None, :] * half
                + math.sqrt(half) * noise
            )
        else:
            out[:, k, :] = (
                out[:, k - 1, :] + params.drift[None, :] * dt + math.sqrt(dt) * noise
            )
    return out[0] if n_paths is None else out
