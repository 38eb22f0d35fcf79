"""Posterior-predictive bands, holdout validation and hitting-time simulation.

Every forward simulation starts from a segment's last training observation
and draws one parameter set per posterior draw. Hitting times are simulated
on a regular grid without future tamping; the crossing time inside a grid
step is found by linear interpolation.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator

from trackdeg.diagnostics import check_convergence
from trackdeg.errors import DataError, ModelSpecificationError
from trackdeg.model import SegmentSeries, WienerParams, simulate_path
from trackdeg.posterior import PosteriorSamples, SegmentAnchor

logger = logging.getLogger(__name__)

HIT_QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)
# grid steps of noise drawn per path at a time
NOISE_BLOCK = 128


class Thresholds(BaseModel):
    """Maintenance limits (mm): one for all indicators, a list, or a label -> limit table."""

    model_config = ConfigDict(extra="forbid")

    limits: float | list[float] | dict[str, float]
    label: str = "custom"

    @field_validator("limits")
    @classmethod
    def _positive(cls, v: float | list[float] | dict[str, float]) -> float | list[float] | dict[str, float]:
        values = np.asarray(list(v.values()) if isinstance(v, dict) else v, dtype=float)
        if values.size == 0 or not np.all(np.isfinite(values)) or np.any(values <= 0.0):
            raise ValueError("threshold limits must be positive and finite")
        return v

    def vector(self, labels: Sequence[str]) -> np.ndarray:
        """Limits in indicator order.

        Raises:
            ModelSpecificationError: a label has no limit or the list length differs
        """
        if isinstance(self.limits, dict):
            missing = [name for name in labels if name not in self.limits]
            if missing:
                raise ModelSpecificationError(f"No threshold for indicator(s) {', '.join(missing)}")
            return np.array([self.limits[name] for name in labels], dtype=float)
        value = np.asarray(self.limits, dtype=float).reshape(-1)
        if value.size == 1:
            return np.full(len(labels), float(value[0]))
        if value.size != len(labels):
            raise ModelSpecificationError(
                f"{value.size} thresholds given for {len(labels)} indicators"
            )
        return value


class PredictConfig(BaseModel):
    """Forward-simulation settings."""

    model_config = ConfigDict(extra="forbid")

    horizon_days: float = Field(default=3650.0, gt=0.0)
    step_days: float = Field(default=1.0, gt=0.0)
    band_step_days: float = Field(default=30.0, gt=0.0)
    n_paths: int = Field(default=2000, ge=1)
    max_draws: int | None = Field(default=1000, ge=1)
    quantiles: list[float] = Field(default_factory=lambda: [0.025, 0.5, 0.975])
    level: float = Field(default=0.95, gt=0.0, lt=1.0)
    holdout: int = Field(default=3, ge=1)
    bins: int = Field(default=50, ge=1)

    @field_validator("quantiles")
    @classmethod
    def _unit_interval(cls, v: list[float]) -> list[float]:
        if not v or any(not 0.0 <= p <= 1.0 for p in v):
            raise ValueError("quantiles must lie in [0, 1]")
        return sorted(v)


# ----------------------------------------------------------------------
# Draw selection
# ----------------------------------------------------------------------


def _draw_indices(n_total: int, max_draws: int | None) -> np.ndarray:
    """Evenly thinned flat draw indices."""
    if max_draws is None or max_draws >= n_total:
        return np.arange(n_total)
    return np.unique(np.linspace(0, n_total - 1, max_draws).round().astype(int))


def _anchor(samples: PosteriorSamples, segment_id: int, start: SegmentAnchor | None) -> SegmentAnchor:
    if start is not None:
        return start
    if segment_id not in samples.anchors:
        raise ModelSpecificationError(
            f"Posterior has no last observation for segment {segment_id}; pass a start"
        )
    return samples.anchors[segment_id]


def _zplus_draws(samples: PosteriorSamples) -> tuple[np.ndarray, np.ndarray]:
    n = samples.n_chains * samples.n_draws
    return samples.m_z.reshape(n, -1), samples.s_z.reshape(n, -1)


def predictive_draws(
    samples: PosteriorSamples,
    segment_id: int,
    times: Sequence[float] | np.ndarray,
    start: SegmentAnchor | None = None,
    maint_intervals: Sequence[int] = (),
    max_draws: int | None = None,
    seed: int = 0,
) -> np.ndarray:
    """One simulated path per posterior draw at ``times``.

    Args:
        maint_intervals: Indices into ``times`` (1-based interval numbering
            from the start) whose interval contains tamping; the path resets to
            a z+ drawn from LogNormal(m_z, s_z) of the same posterior draw

    Returns:
        (n_draws, len(times), N_q) array
    """
    anchor = _anchor(samples, segment_id, start)
    t = np.asarray(times, dtype=float).reshape(-1)
    if t.size == 0:
        raise ValueError("times must not be empty")
    if t[0] <= anchor.time:
        raise ValueError(
            f"prediction times must follow the last training time {anchor.time}"
        )
    grid = np.concatenate([[anchor.time], t])
    drift, sd, corr = samples.segment_draws(segment_id)
    m_z, s_z = _zplus_draws(samples)
    picks = _draw_indices(drift.shape[0], max_draws)

    out = np.empty((picks.size, t.size, samples.n_indicators))
    for row, d in enumerate(picks):
        rng = np.random.default_rng(np.random.SeedSequence([seed, int(d)]))
        params = WienerParams(drift[d], sd[d], corr[d])
        schedule = {
            int(k): np.exp(m_z[d] + s_z[d] * rng.standard_normal(m_z.shape[1]))
            for k in maint_intervals
        }
        out[row] = simulate_path(params, anchor.values, grid, schedule, seed=rng)[1:]
    return out


def predictive_bands(
    samples: PosteriorSamples,
    segment_id: int,
    horizon: float,
    quantiles: Sequence[float] = (0.025, 0.5, 0.975),
    times: Sequence[float] | np.ndarray | None = None,
    step: float = 30.0,
    max_draws: int | None = None,
    seed: int = 0,
    force: bool = False,
) -> pd.DataFrame:
    """Pointwise predictive quantiles per indicator.

    Args:
        horizon: Last prediction time (days since the dataset epoch)
        times: Explicit prediction times; defaults to a ``step`` grid up to ``horizon``

    Returns:
        Long table with columns time, indicator, quantile, value

    Raises:
        ConvergenceError: the posterior fails the R-hat gate and ``force`` is False
        ValueError: horizon not after the last training time
    """
    check_convergence(samples, force)
    anchor = _anchor(samples, segment_id, None)
    if horizon <= anchor.time:
        raise ValueError(f"horizon {horizon} must exceed the last training time {anchor.time}")
    if times is None:
        n = max(int(math.ceil((horizon - anchor.time) / step - 1e-9)), 1)
        grid = np.minimum(anchor.time + step * np.arange(1, n + 1), horizon)
    else:
        grid = np.asarray(times, dtype=float)
    paths = predictive_draws(samples, segment_id, grid, max_draws=max_draws, seed=seed)
    levels = np.asarray(sorted(quantiles), dtype=float)
    q_values = np.quantile(paths, levels, axis=0)  # (L, T, Q)

    rows = []
    for ti, time in enumerate(grid):
        for qi, label in enumerate(samples.labels):
            for li, level in enumerate(levels):
                rows.append(
                    {
                        "time": float(time),
                        "indicator": label,
                        "quantile": float(level),
                        "value": float(q_values[li, ti, qi]),
                    }
                )
    logger.debug(f"Segment {segment_id}: bands at {grid.size} times from {paths.shape[0]} draws")
    return pd.DataFrame(rows, columns=["time", "indicator", "quantile", "value"])


# ----------------------------------------------------------------------
# Holdout validation
# ----------------------------------------------------------------------


def crps_ensemble(draws: np.ndarray, observed: float) -> float:
    """Continuous ranked probability score of an ensemble: E|X - y| - E|X - X'| / 2."""
    x = np.sort(np.asarray(draws, dtype=float).reshape(-1))
    n = x.size
    first = float(np.mean(np.abs(x - observed)))
    weights = 2.0 * np.arange(1, n + 1) - n - 1.0
    spread = 2.0 * float(np.sum(weights * x)) / (n * n)
    return first - 0.5 * spread


@dataclass
class ValidationReport:
    """Band coverage and CRPS of held-out observations."""

    labels: tuple[str, ...]
    level: float
    records: pd.DataFrame

    @property
    def n_points(self) -> int:
        return int(self.records[["segment_id", "time"]].drop_duplicates().shape[0])

    @property
    def coverage(self) -> dict[str, float]:
        grouped = self.records.groupby("indicator", sort=False)["inside"].mean()
        return {label: float(grouped[label]) for label in self.labels}

    @property
    def overall_coverage(self) -> float:
        return float(self.records["inside"].mean())

    @property
    def crps(self) -> dict[str, float]:
        grouped = self.records.groupby("indicator", sort=False)["crps"].mean()
        return {label: float(grouped[label]) for label in self.labels}

    def to_dict(self) -> dict[str, Any]:
        return {
            "level": self.level,
            "points": self.n_points,
            "overall_coverage": self.overall_coverage,
            "coverage": self.coverage,
            "crps": self.crps,
        }


def validate(
    samples: PosteriorSamples,
    dataset: Sequence[SegmentSeries],
    holdout_count: int,
    level: float = 0.95,
    max_draws: int | None = None,
    seed: int = 0,
    force: bool = False,
) -> ValidationReport:
    """Score the last ``holdout_count`` observations of each series.

    ``samples`` must come from a fit on the series truncated by
    ``holdout_count``; predictions start from the last kept observation.
    Tamping flagged inside the held-out window resets the simulated path.

    Raises:
        DataError: a series has no more than ``holdout_count`` observations
        ConvergenceError: failed R-hat gate without ``force``
    """
    if holdout_count < 1:
        raise ValueError("holdout_count must be at least 1")
    series = list(dataset)
    short = [s.segment_id for s in series if s.n_obs <= holdout_count]
    if short:
        raise DataError(
            f"holdout_count {holdout_count} too large for segment(s) {', '.join(map(str, short))}"
        )
    check_convergence(samples, force)
    lo_level, hi_level = 0.5 * (1.0 - level), 0.5 * (1.0 + level)

    rows = []
    for s in series:
        cut = s.n_obs - holdout_count
        anchor = SegmentAnchor(float(s.times[cut - 1]), tuple(float(v) for v in s.observations[cut - 1]))
        held_times = s.times[cut:]
        maint = [j + 1 for j, flag in enumerate(s.flags[cut:]) if flag]
        paths = predictive_draws(
            samples, s.segment_id, held_times, anchor, maint, max_draws=max_draws, seed=seed
        )
        lower = np.quantile(paths, lo_level, axis=0)
        median = np.quantile(paths, 0.5, axis=0)
        upper = np.quantile(paths, hi_level, axis=0)
        for j, time in enumerate(held_times):
            for q, label in enumerate(s.labels):
                y = float(s.observations[cut + j, q])
                rows.append(
                    {
                        "segment_id": s.segment_id,
                        "time": float(time),
                        "indicator": label,
                        "observed": y,
                        "lower": float(lower[j, q]),
                        "median": float(median[j, q]),
                        "upper": float(upper[j, q]),
                        "inside": bool(lower[j, q] - 1e-9 <= y <= upper[j, q] + 1e-9),
                        "crps": crps_ensemble(paths[:, j, q], y),
                    }
                )
    report = ValidationReport(tuple(samples.labels), level, pd.DataFrame(rows))
    logger.info(f"Validation: {report.n_points} held-out points, coverage {report.overall_coverage:.3f}")
    return report


# ----------------------------------------------------------------------
# Hitting times
# ----------------------------------------------------------------------


@dataclass
class HittingTimeResult:
    """First-passage times of the earliest threshold crossing, one per path.

    Censored paths (no crossing within the horizon) have time ``inf`` and
    first indicator -1.
    """

    segment_id: int
    labels: tuple[str, ...]
    times: np.ndarray
    first_indicator: np.ndarray
    draw_index: np.ndarray
    horizon: float
    n_ties: int = 0
    start_time: float = 0.0
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return int(self.times.size)

    @property
    def crossed(self) -> np.ndarray:
        return self.first_indicator >= 0

    @property
    def censored_fraction(self) -> float:
        return float(np.mean(~self.crossed))

    @property
    def first_hit_counts(self) -> np.ndarray:
        return np.bincount(self.first_indicator[self.crossed], minlength=len(self.labels))

    @property
    def first_hit_probabilities(self) -> np.ndarray:
        """Share of each indicator among crossing paths (zeros when all are censored)."""
        counts = self.first_hit_counts
        total = counts.sum()
        return counts / total if total else np.zeros(len(self.labels))

    @property
    def first_hit_fractions(self) -> np.ndarray:
        """Share of each indicator among all paths; adds up to 1 with the censored fraction."""
        return self.first_hit_counts / self.n_paths

    def quantiles(self, levels: Sequence[float] = HIT_QUANTILES) -> dict[float, float]:
        hit = self.times[self.crossed]
        if hit.size == 0:
            return {float(p): math.inf for p in levels}
        return {float(p): float(v) for p, v in zip(levels, np.quantile(hit, levels), strict=True)}

    @property
    def median(self) -> float:
        return self.quantiles([0.5])[0.5]

    def histogram(self, bins: int = 50) -> pd.DataFrame:
        hit = self.times[self.crossed]
        if hit.size == 0:
            return pd.DataFrame(columns=["bin_left", "bin_right", "count"])
        counts, edges = np.histogram(hit, bins=bins)
        return pd.DataFrame({"bin_left": edges[:-1], "bin_right": edges[1:], "count": counts})

    def probability_table(self) -> pd.DataFrame:
        table = pd.DataFrame(
            {
                "indicator": list(self.labels),
                "count": self.first_hit_counts,
                "probability": self.first_hit_probabilities,
            }
        )
        censored = pd.DataFrame(
            {"indicator": ["censored"], "count": [int((~self.crossed).sum())], "probability": [np.nan]}
        )
        return pd.concat([table, censored], ignore_index=True)

    def to_dict(self) -> dict[str, Any]:
        return {
            "segment_id": self.segment_id,
            "paths": self.n_paths,
            "horizon": self.horizon,
            "censored_fraction": self.censored_fraction,
            "ties": self.n_ties,
            "first_hit_probabilities": dict(zip(self.labels, self.first_hit_probabilities.tolist(), strict=True)),
            "quantiles": {f"q{100 * p:g}": v for p, v in self.quantiles().items()},
        }


def _first_passage(
    drift: np.ndarray,
    chol: np.ndarray,
    start: np.ndarray,
    threshold: np.ndarray,
    rngs: Sequence[np.random.Generator],
    horizon: float,
    step: float,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Grid simulation of one path per generator until every path crosses or the horizon.

    Each path draws its own noise in blocks of ``NOISE_BLOCK`` steps, so its
    trajectory does not depend on how many other paths run alongside it.
    """
    n_paths = len(rngs)
    nq = start.size
    z = np.tile(start, (n_paths, 1))
    times = np.full(n_paths, math.inf)
    first = np.full(n_paths, -1, dtype=int)
    alive = np.ones(n_paths, dtype=bool)
    ties = 0
    n_steps = int(math.ceil(horizon / step - 1e-9))
    t = 0.0
    block = np.zeros((n_paths, 0, nq))
    for i in range(n_steps):
        b = i % NOISE_BLOCK
        if b == 0:
            block = np.zeros((n_paths, min(NOISE_BLOCK, n_steps - i), nq))
            for p in np.flatnonzero(alive):
                block[p] = rngs[p].standard_normal(block.shape[1:])
            block = block @ chol.T
        h = min(step, horizon - t)
        z_new = z + drift[None, :] * h + math.sqrt(h) * block[:, b]
        over = (z_new >= threshold[None, :]) & alive[:, None]
        hit = over.any(axis=1)
        if hit.any():
            idx = np.flatnonzero(hit)
            z0, z1 = z[idx], z_new[idx]
            with np.errstate(divide="ignore", invalid="ignore"):
                frac = (threshold[None, :] - z0) / (z1 - z0)
            frac = np.where(over[idx], np.clip(np.nan_to_num(frac, nan=0.0), 0.0, 1.0), np.inf)
            q_first = np.argmin(frac, axis=1)
            times[idx] = t + frac[np.arange(idx.size), q_first] * h
            first[idx] = q_first
            ties += int(np.sum(over[idx].sum(axis=1) > 1))
            alive[idx] = False
        z = z_new
        t += h
        if not alive.any():
            break
    return times, first, ties


def hitting_time(
    samples: PosteriorSamples,
    segment_id: int,
    thresholds: Thresholds,
    horizon: float = 3650.0,
    n_paths: int = 2000,
    seed: int = 0,
    step: float = 1.0,
    start: SegmentAnchor | None = None,
    max_draws: int | None = None,
) -> HittingTimeResult:
    """Monte-Carlo first time any indicator reaches its threshold.

    Paths are spread over posterior draws in turn (path p uses draw
    p mod n_draws); the noise of path p comes from
    ``SeedSequence([seed, draw, p])``, so a path is the same whatever
    ``n_paths`` is. Times are measured from the start
    observation. Ties, paths where several indicators cross within the same
    grid step, go to the earliest interpolated crossing and, when exactly
    equal, to the lowest indicator index.

    Raises:
        DataError: any indicator of the start state is already at or above
            its threshold (the segment is due now; no positive hitting time)
    """
    if n_paths < 1:
        raise ValueError("n_paths must be at least 1")
    anchor = _anchor(samples, segment_id, start)
    limits = thresholds.vector(samples.labels)
    z0 = np.asarray(anchor.values, dtype=float)
    if np.any(z0 >= limits):
        raise DataError(
            f"Segment {segment_id}: start {z0.tolist()} already at or above thresholds {limits.tolist()}"
        )
    drift, sd, corr = samples.segment_draws(segment_id)
    picks = _draw_indices(drift.shape[0], max_draws)
    owner = picks[np.arange(n_paths) % picks.size]

    times = np.full(n_paths, math.inf)
    first = np.full(n_paths, -1, dtype=int)
    ties = 0
    for d in np.unique(owner):
        members = np.flatnonzero(owner == d)
        params = WienerParams(drift[d], sd[d], corr[d])
        rngs = [np.random.default_rng(np.random.SeedSequence([seed, int(d), int(p)])) for p in members]
        t_d, f_d, ties_d = _first_passage(params.drift, params.cholesky, z0, limits, rngs, horizon, step)
        times[members] = t_d
        first[members] = f_d
        ties += ties_d

    result = HittingTimeResult(
        segment_id=segment_id,
        labels=tuple(samples.labels),
        times=times,
        first_indicator=first,
        draw_index=owner,
        horizon=horizon,
        n_ties=ties,
        start_time=anchor.time,
        meta={"threshold_label": thresholds.label, "limits": limits.tolist(), "step": step, "seed": seed},
    )
    logger.info(
        f"Segment {segment_id}: median hitting time {result.median:.1f} days, "
        f"censored {result.censored_fraction:.3f}"
    )
    return result


@dataclass
class ModelComparison:
    """Hitting times of the same segment under the multivariate and univariate posteriors."""

    multivariate: HittingTimeResult
    univariate: HittingTimeResult

    @property
    def median_difference(self) -> float:
        """Univariate minus multivariate median hitting time (days)."""
        return self.univariate.median - self.multivariate.median

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for name, result in (("multivariate", self.multivariate), ("univariate", self.univariate)):
            row: dict[str, Any] = {"model": name, "censored_fraction": result.censored_fraction}
            row.update({f"q{100 * p:g}": v for p, v in result.quantiles().items()})
            rows.append(row)
        return pd.DataFrame(rows)

    def to_dict(self) -> dict[str, Any]:
        return {
            "segment_id": self.multivariate.segment_id,
            "median_multivariate": self.multivariate.median,
            "median_univariate": self.univariate.median,
            "median_difference": self.median_difference,
        }


def compare_models(
    multi_samples: PosteriorSamples,
    uni_samples: PosteriorSamples,
    segment_id: int,
    thresholds: Thresholds,
    horizon: float = 3650.0,
    n_paths: int = 2000,
    seed: int = 0,
    step: float = 1.0,
    max_draws: int | None = None,
) -> ModelComparison:
    """Paired hitting-time study of the two models with a shared seed.

    Under the univariate posterior (R = I) the indicators evolve
    independently and the earliest crossing among them is taken.

    Raises:
        ModelSpecificationError: the posteriors disagree on indicators, segments
            or starting observations
    """
    if tuple(multi_samples.labels) != tuple(uni_samples.labels):
        raise ModelSpecificationError("Posteriors have different indicators")
    for samples in (multi_samples, uni_samples):
        samples.segment_index(segment_id)
    a_multi = multi_samples.anchors.get(segment_id)
    a_uni = uni_samples.anchors.get(segment_id)
    if a_multi is not None and a_uni is not None and a_multi != a_uni:
        raise ModelSpecificationError(
            f"Segment {segment_id}: posteriors were fitted on different data"
        )
    kwargs: Mapping[str, Any] = {
        "horizon": horizon,
        "n_paths": n_paths,
        "seed": seed,
        "step": step,
        "max_draws": max_draws,
    }
    comparison = ModelComparison(
        multivariate=hitting_time(multi_samples, segment_id, thresholds, **kwargs),
        univariate=hitting_time(uni_samples, segment_id, thresholds, **kwargs),
    )
    logger.info(f"Model comparison: {comparison.to_dict()}")
    return comparison
