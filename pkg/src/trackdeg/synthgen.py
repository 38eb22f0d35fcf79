"""Synthetic inspection data with known ground truth.

Segments degrade by the Wiener model and are tamped according to a rule.
Everything the fitter estimates (per-segment drift, sd, correlation, tamping
intervals and post-tamping values) is kept in a :class:`Truth` record.
"""

from __future__ import annotations

import datetime as dt
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy import stats

from trackdeg.ingest import FLOAT_FORMAT, SeriesDataset
from trackdeg.maintenance import WorkOrder
from trackdeg.model import SegmentSeries, WienerParams, check_correlation, default_labels
from trackdeg.priors import halfnormal_sample, lkj_sample, lognormal_sample

logger = logging.getLogger(__name__)

FloatOrList = float | list[float]


class TampingRule(str, Enum):
    NONE = "none"
    THRESHOLD = "threshold"
    SCHEDULED = "scheduled"


class ZplusDistribution(str, Enum):
    """Law of the post-tamping value; ``truncnorm`` deliberately misspecifies the model."""

    LOGNORMAL = "lognormal"
    TRUNCNORM = "truncnorm"


class ScenarioSpec(BaseModel):
    """A synthetic study.

    With ``drift`` and ``marginal_sd`` given, every segment shares them (and
    ``correlation``, identity by default). Otherwise each segment draws
    drift ~ HalfNormal(s_mu), sd ~ HalfNormal(s_sigma) and R ~ LKJ(eta).
    Post-tamping values follow LogNormal(m_z, s_z) in both cases.
    """

    model_config = ConfigDict(extra="forbid")

    n_segments: int = Field(default=10, ge=1)
    n_indicators: int = Field(default=4, ge=1)
    labels: list[str] | None = None
    n_inspections: int = Field(default=20, ge=2)
    interval_days: int = Field(default=90, gt=0)
    jitter_days: int = Field(default=30, ge=0)
    start_date: dt.date = dt.date(2020, 1, 1)

    drift: FloatOrList | None = None
    marginal_sd: FloatOrList | None = None
    correlation: list[list[float]] | None = None
    s_mu: FloatOrList = 0.01
    s_sigma: FloatOrList = 0.05
    eta: float = Field(default=1.0, gt=0.0)

    m_z: FloatOrList = 0.5
    s_z: FloatOrList = 0.2
    zplus_distribution: ZplusDistribution = ZplusDistribution.LOGNORMAL
    initial: FloatOrList | None = None

    tamping_rule: TampingRule = TampingRule.NONE
    tamping_threshold: FloatOrList | None = None
    tamping_every: int | None = Field(default=None, ge=1)
    ineffective_fraction: float = Field(default=0.0, ge=0.0, lt=1.0)

    seed: int = Field(default=0, ge=0)

    @field_validator("s_mu", "s_sigma", "s_z")
    @classmethod
    def _positive(cls, v: FloatOrList) -> FloatOrList:
        if np.any(np.asarray(v, dtype=float) <= 0.0):
            raise ValueError("scale parameters must be positive")
        return v

    @model_validator(mode="after")
    def _check_consistency(self) -> ScenarioSpec:
        q = self.n_indicators
        if self.jitter_days >= self.interval_days:
            raise ValueError("jitter_days must be smaller than interval_days")
        if self.labels is not None and len(self.labels) != q:
            raise ValueError(f"labels must have {q} entries")
        if (self.drift is None) != (self.marginal_sd is None):
            raise ValueError("drift and marginal_sd must be given together")
        if self.drift is not None:
            if np.any(self.vector("drift") < 0.0):
                raise ValueError("drift must be nonnegative")
            if np.any(self.vector("marginal_sd") < 0.0):
                raise ValueError("marginal_sd must be nonnegative")
        if self.correlation is not None:
            corr = np.asarray(self.correlation, dtype=float)
            if corr.shape != (q, q):
                raise ValueError(f"correlation must be {q}x{q}")
            check_correlation(corr)
        if self.initial is not None and np.any(self.vector("initial") <= 0.0):
            raise ValueError("initial state must be positive")
        if self.tamping_rule is TampingRule.THRESHOLD:
            if self.tamping_threshold is None:
                raise ValueError("threshold tamping needs tamping_threshold")
            threshold = self.vector("tamping_threshold")
            if self.initial is not None and np.any(threshold <= self.vector("initial")):
                raise ValueError("tamping_threshold must lie above the initial state")
        if self.tamping_rule is TampingRule.SCHEDULED and self.tamping_every is None:
            raise ValueError("scheduled tamping needs tamping_every")
        for name in ("drift", "marginal_sd", "s_mu", "s_sigma", "m_z", "s_z", "initial", "tamping_threshold"):
            if getattr(self, name) is not None:
                self.vector(name)
        return self

    def vector(self, name: str) -> np.ndarray:
        value = np.asarray(getattr(self, name), dtype=float).reshape(-1)
        if value.size == 1:
            return np.full(self.n_indicators, float(value[0]))
        if value.size != self.n_indicators:
            raise ValueError(f"{name} has {value.size} entries, expected {self.n_indicators}")
        return value

    @property
    def indicator_labels(self) -> tuple[str, ...]:
        return tuple(self.labels) if self.labels else default_labels(self.n_indicators)

    @property
    def hierarchical(self) -> bool:
        return self.drift is None


@dataclass
class Truth:
    """Ground truth behind a generated dataset (times in days since the epoch).

    Noise-free segments (a zero marginal sd) have no entry in ``params``.
    """

    labels: tuple[str, ...]
    params: dict[int, WienerParams]
    flags: dict[int, np.ndarray]
    zplus: dict[tuple[int, int], np.ndarray]
    work_orders: list[WorkOrder] = field(default_factory=list)
    ineffective: list[tuple[int, int]] = field(default_factory=list)
    hyper: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def n_events(self) -> int:
        return len(self.zplus)

    def to_frame(self) -> pd.DataFrame:
        rows: list[dict[str, Any]] = []

        def add(name: str, segment: int | None, value: float) -> None:
            rows.append({"parameter": name, "segment": segment, "value": float(value)})

        for name, values in self.hyper.items():
            for q, v in enumerate(values):
                add(f"hyper.{name}[{q}]", None, v)
        nq = len(self.labels)
        for sid, flags in self.flags.items():
            p = self.params.get(sid)
            if p is not None:
                for q in range(nq):
                    add(f"mu[{q}]", sid, p.drift[q])
                for q in range(nq):
                    add(f"sigma[{q}]", sid, p.marginal_sd[q])
                for q1 in range(nq):
                    for q2 in range(q1 + 1, nq):
                        add(f"R[{q1}][{q2}]", sid, p.corr[q1, q2])
            for k in np.flatnonzero(flags):
                add(f"tamped[{k}]", sid, 1.0)
                for q in range(nq):
                    add(f"zplus[{k}][{q}]", sid, self.zplus[(sid, int(k))][q])
        for sid, k in self.ineffective:
            add(f"ineffective[{k}]", sid, 1.0)
        frame = pd.DataFrame(rows, columns=["parameter", "segment", "value"])
        frame["segment"] = frame["segment"].astype("Int64")
        return frame

    def write_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        logger.info(f"Wrote truth for {len(self.flags)} segments to {path}")


def _draw_zplus(spec: ScenarioSpec, rng: np.random.Generator) -> np.ndarray:
    m = spec.vector("m_z")
    s = spec.vector("s_z")
    if spec.zplus_distribution is ZplusDistribution.LOGNORMAL:
        return np.asarray(lognormal_sample(m, s, rng, size=m.size), dtype=float)
    # same mean and relative spread, truncated to positive values
    loc = np.exp(m)
    scale = loc * s
    return stats.truncnorm.rvs(-loc / scale, np.inf, loc=loc, scale=scale, random_state=rng)


def _segment_params(
    spec: ScenarioSpec, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Drift, marginal sds and correlation of one segment; sds may be zero."""
    q = spec.n_indicators
    if spec.hierarchical:
        drift = np.asarray(halfnormal_sample(spec.vector("s_mu"), rng, size=q), dtype=float)
        sd = np.asarray(halfnormal_sample(spec.vector("s_sigma"), rng, size=q), dtype=float)
        if spec.correlation is not None:
            corr = np.asarray(spec.correlation, dtype=float)
        else:
            corr = lkj_sample(q, spec.eta, rng) if q >= 2 else np.eye(1)
        return drift, sd, corr
    corr = np.asarray(spec.correlation, dtype=float) if spec.correlation is not None else np.eye(q)
    return spec.vector("drift"), spec.vector("marginal_sd"), corr


def _inspection_times(spec: ScenarioSpec, rng: np.random.Generator) -> np.ndarray:
    gaps = spec.interval_days + rng.integers(
        -spec.jitter_days, spec.jitter_days + 1, size=spec.n_inspections - 1
    )
    return np.concatenate([[0.0], np.cumsum(gaps).astype(float)])


def _tamping_due(spec: ScenarioSpec, k: int, previous: np.ndarray) -> bool:
    if spec.tamping_rule is TampingRule.THRESHOLD:
        return bool(np.any(previous >= spec.vector("tamping_threshold")))
    if spec.tamping_rule is TampingRule.SCHEDULED:
        assert spec.tamping_every is not None
        return k % spec.tamping_every == 0
    return False


def generate_segment(
    spec: ScenarioSpec, segment_id: int, seed: np.random.SeedSequence
) -> tuple[SegmentSeries, WienerParams | None, dict[int, np.ndarray], list[int]]:
    """Simulate one segment.

    Returns:
        (series with true flags, parameters or None for a noise-free
        segment, post-tamping value per tamped interval, ineffective
        tamping intervals)
    """
    rng = np.random.default_rng(seed)
    drift, sd, corr = _segment_params(spec, rng)
    times = _inspection_times(spec, rng)
    q = spec.n_indicators
    # noise factor D L_R, valid for zero sds as well
    chol_r = np.linalg.cholesky(corr) if q > 1 else np.ones((1, 1))
    noise_chol = sd[:, None] * chol_r

    z = np.empty((times.size, q))
    z[0] = spec.vector("initial") if spec.initial is not None else _draw_zplus(spec, rng)
    flags = np.zeros(times.size, dtype=bool)
    zplus: dict[int, np.ndarray] = {}
    ineffective: list[int] = []
    for k in range(1, times.size):
        delta = times[k] - times[k - 1]
        noise = noise_chol @ rng.standard_normal(q)
        tamp = _tamping_due(spec, k, z[k - 1])
        if tamp and spec.ineffective_fraction > 0.0 and rng.random() < spec.ineffective_fraction:
            ineffective.append(k)
            tamp = False
        if tamp:
            reset = _draw_zplus(spec, rng)
            half = 0.5 * delta
            z[k] = reset + drift * half + math.sqrt(half) * noise
            flags[k] = True
            zplus[k] = reset
        else:
            z[k] = z[k - 1] + drift * delta + math.sqrt(delta) * noise
    series = SegmentSeries(segment_id, times, z, flags, spec.indicator_labels)
    params = WienerParams(drift, sd, corr) if np.all(sd > 0.0) else None
    return series, params, zplus, ineffective


def generate(spec: ScenarioSpec) -> tuple[SeriesDataset, Truth]:
    """Generate a dataset and its ground truth.

    The returned dataset carries the true tamping flags. Same spec, same output.
    """
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.n_segments)
    series: list[SegmentSeries] = []
    truth = Truth(labels=spec.indicator_labels, params={}, flags={}, zplus={})
    if spec.hierarchical:
        truth.hyper = {"s_mu": spec.vector("s_mu"), "s_sigma": spec.vector("s_sigma")}
    truth.hyper.update({"m_z": spec.vector("m_z"), "s_z": spec.vector("s_z")})

    for sid, seed in enumerate(seeds):
        s, params, zplus, ineffective = generate_segment(spec, sid, seed)
        series.append(s)
        if params is not None:
            truth.params[sid] = params
        truth.flags[sid] = s.flags.copy()
        for k, values in zplus.items():
            truth.zplus[(sid, k)] = values
        for k in sorted([*zplus, *ineffective]):
            midpoint = 0.5 * (s.times[k - 1] + s.times[k])
            truth.work_orders.append(WorkOrder(sid, float(midpoint)))
        truth.ineffective.extend((sid, k) for k in ineffective)

    dataset = SeriesDataset(
        series=series,
        labels=spec.indicator_labels,
        epoch=pd.Timestamp(spec.start_date),
        identified=True,
    )
    logger.info(
        f"Generated {spec.n_segments} segments x {spec.n_inspections} inspections, "
        f"{truth.n_events} tamping events ({len(truth.ineffective)} ineffective)"
    )
    return dataset, truth


def unflagged(dataset: SeriesDataset) -> SeriesDataset:
    """The dataset as ingest would produce it: values only, flags left to identification."""
    cleared: Sequence[SegmentSeries] = [s.with_flags(np.zeros(s.n_obs, bool)) for s in dataset]
    return dataset.replace(cleared, identified=False)
