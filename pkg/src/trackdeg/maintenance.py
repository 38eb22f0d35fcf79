"""Tamping identification from simultaneous drops of the geometry indicators.

An inspection interval ``(t[k-1], t[k]]`` is flagged when every indicator
falls by at least its ``min_drop``. Work-order records are only compared
against the flags in a report; they never change them.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, field_validator

from trackdeg.errors import EmptySeriesError, IngestError, ModelSpecificationError
from trackdeg.model import SegmentSeries

logger = logging.getLogger(__name__)


class IdentificationConfig(BaseModel):
    """Drop criterion; ``min_drop`` is one value (mm) for all indicators or one per indicator."""

    model_config = ConfigDict(extra="forbid")

    min_drop: float | list[float] = 0.5
    require_all: bool = True

    @field_validator("min_drop")
    @classmethod
    def _nonnegative(cls, v: float | list[float]) -> float | list[float]:
        arr = np.asarray(v, dtype=float)
        if arr.size == 0 or not np.all(np.isfinite(arr)) or np.any(arr < 0.0):
            raise ValueError("min_drop must be finite and nonnegative")
        return v

    def drops(self, n_indicators: int) -> np.ndarray:
        value = np.asarray(self.min_drop, dtype=float).reshape(-1)
        if value.size == 1:
            return np.full(n_indicators, float(value[0]))
        if value.size != n_indicators:
            raise ModelSpecificationError(
                f"min_drop has {value.size} entries but the series has {n_indicators} indicators"
            )
        return value


def drop_mask(series: SegmentSeries, config: IdentificationConfig) -> np.ndarray:
    """Boolean flags per observation; index 0 is never flagged."""
    min_drop = config.drops(series.n_indicators)
    z = series.observations
    dropped = z[1:] <= z[:-1] - min_drop[None, :]
    hit = dropped.all(axis=1) if config.require_all else dropped.any(axis=1)
    return np.concatenate([[False], hit])


def identify(series: SegmentSeries, config: IdentificationConfig | None = None) -> SegmentSeries:
    """Return a copy of ``series`` with tamping flags recomputed from its values.

    Existing flags are ignored, so identifying twice gives the same result.

    Raises:
        EmptySeriesError: fewer than two observations
        ModelSpecificationError: per-indicator ``min_drop`` of the wrong length
    """
    config = config or IdentificationConfig()
    if series.n_obs < 2:
        raise EmptySeriesError(
            f"Segment {series.segment_id} has {series.n_obs} observation(s); need at least 2"
        )
    flags = drop_mask(series, config)
    logger.debug(f"Segment {series.segment_id}: {int(flags.sum())} tamping interval(s) flagged")
    return series.with_flags(flags)


def identify_all(
    dataset: Sequence[SegmentSeries], config: IdentificationConfig | None = None
) -> list[SegmentSeries]:
    """Identify every series; series with a single observation keep no flags."""
    config = config or IdentificationConfig()
    out = []
    for s in dataset:
        out.append(identify(s, config) if s.n_obs >= 2 else s.with_flags(np.zeros(s.n_obs, bool)))
    logger.info(
        f"Flagged {sum(int(s.flags.sum()) for s in out)} tamping intervals in {len(out)} segments"
    )
    return out


@dataclass(frozen=True)
class WorkOrder:
    """A recorded tamping job on a segment at ``time`` (days since the dataset epoch)."""

    segment_id: int
    time: float


def read_work_orders(path: str | Path, epoch: Any) -> list[WorkOrder]:
    """Read a ``segment_id,date`` work-order file.

    Raises:
        IngestError: unreadable file or missing columns
    """
    path = Path(path)
    try:
        frame = pd.read_csv(path)
    except pd.errors.EmptyDataError:
        return []
    except (OSError, pd.errors.ParserError) as e:
        raise IngestError(f"{path}: cannot read work orders: {e}") from e
    for column in ("segment_id", "date"):
        if column not in frame.columns:
            raise IngestError(f"{path}: missing column {column}")
    days = (pd.to_datetime(frame["date"]) - pd.Timestamp(epoch)) / pd.Timedelta(days=1)
    return [
        WorkOrder(int(sid), float(t))
        for sid, t in zip(frame["segment_id"], days, strict=True)
    ]


def write_work_orders(orders: Sequence[WorkOrder], path: str | Path, epoch: Any) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(
        {
            "segment_id": [o.segment_id for o in orders],
            "date": [pd.Timestamp(epoch) + pd.Timedelta(days=o.time) for o in orders],
        }
    )
    frame.to_csv(path, index=False, lineterminator="\n")


@dataclass
class MaintenanceReport:
    """Agreement between geometry flags and work orders."""

    n_segments: int
    n_flagged: int
    n_work_orders: int | None = None
    matches: int = 0
    geometry_only: int = 0
    workorder_only: int = 0
    records: list[dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"segments": self.n_segments, "flagged": self.n_flagged}
        if self.n_work_orders is not None:
            out.update(
                {
                    "work_orders": self.n_work_orders,
                    "matches": self.matches,
                    "geometry_only": self.geometry_only,
                    "workorder_only": self.workorder_only,
                }
            )
        return out

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            self.records, columns=["segment_id", "interval", "time", "status"]
        )


def report(
    dataset: Sequence[SegmentSeries], work_orders: Sequence[WorkOrder] | None = None
) -> MaintenanceReport:
    """Count flagged intervals and reconcile them with work orders when given.

    A work order matches a flagged interval ``(t[k-1], t[k]]`` of its segment.
    Flagged intervals without a work order are geometry-only; work orders
    outside every flagged interval are workorder-only.
    """
    series = list(dataset)
    flagged = [(s, k) for s in series for k in s.maintenance_intervals]
    result = MaintenanceReport(n_segments=len(series), n_flagged=len(flagged))
    if work_orders is None:
        result.records = [
            {"segment_id": s.segment_id, "interval": k, "time": float(s.times[k]), "status": "flagged"}
            for s, k in flagged
        ]
        return result

    by_segment: dict[int, list[tuple[int, WorkOrder]]] = {}
    for i, order in enumerate(work_orders):
        by_segment.setdefault(order.segment_id, []).append((i, order))
    result.n_work_orders = len(work_orders)

    used: set[int] = set()
    for s, k in flagged:
        lo, hi = s.times[k - 1], s.times[k]
        inside = [i for i, o in by_segment.get(s.segment_id, []) if lo < o.time <= hi]
        used.update(inside)
        status = "match" if inside else "geometry_only"
        if inside:
            result.matches += 1
        else:
            result.geometry_only += 1
        result.records.append(
            {"segment_id": s.segment_id, "interval": k, "time": float(hi), "status": status}
        )
    for i, order in enumerate(work_orders):
        if i not in used:
            result.workorder_only += 1
            result.records.append(
                {"segment_id": order.segment_id, "interval": -1, "time": order.time, "status": "workorder_only"}
            )
    logger.info(f"Maintenance report: {result.to_dict()}")
    return result
