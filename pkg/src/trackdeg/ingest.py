"""Loading of raw track-recording channels and reduction to segment series.

Raw files hold one row per sample::

    date,channel,position_m,deviation_mm

Each inspection (date) is cut into half-open segments
``[track_start + j * L, track_start + (j + 1) * L)`` and every channel is
reduced to one statistic of |deviation| per segment. The per-inspection
tables are then assembled into one :class:`~trackdeg.model.SegmentSeries`
per segment, written to the segment-series file format::

    segment_id,date,<indicator>...,maint_flag
"""

from __future__ import annotations

import logging
import math
from collections.abc import Iterator, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from trackdeg.errors import DataError, IngestError
from trackdeg.model import SegmentSeries

logger = logging.getLogger(__name__)

RAW_COLUMNS = ("date", "channel", "position_m", "deviation_mm")
FLOAT_FORMAT = "%.17g"


class Reducer(str, Enum):
    """Statistic of |deviation| that represents a segment."""

    MAX_ABS = "max_abs"
    MEAN_ABS = "mean_abs"
    STD_ABS = "std_abs"
    P95_ABS = "p95_abs"


def reduce_abs(values: np.ndarray, statistic: Reducer) -> float:
    """Apply a reducer to the absolute values of one sample set (nan when empty)."""
    a = np.abs(np.asarray(values, dtype=float))
    if a.size == 0:
        return math.nan
    if statistic is Reducer.MAX_ABS:
        return float(a.max())
    if statistic is Reducer.MEAN_ABS:
        return float(a.mean())
    if statistic is Reducer.STD_ABS:
        return float(a.std())
    return float(np.quantile(a, 0.95))


class SegmentationConfig(BaseModel):
    """How the track is cut into segments and summarized."""

    model_config = ConfigDict(extra="forbid")

    segment_length: float = Field(default=100.0, gt=0.0)
    statistic: Reducer = Reducer.MAX_ABS
    track_start: float = 0.0
    track_end: float | None = None
    channels: list[str] | None = None
    spacing: float = Field(default=0.25, gt=0.0)
    spacing_tolerance: float = Field(default=0.05, ge=0.0)

    @model_validator(mode="after")
    def _check_bounds(self) -> SegmentationConfig:
        if self.track_end is not None and self.track_end <= self.track_start:
            raise ValueError("track_end must be greater than track_start")
        if self.channels is not None and len(set(self.channels)) != len(self.channels):
            raise ValueError("channels must be distinct")
        return self

    def n_segments(self, max_position: float) -> int:
        """Segment count; without ``track_end`` the track ends after ``max_position``."""
        if self.track_end is not None:
            return math.ceil((self.track_end - self.track_start) / self.segment_length)
        return int((max_position - self.track_start) // self.segment_length) + 1

    def segment_lengths(self, n_segments: int) -> np.ndarray:
        lengths = np.full(n_segments, self.segment_length)
        if self.track_end is not None and n_segments:
            lengths[-1] = self.track_end - (self.track_start + (n_segments - 1) * self.segment_length)
        return lengths


@dataclass
class RawInspection:
    """Samples of every channel recorded in one inspection run."""

    inspection_date: pd.Timestamp
    channels: dict[str, pd.DataFrame]

    def __post_init__(self) -> None:
        self.inspection_date = pd.Timestamp(self.inspection_date)
        for name, frame in self.channels.items():
            if frame.empty:
                raise IngestError(f"{self.inspection_date.date()}: channel {name} is empty")
            positions = frame["position_m"].to_numpy(dtype=float)
            if np.any(np.diff(positions[~np.isnan(positions)]) < 0.0):
                raise IngestError(
                    f"{self.inspection_date.date()}: positions of channel {name} decrease"
                )

    @property
    def n_samples(self) -> int:
        return sum(len(f) for f in self.channels.values())


@dataclass
class LoadReport:
    """Bookkeeping of where every raw sample went."""

    n_rows: int = 0
    records: list[dict[str, Any]] = field(default_factory=list)
    out_of_bounds: int = 0
    dropped_nan: int = 0
    spacing_violations: int = 0
    segment_lengths: dict[int, float] = field(default_factory=dict)

    def add(self, other: LoadReport) -> None:
        self.n_rows += other.n_rows
        self.records.extend(other.records)
        self.out_of_bounds += other.out_of_bounds
        self.dropped_nan += other.dropped_nan
        self.spacing_violations += other.spacing_violations
        self.segment_lengths.update(other.segment_lengths)

    @property
    def n_assigned(self) -> int:
        return int(sum(r["n_samples"] for r in self.records))

    def to_frame(self) -> pd.DataFrame:
        columns = ["date", "channel", "segment_id", "n_samples", "n_dropped"]
        return pd.DataFrame(self.records, columns=columns)

    def to_dict(self) -> dict[str, Any]:
        longest = max(self.segment_lengths.values(), default=0.0)
        short = {k: v for k, v in self.segment_lengths.items() if v < longest}
        return {
            "rows": self.n_rows,
            "assigned": self.n_assigned,
            "dropped_nan": self.dropped_nan,
            "out_of_bounds": self.out_of_bounds,
            "spacing_violations": self.spacing_violations,
            "segments": len(self.segment_lengths),
            "short_segments": short,
        }


def read_raw(path: str | Path) -> list[RawInspection]:
    """Read a raw channel file, one RawInspection per date.

    Raises:
        IngestError: empty file, missing header or unparsable values
    """
    path = Path(path)
    try:
        frame = pd.read_csv(path)
    except pd.errors.EmptyDataError as e:
        raise IngestError(f"{path}: empty file") from e
    except (OSError, pd.errors.ParserError) as e:
        raise IngestError(f"{path}: cannot read raw file: {e}") from e

    missing = [c for c in RAW_COLUMNS if c not in frame.columns]
    if missing:
        raise IngestError(
            f"{path}: missing header (expected columns {', '.join(RAW_COLUMNS)}; "
            f"missing {', '.join(missing)})"
        )
    if frame.empty:
        raise IngestError(f"{path}: empty file (header only)")

    try:
        frame["date"] = pd.to_datetime(frame["date"])
        frame["position_m"] = pd.to_numeric(frame["position_m"])
        frame["deviation_mm"] = pd.to_numeric(frame["deviation_mm"])
    except (ValueError, TypeError) as e:
        raise IngestError(f"{path}: {e}") from e
    frame["channel"] = frame["channel"].astype(str)

    inspections = []
    for date, group in frame.groupby("date", sort=True):
        channels = {
            str(name): g[["position_m", "deviation_mm"]].reset_index(drop=True)
            for name, g in group.groupby("channel", sort=True)
        }
        inspections.append(RawInspection(pd.Timestamp(date), channels))
    logger.debug(f"Read {len(frame)} samples in {len(inspections)} inspections from {path}")
    return inspections


def segmentize(
    raw: RawInspection,
    config: SegmentationConfig,
    report: LoadReport | None = None,
) -> pd.DataFrame:
    """Reduce one inspection to a (segment_id x channel) table.

    Samples exactly on a segment edge belong to the segment on their right.
    NaN samples are dropped before reduction; samples outside the track
    bounds are counted and skipped. Segments without samples are NaN.

    Raises:
        IngestError: a configured channel is absent or empty
    """
    report = report if report is not None else LoadReport()
    channels = config.channels or sorted(raw.channels)
    absent = [c for c in channels if c not in raw.channels]
    if absent:
        raise IngestError(
            f"{raw.inspection_date.date()}: empty channel(s) {', '.join(absent)}"
        )

    max_position = max(
        float(np.nanmax(raw.channels[c]["position_m"].to_numpy(dtype=float))) for c in channels
    )
    n_segments = config.n_segments(max_position)
    end = config.track_start + n_segments * config.segment_length
    if config.track_end is not None:
        end = config.track_end
    for j, length in enumerate(config.segment_lengths(n_segments)):
        report.segment_lengths[j] = float(length)

    table = pd.DataFrame(index=pd.RangeIndex(n_segments, name="segment_id"), columns=channels, dtype=float)
    for name in channels:
        frame = raw.channels[name]
        report.n_rows += len(frame)
        pos = frame["position_m"].to_numpy(dtype=float)
        dev = frame["deviation_mm"].to_numpy(dtype=float)

        finite = np.isfinite(pos) & np.isfinite(dev)
        inside = finite & (pos >= config.track_start) & (pos < end)
        n_out = int(np.sum(finite & ~inside))
        if n_out:
            logger.warning(
                f"{raw.inspection_date.date()} {name}: {n_out} samples outside "
                f"[{config.track_start}, {end})"
            )
        report.out_of_bounds += n_out

        gaps = np.diff(pos[finite])
        bad = int(np.sum(np.abs(gaps - config.spacing) > config.spacing_tolerance))
        if bad:
            logger.warning(
                f"{raw.inspection_date.date()} {name}: {bad} sample gaps outside "
                f"{config.spacing} +/- {config.spacing_tolerance} m"
            )
        report.spacing_violations += bad

        seg = np.floor((pos - config.track_start) / config.segment_length)
        seg = np.clip(np.nan_to_num(seg, nan=-1.0), -1, n_segments - 1).astype(int)
        nan_dev = np.isfinite(pos) & ~np.isfinite(dev) & (pos >= config.track_start) & (pos < end)
        dropped = np.bincount(seg[nan_dev], minlength=n_segments) if nan_dev.any() else np.zeros(n_segments, int)
        report.dropped_nan += int(np.sum(~finite))

        samples = pd.DataFrame({"segment_id": seg[inside], "abs_dev": np.abs(dev[inside])})
        grouped = samples.groupby("segment_id")["abs_dev"]
        counts = grouped.size().reindex(table.index, fill_value=0)
        table[name] = _aggregate(grouped, config.statistic).reindex(table.index)

        for j in range(n_segments):
            report.records.append(
                {
                    "date": raw.inspection_date,
                    "channel": name,
                    "segment_id": j,
                    "n_samples": int(counts.iloc[j]),
                    "n_dropped": int(dropped[j]),
                }
            )
    return table


def _aggregate(grouped: Any, statistic: Reducer) -> pd.Series:
    if statistic is Reducer.MAX_ABS:
        return grouped.max()
    if statistic is Reducer.MEAN_ABS:
        return grouped.mean()
    if statistic is Reducer.STD_ABS:
        return grouped.std(ddof=0)
    return grouped.quantile(0.95)


@dataclass
class SeriesDataset:
    """All segment series of a study plus the calendar epoch of ``times == 0``."""

    series: list[SegmentSeries]
    labels: tuple[str, ...]
    epoch: pd.Timestamp
    identified: bool = False

    def __post_init__(self) -> None:
        self.labels = tuple(self.labels)
        self.epoch = pd.Timestamp(self.epoch)

    def __len__(self) -> int:
        return len(self.series)

    def __iter__(self) -> Iterator[SegmentSeries]:
        return iter(self.series)

    @property
    def segment_ids(self) -> list[int]:
        return [s.segment_id for s in self.series]

    def get(self, segment_id: int) -> SegmentSeries:
        for s in self.series:
            if s.segment_id == segment_id:
                return s
        raise DataError(f"Segment {segment_id} is not in the dataset")

    def replace(self, series: Sequence[SegmentSeries], identified: bool | None = None) -> SeriesDataset:
        return SeriesDataset(
            series=list(series),
            labels=self.labels,
            epoch=self.epoch,
            identified=self.identified if identified is None else identified,
        )

    def to_days(self, dates: Any) -> np.ndarray:
        """Days since the epoch for dates or date strings."""
        stamps = pd.to_datetime(pd.Series(dates))
        return ((stamps - self.epoch) / pd.Timedelta(days=1)).to_numpy(dtype=float)

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for s in self.series:
            frame = pd.DataFrame(s.observations, columns=list(self.labels))
            frame.insert(0, "date", self.epoch + pd.to_timedelta(s.times, unit="D"))
            frame.insert(0, "segment_id", s.segment_id)
            if self.identified:
                frame["maint_flag"] = s.flags.astype(int)
            else:
                frame["maint_flag"] = ""
            rows.append(frame)
        if not rows:
            return pd.DataFrame(columns=["segment_id", "date", *self.labels, "maint_flag"])
        return pd.concat(rows, ignore_index=True)

    def write_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        logger.info(f"Wrote {len(self.series)} segment series to {path}")

    @classmethod
    def read_csv(cls, path: str | Path) -> SeriesDataset:
        """Read a segment-series file.

        Raises:
            IngestError: unreadable file or missing columns
        """
        path = Path(path)
        try:
            frame = pd.read_csv(path, dtype={"maint_flag": str}, keep_default_na=False, na_values=[""])
        except pd.errors.EmptyDataError as e:
            raise IngestError(f"{path}: empty file") from e
        except (OSError, pd.errors.ParserError) as e:
            raise IngestError(f"{path}: cannot read segment series: {e}") from e
        for column in ("segment_id", "date", "maint_flag"):
            if column not in frame.columns:
                raise IngestError(f"{path}: missing column {column}")
        labels = tuple(c for c in frame.columns if c not in ("segment_id", "date", "maint_flag"))
        if not labels:
            raise IngestError(f"{path}: no indicator columns")
        if frame.empty:
            raise IngestError(f"{path}: no rows")
        try:
            frame["date"] = pd.to_datetime(frame["date"])
        except (ValueError, TypeError) as e:
            raise IngestError(f"{path}: {e}") from e

        flags_raw = frame["maint_flag"]
        identified = bool(flags_raw.notna().any())
        if identified:
            flags = flags_raw.fillna("0").str.strip().str.lower().map(
                {"1": True, "0": False, "true": True, "false": False}
            )
            if flags.isna().any():
                raise IngestError(f"{path}: maint_flag must be 0/1 or empty")
            frame["maint_flag"] = flags.astype(bool)
        else:
            frame["maint_flag"] = False

        epoch = frame["date"].min()
        series = []
        for sid, group in frame.sort_values(["segment_id", "date"]).groupby("segment_id", sort=True):
            times = ((group["date"] - epoch) / pd.Timedelta(days=1)).to_numpy(dtype=float)
            try:
                series.append(
                    SegmentSeries(
                        segment_id=int(sid),
                        times=times,
                        observations=group[list(labels)].to_numpy(dtype=float),
                        maint_flags=group["maint_flag"].to_numpy(dtype=bool),
                        labels=labels,
                    )
                )
            except ValueError as e:
                raise IngestError(f"{path}: {e}") from e
        logger.debug(f"Read {len(series)} segment series from {path}")
        return cls(series=series, labels=labels, epoch=epoch, identified=identified)


def assemble(
    inspections: Sequence[tuple[Any, pd.DataFrame]],
    epoch: Any = None,
) -> SeriesDataset:
    """Build one series per segment from per-inspection segment tables.

    Args:
        inspections: (date, table) pairs as returned by :func:`segmentize`
        epoch: Date of ``times == 0``; defaults to the earliest inspection

    Raises:
        DataError: two inspections share a date, or tables disagree on channels
    """
    if not inspections:
        raise DataError("No inspections to assemble")
    dates = [pd.Timestamp(d) for d, _ in inspections]
    if len(set(dates)) != len(dates):
        dup = sorted({d for d in dates if dates.count(d) > 1})
        raise DataError(f"Duplicate inspection dates: {', '.join(str(d.date()) for d in dup)}")

    labels = tuple(str(c) for c in inspections[0][1].columns)
    frames = []
    for date, table in zip(dates, (t for _, t in inspections), strict=True):
        if tuple(str(c) for c in table.columns) != labels:
            raise DataError(f"{date.date()}: channels {list(table.columns)} differ from {list(labels)}")
        frame = table.reset_index()
        frame.insert(1, "date", date)
        frames.append(frame)
    long = pd.concat(frames, ignore_index=True).dropna(subset=list(labels))
    epoch = pd.Timestamp(epoch) if epoch is not None else min(dates)

    series = []
    for sid, group in long.sort_values(["segment_id", "date"]).groupby("segment_id", sort=True):
        times = ((group["date"] - epoch) / pd.Timedelta(days=1)).to_numpy(dtype=float)
        series.append(
            SegmentSeries(
                segment_id=int(sid),
                times=times,
                observations=group[list(labels)].to_numpy(dtype=float),
                labels=labels,
            )
        )
    logger.info(f"Assembled {len(series)} segment series from {len(dates)} inspections")
    return SeriesDataset(series=series, labels=labels, epoch=epoch)


def _segmentize_file(
    path: Path, config: SegmentationConfig
) -> tuple[list[tuple[pd.Timestamp, pd.DataFrame]], LoadReport]:
    report = LoadReport()
    tables = [(raw.inspection_date, segmentize(raw, config, report)) for raw in read_raw(path)]
    return tables, report


def ingest_files(
    paths: Sequence[str | Path],
    config: SegmentationConfig,
    threads: int = 1,
) -> tuple[SeriesDataset, LoadReport]:
    """Read, segmentize and assemble raw files (one worker per file)."""
    files = [Path(p) for p in paths]
    if threads > 1 and len(files) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda p: _segmentize_file(p, config), files))
    else:
        results = [_segmentize_file(p, config) for p in files]

    report = LoadReport()
    tables: list[tuple[pd.Timestamp, pd.DataFrame]] = []
    for file_tables, file_report in results:
        tables.extend(file_tables)
        report.add(file_report)
    dataset = assemble(tables)
    logger.info(f"Ingest report: {report.to_dict()}")
    return dataset, report
