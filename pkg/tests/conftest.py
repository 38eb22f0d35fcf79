"""Shared fixtures."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from trackdeg.model import SegmentSeries, WienerParams
from trackdeg.posterior import PosteriorSamples, SegmentAnchor

FIXTURES = Path(__file__).parent / "fixtures"

LABELS4 = ("top_l", "top_r", "align_l", "align_r")


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)


def random_correlation(q: int, rng: np.random.Generator) -> np.ndarray:
    a = rng.standard_normal((q, q + 2))
    cov = a @ a.T
    d = np.sqrt(np.diag(cov))
    corr = cov / d[:, None] / d[None, :]
    np.fill_diagonal(corr, 1.0)
    return 0.5 * (corr + corr.T)


def random_params(q: int, rng: np.random.Generator, diagonal: bool = False) -> WienerParams:
    corr = np.eye(q) if diagonal or q == 1 else random_correlation(q, rng)
    return WienerParams(
        drift=rng.uniform(0.0, 0.1, q),
        marginal_sd=rng.uniform(0.05, 0.5, q),
        correlation=corr,
    )


def random_series(
    q: int,
    rng: np.random.Generator,
    n_obs: int = 10,
    maint: tuple[int, ...] = (),
    segment_id: int = 0,
) -> SegmentSeries:
    times = np.cumsum(np.concatenate([[0.0], rng.uniform(60.0, 120.0, n_obs - 1)]))
    obs = np.abs(rng.normal(3.0, 1.0, (n_obs, q))) + 0.1
    flags = np.zeros(n_obs, dtype=bool)
    flags[list(maint)] = True
    return SegmentSeries(segment_id, times, obs, flags)


def fixed_posterior(
    params: dict[int, WienerParams],
    start: float | tuple[float, ...] = 0.0,
    labels: tuple[str, ...] | None = None,
    n_draws: int = 1,
) -> PosteriorSamples:
    """A degenerate posterior anchored at ``start`` at time 0."""
    anchors = {}
    for sid, p in params.items():
        values = start if isinstance(start, tuple) else (float(start),) * p.n_indicators
        anchors[sid] = SegmentAnchor(0.0, values)
    return PosteriorSamples.from_fixed(params, labels=labels, n_draws=n_draws, anchors=anchors)


def write_raw_file(
    path: Path,
    dates: list[str],
    channels: tuple[str, ...] = ("top_l", "align_l"),
    length_m: float = 250.0,
    spacing: float = 0.25,
    seed: int = 0,
) -> pd.DataFrame:
    """A raw channel file; deviations grow with the inspection index."""
    gen = np.random.default_rng(seed)
    positions = np.arange(0.0, length_m, spacing)
    frames = []
    for i, date in enumerate(dates):
        for name in channels:
            frames.append(
                pd.DataFrame(
                    {
                        "date": date,
                        "channel": name,
                        "position_m": positions,
                        "deviation_mm": gen.normal(0.0, 1.0 + 0.2 * i, positions.size),
                    }
                )
            )
    frame = pd.concat(frames, ignore_index=True)
    frame.to_csv(path, index=False)
    return frame
