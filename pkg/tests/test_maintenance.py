"""Tests for tamping identification and work-order reconciliation."""

import numpy as np
import pandas as pd
import pytest

from trackdeg.errors import EmptySeriesError, ModelSpecificationError
from trackdeg.maintenance import (
    IdentificationConfig,
    WorkOrder,
    identify,
    identify_all,
    read_work_orders,
    report,
    write_work_orders,
)
from trackdeg.model import SegmentSeries
from trackdeg.synthgen import ScenarioSpec, TampingRule, generate, unflagged


def series_of(values, segment_id=0) -> SegmentSeries:
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    times = 90.0 * np.arange(values.shape[0])
    return SegmentSeries(segment_id, times, values)


class TestIdentify:
    def test_large_drop_flagged(self):
        s = identify(series_of([1.0, 2.0, 7.0, 2.0, 3.0]), IdentificationConfig(min_drop=0.5))
        assert s.flags.tolist() == [False, False, False, True, False]

    def test_drop_must_hit_every_indicator(self):
        values = np.array([[5.0, 5.0, 5.0, 5.0], [1.0, 1.0, 1.0, 5.5]])
        assert not identify(series_of(values)).flags.any()

    def test_any_indicator_mode(self):
        values = np.array([[5.0, 5.0], [1.0, 5.5]])
        config = IdentificationConfig(require_all=False)
        assert identify(series_of(values), config).flags.tolist() == [False, True]

    def test_exact_threshold_counts(self):
        assert identify(series_of([2.0, 1.5]), IdentificationConfig(min_drop=0.5)).flags[1]

    def test_idempotent(self, rng):
        s = series_of(np.abs(rng.normal(3.0, 2.0, (12, 3))))
        once = identify(s)
        np.testing.assert_array_equal(identify(once).flags, once.flags)

    def test_monotone_in_min_drop(self, rng):
        s = series_of(np.abs(rng.normal(3.0, 2.0, (30, 2))))
        previous = None
        for min_drop in (0.0, 0.2, 0.5, 1.0, 2.0, 4.0):
            flags = identify(s, IdentificationConfig(min_drop=min_drop)).flags
            if previous is not None:
                assert not np.any(flags & ~previous)
            previous = flags

    def test_increasing_series_never_flagged(self):
        s = series_of(np.linspace(1.0, 5.0, 10))
        assert not identify(s, IdentificationConfig(min_drop=0.0)).flags.any()

    def test_per_indicator_drops(self):
        values = np.array([[5.0, 5.0], [4.0, 4.8]])
        assert identify(series_of(values), IdentificationConfig(min_drop=[0.5, 0.1])).flags[1]
        assert not identify(series_of(values), IdentificationConfig(min_drop=[0.5, 0.5])).flags[1]
        with pytest.raises(ModelSpecificationError):
            identify(series_of(values), IdentificationConfig(min_drop=[0.5, 0.5, 0.5]))

    def test_negative_min_drop_rejected(self):
        with pytest.raises(ValueError):
            IdentificationConfig(min_drop=-1.0)

    def test_single_observation(self):
        with pytest.raises(EmptySeriesError):
            identify(series_of([1.0]))
        assert identify_all([series_of([1.0])])[0].flags.tolist() == [False]


class TestReport:
    def test_without_work_orders(self):
        s = identify(series_of([1.0, 5.0, 1.0, 2.0, 6.0, 1.0]))
        result = report([s])
        assert result.to_dict() == {"segments": 1, "flagged": 2}
        assert len(result.to_frame()) == 2

    def test_one_match(self):
        s = identify(series_of([1.0, 5.0, 1.0, 2.0], segment_id=3))
        result = report([s], [WorkOrder(3, 150.0)])
        assert (result.matches, result.geometry_only, result.workorder_only) == (1, 0, 0)

    def test_interval_is_left_open(self):
        s = identify(series_of([1.0, 5.0, 1.0, 2.0], segment_id=3))
        # the tamped interval is (90, 180]
        assert report([s], [WorkOrder(3, 90.0)]).workorder_only == 1
        assert report([s], [WorkOrder(3, 180.0)]).matches == 1

    def test_other_segment_does_not_match(self):
        s = identify(series_of([1.0, 5.0, 1.0, 2.0], segment_id=3))
        result = report([s], [WorkOrder(4, 150.0)])
        assert (result.matches, result.geometry_only, result.workorder_only) == (0, 1, 1)

    def test_ineffective_tampings_are_workorder_only(self):
        spec = ScenarioSpec(
            n_segments=20, n_indicators=2, n_inspections=20,
            drift=[0.02, 0.02], marginal_sd=[0.02, 0.02], initial=1.0,
            tamping_rule=TampingRule.THRESHOLD, tamping_threshold=5.0,
            ineffective_fraction=0.3, seed=7,
        )
        dataset, truth = generate(spec)
        assert truth.ineffective
        flagged = identify_all(unflagged(dataset).series)
        result = report(flagged, truth.work_orders)
        assert result.workorder_only >= len(truth.ineffective)
        assert result.matches == truth.n_events


def test_recovers_simulated_tamping():
    spec = ScenarioSpec(
        n_segments=20, n_indicators=2, n_inspections=25,
        drift=[0.02, 0.02], marginal_sd=[0.05, 0.05], initial=1.0,
        tamping_rule=TampingRule.THRESHOLD, tamping_threshold=5.0, seed=1,
    )
    dataset, truth = generate(spec)
    flagged = identify_all(unflagged(dataset).series, IdentificationConfig(min_drop=0.5))
    predicted = np.concatenate([s.flags for s in flagged])
    actual = np.concatenate([truth.flags[s.segment_id] for s in flagged])
    tp = np.sum(predicted & actual)
    assert tp / predicted.sum() >= 0.95
    assert tp / actual.sum() >= 0.95


def test_work_order_file(tmp_path):
    epoch = pd.Timestamp("2021-03-01")
    orders = [WorkOrder(2, 10.0), WorkOrder(5, 400.0)]
    path = tmp_path / "work_orders.csv"
    write_work_orders(orders, path, epoch)
    assert path.read_text().splitlines()[0] == "segment_id,date"
    assert read_work_orders(path, epoch) == orders


def test_empty_work_order_file(tmp_path):
    path = tmp_path / "work_orders.csv"
    path.write_text("")
    assert read_work_orders(path, pd.Timestamp("2021-01-01")) == []
