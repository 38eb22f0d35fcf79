"""Tests for raw channel loading, segmentation and series assembly."""

import numpy as np
import pandas as pd
import pytest

from tests.conftest import write_raw_file
from trackdeg.errors import DataError, IngestError
from trackdeg.ingest import (
    LoadReport,
    RawInspection,
    Reducer,
    SegmentationConfig,
    SeriesDataset,
    assemble,
    ingest_files,
    read_raw,
    reduce_abs,
    segmentize,
)

DATES = ["2021-01-10", "2021-04-12", "2021-07-15"]


def inspection(positions, deviations, date="2021-01-10", channel="top_l") -> RawInspection:
    frame = pd.DataFrame({"position_m": positions, "deviation_mm": deviations})
    return RawInspection(pd.Timestamp(date), {channel: frame})


def table(values: dict[str, list[float]]) -> pd.DataFrame:
    frame = pd.DataFrame(values, dtype=float)
    frame.index.name = "segment_id"
    return frame


class TestReducers:
    @pytest.mark.parametrize("statistic", [Reducer.MAX_ABS, Reducer.MEAN_ABS, Reducer.P95_ABS])
    def test_constant(self, statistic):
        assert reduce_abs(np.full(40, 3.0), statistic) == pytest.approx(3.0)

    def test_constant_spread(self):
        assert reduce_abs(np.full(40, -3.0), Reducer.STD_ABS) == 0.0

    def test_absolute_values(self):
        assert reduce_abs([-5.0, 2.0, 4.0], Reducer.MAX_ABS) == 5.0
        assert reduce_abs([-5.0, 2.0, 4.0], Reducer.MEAN_ABS) == pytest.approx(11.0 / 3.0)

    def test_empty(self):
        assert np.isnan(reduce_abs([], Reducer.MAX_ABS))


class TestSegmentize:
    def test_matches_brute_force(self, tmp_path):
        raw = write_raw_file(tmp_path / "raw.csv", DATES[:1], length_m=250.0, seed=3)
        (insp,) = read_raw(tmp_path / "raw.csv")
        for statistic in Reducer:
            config = SegmentationConfig(segment_length=100.0, statistic=statistic)
            result = segmentize(insp, config)
            assert list(result.index) == [0, 1, 2]
            for channel in ("top_l", "align_l"):
                rows = raw[raw["channel"] == channel]
                for j in range(3):
                    inside = (rows["position_m"] >= 100.0 * j) & (rows["position_m"] < 100.0 * (j + 1))
                    expected = reduce_abs(rows.loc[inside, "deviation_mm"].to_numpy(), statistic)
                    assert result.loc[j, channel] == pytest.approx(expected, rel=1e-12)

    def test_edge_sample_goes_right(self):
        insp = inspection([99.75, 100.0, 100.25], [1.0, 9.0, 2.0])
        result = segmentize(insp, SegmentationConfig(segment_length=100.0, spacing_tolerance=1.0))
        assert result.loc[0, "top_l"] == 1.0
        assert result.loc[1, "top_l"] == 9.0

    def test_nan_dropped(self):
        insp = inspection([0.0, 0.25, 0.5], [1.0, np.nan, 2.0])
        report = LoadReport()
        result = segmentize(insp, SegmentationConfig(), report)
        assert result.loc[0, "top_l"] == 2.0
        assert report.dropped_nan == 1
        assert report.records[0]["n_dropped"] == 1

    def test_out_of_bounds_counted(self):
        insp = inspection(np.arange(-1.0, 160.0, 0.25), np.ones(644))
        report = LoadReport()
        config = SegmentationConfig(track_end=150.0)
        result = segmentize(insp, config, report)
        assert len(result) == 2
        assert report.out_of_bounds == 4 + 40
        assert report.to_dict()["short_segments"] == {1: 50.0}

    def test_samples_conserved(self, tmp_path):
        raw = write_raw_file(tmp_path / "raw.csv", DATES[:1], length_m=300.0)
        raw.loc[::37, "deviation_mm"] = np.nan
        raw.to_csv(tmp_path / "raw.csv", index=False)
        (insp,) = read_raw(tmp_path / "raw.csv")
        report = LoadReport()
        segmentize(insp, SegmentationConfig(segment_length=70.0, track_end=280.0), report)
        assert report.n_assigned + report.out_of_bounds + report.dropped_nan == report.n_rows

    def test_spacing_violations(self):
        insp = inspection([0.0, 0.25, 0.5, 2.0], [1.0, 1.0, 1.0, 1.0])
        report = LoadReport()
        segmentize(insp, SegmentationConfig(), report)
        assert report.spacing_violations == 1

    def test_empty_segment_is_nan(self):
        insp = inspection([0.0, 250.0], [1.0, 1.0])
        result = segmentize(insp, SegmentationConfig(spacing_tolerance=1000.0))
        assert np.isnan(result.loc[1, "top_l"])

    def test_missing_channel(self):
        with pytest.raises(IngestError, match="align_l"):
            segmentize(inspection([0.0], [1.0]), SegmentationConfig(channels=["top_l", "align_l"]))

    def test_decreasing_positions(self):
        with pytest.raises(IngestError):
            inspection([1.0, 0.5], [1.0, 1.0])


class TestReadRaw:
    def test_groups_by_date(self, tmp_path):
        write_raw_file(tmp_path / "raw.csv", DATES)
        inspections = read_raw(tmp_path / "raw.csv")
        assert [i.inspection_date for i in inspections] == [pd.Timestamp(d) for d in DATES]
        assert sorted(inspections[0].channels) == ["align_l", "top_l"]

    def test_missing_header(self, tmp_path):
        path = tmp_path / "raw.csv"
        path.write_text("2021-01-01,top_l,0.0,1.0\n2021-01-01,top_l,0.25,1.1\n")
        with pytest.raises(IngestError, match="missing header"):
            read_raw(path)

    def test_empty(self, tmp_path):
        path = tmp_path / "raw.csv"
        path.write_text("")
        with pytest.raises(IngestError, match="empty"):
            read_raw(path)

    def test_header_only(self, tmp_path):
        path = tmp_path / "raw.csv"
        path.write_text("date,channel,position_m,deviation_mm\n")
        with pytest.raises(IngestError, match="empty"):
            read_raw(path)


class TestAssemble:
    def test_three_inspections_two_segments(self):
        tables = [(d, table({"a": [1.0 + i, 2.0 + i]})) for i, d in enumerate(DATES)]
        dataset = assemble(tables)
        assert dataset.segment_ids == [0, 1]
        assert all(s.n_obs == 3 for s in dataset)
        np.testing.assert_array_equal(dataset.get(1).observations[:, 0], [2.0, 3.0, 4.0])
        assert dataset.get(0).times[0] == 0.0
        assert dataset.get(0).times[1] == 92.0

    def test_gap(self):
        tables = [
            (DATES[0], table({"a": [1.0, 2.0]})),
            (DATES[1], table({"a": [1.5, np.nan]})),
            (DATES[2], table({"a": [2.0, 3.0]})),
        ]
        dataset = assemble(tables)
        assert dataset.get(0).n_obs == 3
        assert dataset.get(1).n_obs == 2

    def test_order_invariant(self, rng):
        tables = [(d, table({"a": rng.uniform(0, 5, 4), "b": rng.uniform(0, 5, 4)})) for d in DATES]
        reference = assemble(tables).to_frame()
        for order in ([2, 0, 1], [1, 2, 0]):
            shuffled = assemble([tables[i] for i in order]).to_frame()
            pd.testing.assert_frame_equal(shuffled, reference)

    def test_duplicate_dates(self):
        tables = [(DATES[0], table({"a": [1.0]})), (DATES[0], table({"a": [2.0]}))]
        with pytest.raises(DataError, match="Duplicate"):
            assemble(tables)

    def test_channel_mismatch(self):
        tables = [(DATES[0], table({"a": [1.0]})), (DATES[1], table({"b": [2.0]}))]
        with pytest.raises(DataError):
            assemble(tables)


class TestSeriesFile:
    def test_write_read(self, tmp_path, rng):
        tables = [(d, table({"top_l": rng.uniform(0, 5, 3), "align_l": rng.uniform(0, 5, 3)})) for d in DATES]
        dataset = assemble(tables)
        path = tmp_path / "segment_series.csv"
        dataset.write_csv(path)
        back = SeriesDataset.read_csv(path)
        assert back.labels == ("top_l", "align_l")
        assert not back.identified
        for a, b in zip(dataset, back, strict=True):
            np.testing.assert_allclose(b.times, a.times, atol=1e-9)
            np.testing.assert_allclose(b.observations, a.observations, rtol=1e-9)

    def test_flags_survive(self, tmp_path):
        tables = [(d, table({"a": [5.0 - 2.0 * i]})) for i, d in enumerate(DATES)]
        dataset = assemble(tables)
        flagged = dataset.replace([dataset.get(0).with_flags([False, True, False])], identified=True)
        path = tmp_path / "flagged.csv"
        flagged.write_csv(path)
        back = SeriesDataset.read_csv(path)
        assert back.identified
        assert back.get(0).flags.tolist() == [False, True, False]

    def test_missing_column(self, tmp_path):
        path = tmp_path / "series.csv"
        path.write_text("segment_id,date,a\n0,2021-01-01,1.0\n")
        with pytest.raises(IngestError, match="maint_flag"):
            SeriesDataset.read_csv(path)

    def test_bad_flag(self, tmp_path):
        path = tmp_path / "series.csv"
        path.write_text("segment_id,date,a,maint_flag\n0,2021-01-01,1.0,0\n0,2021-02-01,1.0,maybe\n")
        with pytest.raises(IngestError):
            SeriesDataset.read_csv(path)


def test_ingest_files_threads_agree(tmp_path):
    paths = []
    for i, date in enumerate(DATES):
        path = tmp_path / f"raw_{i}.csv"
        write_raw_file(path, [date], seed=i)
        paths.append(path)
    config = SegmentationConfig(segment_length=50.0)
    serial, report = ingest_files(paths, config)
    threaded, _ = ingest_files(paths, config, threads=3)
    pd.testing.assert_frame_equal(serial.to_frame(), threaded.to_frame())
    assert len(serial) == 5
    assert report.n_rows == 3 * 2 * 1000
