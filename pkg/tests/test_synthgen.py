"""Tests for the synthetic scenario generator."""

import numpy as np
import pandas as pd
import pytest
from pydantic import ValidationError

from trackdeg.model import check_correlation
from trackdeg.synthgen import (
    ScenarioSpec,
    TampingRule,
    ZplusDistribution,
    generate,
    unflagged,
)

SIGMA3 = np.array([[0.04, 0.018, 0.0], [0.018, 0.09, -0.012], [0.0, -0.012, 0.01]])


def test_zero_noise_constant():
    spec = ScenarioSpec(n_segments=3, n_indicators=2, drift=0.0, marginal_sd=0.0, initial=2.0)
    dataset, truth = generate(spec)
    for s in dataset:
        np.testing.assert_array_equal(s.observations, 2.0)
    # no valid Wiener parameters without noise
    assert truth.params == {}


def test_zero_noise_truth_keeps_tamping():
    spec = ScenarioSpec(
        n_segments=2, n_indicators=1, n_inspections=7,
        drift=0.01, marginal_sd=0.0, initial=1.0,
        tamping_rule=TampingRule.SCHEDULED, tamping_every=3,
    )
    _, truth = generate(spec)
    frame = truth.to_frame()
    assert not frame["parameter"].str.startswith("mu").any()
    assert (frame["parameter"] == "tamped[3]").sum() == 2
    assert (frame["parameter"] == "tamped[6]").sum() == 2


def test_zero_noise_linear_drift():
    spec = ScenarioSpec(n_segments=2, n_indicators=2, drift=[0.01, 0.02], marginal_sd=0.0, initial=1.0)
    dataset, _ = generate(spec)
    for s in dataset:
        expected = 1.0 + np.outer(s.times, [0.01, 0.02])
        np.testing.assert_allclose(s.observations, expected, rtol=1e-12)


def test_increment_covariance():
    sd = np.sqrt(np.diag(SIGMA3))
    corr = SIGMA3 / np.outer(sd, sd)
    drift = np.array([0.02, 0.01, 0.005])
    spec = ScenarioSpec(
        n_segments=200, n_indicators=3, n_inspections=50,
        drift=drift.tolist(), marginal_sd=sd.tolist(), correlation=corr.tolist(),
        initial=1.0, seed=5,
    )
    dataset, _ = generate(spec)
    scaled = []
    for s in dataset:
        dt = np.diff(s.times)[:, None]
        scaled.append((np.diff(s.observations, axis=0) - drift * dt) / np.sqrt(dt))
    estimate = np.cov(np.concatenate(scaled), rowvar=False)
    np.testing.assert_allclose(np.diag(estimate), np.diag(SIGMA3), rtol=0.05)
    scale = np.sqrt(np.outer(np.diag(SIGMA3), np.diag(SIGMA3)))
    assert np.all(np.abs(estimate - SIGMA3) <= 0.05 * scale)


def test_threshold_rule():
    spec = ScenarioSpec(
        n_segments=10, n_indicators=2, n_inspections=30,
        drift=[0.03, 0.01], marginal_sd=0.05, initial=1.0,
        tamping_rule=TampingRule.THRESHOLD, tamping_threshold=[6.0, 4.0], seed=2,
    )
    dataset, truth = generate(spec)
    assert truth.n_events > 0
    for s in dataset:
        for k in range(1, s.n_obs):
            over = np.any(s.observations[k - 1] >= [6.0, 4.0])
            assert s.flags[k] == over
    assert len(truth.work_orders) == truth.n_events


def test_scheduled_rule():
    spec = ScenarioSpec(
        n_segments=2, n_indicators=1, n_inspections=13,
        drift=0.01, marginal_sd=0.01, initial=1.0,
        tamping_rule=TampingRule.SCHEDULED, tamping_every=4,
    )
    dataset, truth = generate(spec)
    for s in dataset:
        assert s.maintenance_intervals == [4, 8, 12]
    assert set(truth.zplus) == {(sid, k) for sid in (0, 1) for k in (4, 8, 12)}


def test_ineffective_tamping_recorded():
    spec = ScenarioSpec(
        n_segments=5, n_indicators=1, n_inspections=30,
        drift=0.01, marginal_sd=0.01, initial=1.0,
        tamping_rule=TampingRule.SCHEDULED, tamping_every=3,
        ineffective_fraction=0.5, seed=3,
    )
    dataset, truth = generate(spec)
    assert truth.ineffective
    for sid, k in truth.ineffective:
        assert not dataset.get(sid).flags[k]
    assert len(truth.work_orders) == truth.n_events + len(truth.ineffective)


def test_inspection_times():
    spec = ScenarioSpec(n_segments=4, n_indicators=1, n_inspections=40, interval_days=60, jitter_days=10)
    dataset, _ = generate(spec)
    for s in dataset:
        assert s.times[0] == 0.0
        gaps = np.diff(s.times)
        assert np.all((gaps >= 50) & (gaps <= 70))


def test_deterministic():
    spec = ScenarioSpec(n_segments=3, seed=9)
    a, truth_a = generate(spec)
    b, truth_b = generate(spec)
    pd.testing.assert_frame_equal(a.to_frame(), b.to_frame())
    pd.testing.assert_frame_equal(truth_a.to_frame(), truth_b.to_frame())
    c, _ = generate(spec.model_copy(update={"seed": 10}))
    assert not a.to_frame().equals(c.to_frame())


def test_hierarchical_segments_differ():
    spec = ScenarioSpec(n_segments=5, n_indicators=3, eta=2.0, seed=1)
    _, truth = generate(spec)
    drifts = np.stack([p.drift for p in truth.params.values()])
    assert np.unique(drifts[:, 0]).size == 5
    for p in truth.params.values():
        check_correlation(p.corr)
    assert set(truth.hyper) == {"s_mu", "s_sigma", "m_z", "s_z"}


def test_truncnorm_post_tamping_values_positive():
    spec = ScenarioSpec(
        n_segments=5, n_indicators=2, n_inspections=20,
        drift=0.01, marginal_sd=0.01, initial=1.0, s_z=2.0,
        zplus_distribution=ZplusDistribution.TRUNCNORM,
        tamping_rule=TampingRule.SCHEDULED, tamping_every=2,
    )
    _, truth = generate(spec)
    assert all(np.all(v > 0.0) for v in truth.zplus.values())


def test_truth_frame(tmp_path):
    spec = ScenarioSpec(
        n_segments=2, n_indicators=2, n_inspections=10,
        drift=0.01, marginal_sd=0.05, initial=1.0,
        tamping_rule=TampingRule.SCHEDULED, tamping_every=5,
    )
    _, truth = generate(spec)
    frame = truth.to_frame()
    assert list(frame.columns) == ["parameter", "segment", "value"]
    mu = frame[frame["parameter"] == "mu[1]"]
    assert mu["segment"].tolist() == [0, 1]
    assert mu["value"].tolist() == [0.01, 0.01]
    assert (frame["parameter"] == "zplus[5][0]").sum() == 2
    truth.write_csv(tmp_path / "truth.csv")
    assert len(pd.read_csv(tmp_path / "truth.csv")) == len(frame)


def test_unflagged():
    spec = ScenarioSpec(
        n_segments=2, n_indicators=1, drift=0.01, marginal_sd=0.01, initial=1.0,
        tamping_rule=TampingRule.SCHEDULED, tamping_every=3,
    )
    dataset, _ = generate(spec)
    assert dataset.identified
    cleared = unflagged(dataset)
    assert not cleared.identified
    assert not any(s.flags.any() for s in cleared)
    np.testing.assert_array_equal(cleared.get(1).observations, dataset.get(1).observations)


class TestValidation:
    def test_threshold_at_initial(self):
        with pytest.raises(ValidationError, match="above the initial"):
            ScenarioSpec(
                n_indicators=1, initial=3.0,
                tamping_rule=TampingRule.THRESHOLD, tamping_threshold=3.0,
            )

    def test_threshold_required(self):
        with pytest.raises(ValidationError):
            ScenarioSpec(tamping_rule=TampingRule.THRESHOLD)

    def test_schedule_required(self):
        with pytest.raises(ValidationError):
            ScenarioSpec(tamping_rule=TampingRule.SCHEDULED)

    def test_jitter_below_interval(self):
        with pytest.raises(ValidationError):
            ScenarioSpec(interval_days=30, jitter_days=30)

    def test_drift_and_sd_together(self):
        with pytest.raises(ValidationError):
            ScenarioSpec(drift=0.01)

    def test_vector_length(self):
        with pytest.raises(ValidationError):
            ScenarioSpec(n_indicators=3, drift=[0.1, 0.2], marginal_sd=0.1)

    def test_invalid_correlation(self):
        with pytest.raises(ValidationError):
            ScenarioSpec(n_indicators=2, drift=0.1, marginal_sd=0.1, correlation=[[1.0, 2.0], [2.0, 1.0]])

    def test_unknown_field(self):
        with pytest.raises(ValidationError):
            ScenarioSpec(n_segmentz=3)
