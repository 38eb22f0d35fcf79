"""Tests for posterior storage and summaries."""

import json

import numpy as np
import pytest

from tests.conftest import random_params
from trackdeg.errors import IngestError, ModelSpecificationError
from trackdeg.model import WienerParams
from trackdeg.posterior import (
    ModelKind,
    PosteriorSamples,
    SegmentAnchor,
    correlation_summary,
    summarize,
    zplus_predictive,
)


@pytest.fixture
def samples(rng) -> PosteriorSamples:
    c, d, s, q = 2, 30, 2, 3
    corr = np.stack([random_params(q, rng).corr for _ in range(s)])
    return PosteriorSamples(
        model_kind=ModelKind.MULTIVARIATE,
        labels=("a", "b", "c"),
        segment_ids=[4, 9],
        drift=rng.uniform(0.0, 0.1, (c, d, s, q)),
        marginal_sd=rng.uniform(0.1, 0.5, (c, d, s, q)),
        correlation=np.broadcast_to(corr, (c, d, s, q, q)).copy(),
        events=[(9, 3)],
        zplus=rng.uniform(0.5, 2.0, (c, d, 1, q)),
        s_mu=rng.uniform(0.1, 1.0, (c, d, q)),
        s_sigma=rng.uniform(0.1, 1.0, (c, d, q)),
        m_z=rng.normal(0.0, 0.3, (c, d, q)),
        s_z=rng.uniform(0.1, 0.5, (c, d, q)),
        log_posterior=rng.normal(-100.0, 1.0, (c, d)),
        acceptance={"mu": [0.31, 0.28]},
        anchors={4: SegmentAnchor(700.0, (1.0, 2.0, 3.0)), 9: SegmentAnchor(710.0, (0.5, 0.6, 0.7))},
    )


class TestColumns:
    def test_column_names(self, samples):
        columns = list(samples.to_frame().columns)
        assert columns[:3] == ["chain", "draw", "lp"]
        for name in ("mu[4][0]", "sigma[9][2]", "R[4][0][2]", "zplus[9][3][1]", "hyper.s_mu[0]", "hyper.s_z[2]"):
            assert name in columns
        # upper triangle only
        assert "R[4][2][0]" not in columns
        assert "R[4][1][1]" not in columns

    def test_univariate_has_no_correlation_columns(self, samples):
        samples.model_kind = ModelKind.UNIVARIATE
        assert not any(c.startswith("R[") for c in samples.to_frame().columns)

    def test_one_row_per_draw(self, samples):
        frame = samples.to_frame()
        assert len(frame) == 60
        assert frame["chain"].tolist() == [0] * 30 + [1] * 30


class TestPersistence:
    def test_write_read(self, samples, tmp_path):
        path = tmp_path / "posterior.csv"
        samples.write_csv(path)
        back = PosteriorSamples.read_csv(path)
        assert back.labels == samples.labels
        assert back.segment_ids == [4, 9]
        assert back.events == [(9, 3)]
        assert back.anchors == samples.anchors
        assert back.acceptance == samples.acceptance
        for name in ("drift", "marginal_sd", "correlation", "zplus", "m_z", "log_posterior"):
            np.testing.assert_allclose(getattr(back, name), getattr(samples, name), rtol=1e-15)

    def test_metadata_header(self, samples, tmp_path):
        path = tmp_path / "posterior.csv"
        samples.write_csv(path)
        header = path.read_text().splitlines()[0]
        assert header.startswith("# ")
        meta = json.loads(header[2:])
        assert meta["model_kind"] == "multivariate"
        assert meta["anchors"]["4"]["time"] == 700.0

    def test_byte_identical(self, samples, tmp_path):
        samples.write_csv(tmp_path / "a.csv")
        samples.write_csv(tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_missing_header(self, tmp_path):
        path = tmp_path / "posterior.csv"
        path.write_text("chain,draw,lp\n0,0,1.0\n")
        with pytest.raises(IngestError, match="metadata"):
            PosteriorSamples.read_csv(path)


class TestAccess:
    def test_segment_draws(self, samples):
        drift, sd, corr = samples.segment_draws(9)
        assert drift.shape == (60, 3)
        np.testing.assert_array_equal(drift[30], samples.drift[1, 0, 1])
        assert corr.shape == (60, 3, 3)

    def test_unknown_segment(self, samples):
        with pytest.raises(ModelSpecificationError):
            samples.segment_draws(5)

    def test_iter_params(self, samples):
        params = list(samples.iter_params(4))
        assert len(params) == 60
        assert isinstance(params[0], WienerParams)

    def test_from_fixed(self):
        p = WienerParams([0.1, 0.2], [0.3, 0.4], [[1.0, 0.5], [0.5, 1.0]])
        fixed = PosteriorSamples.from_fixed({2: p}, labels=("x", "y"), n_chains=3, n_draws=4)
        assert (fixed.n_chains, fixed.n_draws) == (3, 4)
        drift, _, corr = fixed.segment_draws(2)
        assert np.all(drift == [0.1, 0.2])
        assert np.all(corr[:, 0, 1] == 0.5)


class TestSummaries:
    def test_summarize(self, samples):
        table = summarize(samples)
        assert {"mean", "sd", "q2.5", "q50", "q97.5", "split_rhat", "ess"} <= set(table.columns)
        assert table.loc["mu[4][0]", "mean"] == pytest.approx(samples.drift[:, :, 0, 0].mean())
        assert table.loc["mu[4][0]", "q2.5"] <= table.loc["mu[4][0]", "q97.5"]

    def test_zplus_predictive(self, samples):
        draws = zplus_predictive(samples, 500, seed=0)
        assert list(draws.columns) == ["a", "b", "c"]
        assert len(draws) == 500
        assert (draws.to_numpy() > 0).all()
        np.testing.assert_array_equal(draws, zplus_predictive(samples, 500, seed=0))

    def test_correlation_summary(self, samples):
        mean = correlation_summary(samples)
        np.testing.assert_allclose(np.diag(mean), 1.0)
        expected = samples.correlation[:, :, :, 0, 1].mean()
        assert mean.loc["a", "b"] == pytest.approx(expected)
