"""Posterior draws of the hierarchical model, their file format and summaries.

Columnar file format: a single ``#``-prefixed JSON metadata line followed by a
CSV table with one row per (chain, draw) and one column per scalar parameter:

    chain, draw, lp, mu[i][q], sigma[i][q], R[i][q1][q2] (q1 < q2),
    zplus[i][k][q], hyper.s_mu[q], hyper.s_sigma[q], hyper.m_z[q], hyper.s_z[q]

``i`` is the segment id, ``k`` the maintenance interval index and ``q`` the
zero-based indicator index.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from trackdeg.errors import IngestError, ModelSpecificationError
from trackdeg.model import SeedLike, WienerParams, as_generator, default_labels

logger = logging.getLogger(__name__)

FORMAT_TAG = "trackdeg-posterior/1"
FLOAT_FORMAT = "%.17g"


class ModelKind(Enum):
    """Which Wiener model a posterior belongs to."""

    MULTIVARIATE = "multivariate"
    UNIVARIATE = "univariate"


@dataclass(frozen=True)
class SegmentAnchor:
    """Last training observation of a segment, the start of forward predictions."""

    time: float
    values: tuple[float, ...]


@dataclass
class PosteriorSamples:
    """MCMC draws of every model parameter.

    Array shapes use C chains, D draws, S segments, E maintenance events and
    Q indicators.
    """

    model_kind: ModelKind
    labels: tuple[str, ...]
    segment_ids: list[int]
    drift: np.ndarray  # (C, D, S, Q)
    marginal_sd: np.ndarray  # (C, D, S, Q)
    correlation: np.ndarray  # (C, D, S, Q, Q)
    events: list[tuple[int, int]]  # (segment_id, interval index)
    zplus: np.ndarray  # (C, D, E, Q)
    s_mu: np.ndarray  # (C, D, Q)
    s_sigma: np.ndarray
    m_z: np.ndarray
    s_z: np.ndarray
    log_posterior: np.ndarray  # (C, D)
    eta: float = 1.0
    acceptance: dict[str, list[float]] = field(default_factory=dict)
    anchors: dict[int, SegmentAnchor] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.labels = tuple(self.labels)
        self.segment_ids = [int(s) for s in self.segment_ids]
        self.events = [(int(i), int(k)) for i, k in self.events]
        self._index = {sid: j for j, sid in enumerate(self.segment_ids)}
        self._diagnostics: dict[str, Any] | None = None

    @property
    def n_chains(self) -> int:
        return int(self.drift.shape[0])

    @property
    def n_draws(self) -> int:
        return int(self.drift.shape[1])

    @property
    def n_indicators(self) -> int:
        return len(self.labels)

    def segment_index(self, segment_id: int) -> int:
        if segment_id not in self._index:
            raise ModelSpecificationError(f"Segment {segment_id} is not in the posterior")
        return self._index[segment_id]

    def segment_draws(self, segment_id: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Flattened (C*D) drift, marginal sd and correlation draws of one segment."""
        j = self.segment_index(segment_id)
        n = self.n_chains * self.n_draws
        q = self.n_indicators
        return (
            self.drift[:, :, j, :].reshape(n, q),
            self.marginal_sd[:, :, j, :].reshape(n, q),
            self.correlation[:, :, j, :, :].reshape(n, q, q),
        )

    def iter_params(self, segment_id: int) -> Iterator[WienerParams]:
        """WienerParams for each flattened draw of a segment."""
        drift, sd, corr = self.segment_draws(segment_id)
        for d in range(drift.shape[0]):
            yield WienerParams(drift[d], sd[d], corr[d])

    # ------------------------------------------------------------------
    # Scalar parameter view
    # ------------------------------------------------------------------

    def scalar_parameters(self) -> dict[str, np.ndarray]:
        """Every scalar parameter as a (C, D) array, keyed by column name."""
        out: dict[str, np.ndarray] = {}
        q_range = range(self.n_indicators)
        for j, sid in enumerate(self.segment_ids):
            for q in q_range:
                out[f"mu[{sid}][{q}]"] = self.drift[:, :, j, q]
        for j, sid in enumerate(self.segment_ids):
            for q in q_range:
                out[f"sigma[{sid}][{q}]"] = self.marginal_sd[:, :, j, q]
        if self.model_kind is ModelKind.MULTIVARIATE:
            for j, sid in enumerate(self.segment_ids):
                for q1 in q_range:
                    for q2 in range(q1 + 1, self.n_indicators):
                        out[f"R[{sid}][{q1}][{q2}]"] = self.correlation[:, :, j, q1, q2]
        for e, (sid, k) in enumerate(self.events):
            for q in q_range:
                out[f"zplus[{sid}][{k}][{q}]"] = self.zplus[:, :, e, q]
        for name in ("s_mu", "s_sigma", "m_z", "s_z"):
            arr = getattr(self, name)
            for q in q_range:
                out[f"hyper.{name}[{q}]"] = arr[:, :, q]
        return out

    def to_frame(self) -> pd.DataFrame:
        """One row per (chain, draw), one column per scalar parameter."""
        c, d = self.n_chains, self.n_draws
        columns: dict[str, np.ndarray] = {
            "chain": np.repeat(np.arange(c), d),
            "draw": np.tile(np.arange(d), c),
            "lp": self.log_posterior.reshape(-1),
        }
        for name, draws in self.scalar_parameters().items():
            columns[name] = draws.reshape(-1)
        return pd.DataFrame(columns)

    def metadata(self) -> dict[str, Any]:
        return {
            "format": FORMAT_TAG,
            "model_kind": self.model_kind.value,
            "labels": list(self.labels),
            "segment_ids": self.segment_ids,
            "events": [list(e) for e in self.events],
            "eta": self.eta,
            "acceptance": self.acceptance,
            "anchors": {
                str(sid): {"time": a.time, "values": list(a.values)}
                for sid, a in sorted(self.anchors.items())
            },
        }

    def write_csv(self, path: str | Path) -> None:
        """Write the columnar posterior file (byte-identical for identical draws)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            fh.write("# " + json.dumps(self.metadata(), sort_keys=True) + "\n")
            self.to_frame().to_csv(fh, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        logger.info(f"Wrote {self.n_chains}x{self.n_draws} posterior draws to {path}")

    @classmethod
    def read_csv(cls, path: str | Path) -> PosteriorSamples:
        """Read a file written by :meth:`write_csv`."""
        path = Path(path)
        try:
            with path.open() as fh:
                header = fh.readline()
                if not header.startswith("# "):
                    raise IngestError(f"{path}: missing posterior metadata header")
                meta = json.loads(header[2:])
                frame = pd.read_csv(fh)
        except (OSError, json.JSONDecodeError, pd.errors.ParserError) as e:
            raise IngestError(f"{path}: cannot read posterior file: {e}") from e
        if meta.get("format") != FORMAT_TAG:
            raise IngestError(f"{path}: unknown posterior format {meta.get('format')!r}")
        return cls.from_frame(frame, meta)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, meta: Mapping[str, Any]) -> PosteriorSamples:
        kind = ModelKind(meta["model_kind"])
        labels = tuple(meta["labels"])
        segment_ids = [int(s) for s in meta["segment_ids"]]
        events = [(int(i), int(k)) for i, k in meta["events"]]
        frame = frame.sort_values(["chain", "draw"], kind="stable")
        c = int(frame["chain"].max()) + 1
        d = int(frame["draw"].max()) + 1
        q_n, s_n, e_n = len(labels), len(segment_ids), len(events)

        def col(name: str) -> np.ndarray:
            if name not in frame.columns:
                raise IngestError(f"posterior file is missing column {name!r}")
            return frame[name].to_numpy(dtype=float).reshape(c, d)

        drift = np.empty((c, d, s_n, q_n))
        sd = np.empty((c, d, s_n, q_n))
        corr = np.broadcast_to(np.eye(q_n), (c, d, s_n, q_n, q_n)).copy()
        for j, sid in enumerate(segment_ids):
            for q in range(q_n):
                drift[:, :, j, q] = col(f"mu[{sid}][{q}]")
                sd[:, :, j, q] = col(f"sigma[{sid}][{q}]")
            if kind is ModelKind.MULTIVARIATE:
                for q1 in range(q_n):
                    for q2 in range(q1 + 1, q_n):
                        v = col(f"R[{sid}][{q1}][{q2}]")
                        corr[:, :, j, q1, q2] = v
                        corr[:, :, j, q2, q1] = v
        zplus = np.empty((c, d, e_n, q_n))
        for e, (sid, k) in enumerate(events):
            for q in range(q_n):
                zplus[:, :, e, q] = col(f"zplus[{sid}][{k}][{q}]")
        hyper = {
            name: np.stack([col(f"hyper.{name}[{q}]") for q in range(q_n)], axis=-1)
            for name in ("s_mu", "s_sigma", "m_z", "s_z")
        }
        anchors = {
            int(sid): SegmentAnchor(float(a["time"]), tuple(float(v) for v in a["values"]))
            for sid, a in meta.get("anchors", {}).items()
        }
        return cls(
            model_kind=kind,
            labels=labels,
            segment_ids=segment_ids,
            drift=drift,
            marginal_sd=sd,
            correlation=corr,
            events=events,
            zplus=zplus,
            log_posterior=col("lp"),
            eta=float(meta.get("eta", 1.0)),
            acceptance={k: list(v) for k, v in meta.get("acceptance", {}).items()},
            anchors=anchors,
            **hyper,
        )

    @classmethod
    def from_fixed(
        cls,
        params: Mapping[int, WienerParams],
        labels: Sequence[str] | None = None,
        n_chains: int = 2,
        n_draws: int = 1,
        model_kind: ModelKind = ModelKind.MULTIVARIATE,
        anchors: Mapping[int, SegmentAnchor] | None = None,
    ) -> PosteriorSamples:
        """A degenerate posterior with every draw equal to ``params``."""
        if not params:
            raise ValueError("from_fixed needs at least one segment")
        segment_ids = sorted(params)
        q_n = params[segment_ids[0]].n_indicators
        labels = tuple(labels) if labels else default_labels(q_n)
        shape = (n_chains, n_draws)
        drift = np.stack([params[s].drift for s in segment_ids])
        sd = np.stack([params[s].marginal_sd for s in segment_ids])
        corr = np.stack([params[s].corr for s in segment_ids])
        ones = np.ones((n_chains, n_draws, q_n))
        return cls(
            model_kind=model_kind,
            labels=labels,
            segment_ids=segment_ids,
            drift=np.broadcast_to(drift, shape + drift.shape).copy(),
            marginal_sd=np.broadcast_to(sd, shape + sd.shape).copy(),
            correlation=np.broadcast_to(corr, shape + corr.shape).copy(),
            events=[],
            zplus=np.empty((n_chains, n_draws, 0, q_n)),
            s_mu=ones.copy(),
            s_sigma=ones.copy(),
            m_z=ones.copy(),
            s_z=ones.copy(),
            log_posterior=np.zeros(shape),
            anchors=dict(anchors or {}),
        )

    # ------------------------------------------------------------------
    # Diagnostics (cached)
    # ------------------------------------------------------------------

    def diagnostics(self) -> dict[str, Any]:
        if self._diagnostics is None:
            from trackdeg.diagnostics import diagnostics

            self._diagnostics = diagnostics(self)
        return self._diagnostics


def summarize(
    samples: PosteriorSamples, quantiles: Sequence[float] = (0.025, 0.5, 0.975)
) -> pd.DataFrame:
    """Per-parameter posterior summary with convergence statistics.

    Returns:
        DataFrame indexed by parameter name with columns mean, sd, one column
        per quantile (``q2.5`` style), split_rhat and ess
    """
    diag = samples.diagnostics() if samples.n_chains >= 2 else {}
    rows = []
    for name, draws in samples.scalar_parameters().items():
        flat = draws.reshape(-1)
        row: dict[str, Any] = {
            "parameter": name,
            "mean": float(flat.mean()),
            "sd": float(flat.std(ddof=1)) if flat.size > 1 else 0.0,
        }
        for p, v in zip(quantiles, np.quantile(flat, quantiles), strict=True):
            row[f"q{100 * p:g}"] = float(v)
        d = diag.get(name)
        row["split_rhat"] = d.split_rhat if d else np.nan
        row["ess"] = d.ess if d else np.nan
        rows.append(row)
    return pd.DataFrame(rows).set_index("parameter")


def zplus_predictive(samples: PosteriorSamples, n: int, seed: SeedLike = None) -> pd.DataFrame:
    """Posterior-predictive draws of post-tamping values.

    Each draw picks a random posterior hyperparameter draw and samples
    LogNormal(m_z, s_z) per indicator.
    """
    rng = as_generator(seed)
    c, d = samples.n_chains, samples.n_draws
    picks = rng.integers(0, c * d, size=n)
    m_z = samples.m_z.reshape(c * d, -1)[picks]
    s_z = samples.s_z.reshape(c * d, -1)[picks]
    values = np.exp(m_z + s_z * rng.standard_normal(m_z.shape))
    return pd.DataFrame(values, columns=list(samples.labels))


def correlation_summary(samples: PosteriorSamples) -> pd.DataFrame:
    """Posterior mean correlation matrix pooled over segments and draws."""
    q = samples.n_indicators
    mean = samples.correlation.reshape(-1, q, q).mean(axis=0)
    return pd.DataFrame(mean, index=list(samples.labels), columns=list(samples.labels))
