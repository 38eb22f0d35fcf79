"""Hierarchical Bayesian fitting by adaptive Metropolis-within-Gibbs.

One sweep updates, for every segment i, the blocks

- ``mu``: drift vector (random walk on the natural scale, negatives rejected)
- ``sigma``: marginal sds (random walk on log sigma)
- ``R``: correlation matrix through unconstrained canonical partial
  correlations y, with z = tanh(y) and R = L L^T (multivariate model only)
- ``zplus``: one block per tamping event (random walk on log z+)

followed by the hyperparameter blocks ``hyper.s_mu``, ``hyper.s_sigma``,
``hyper.m_z`` and ``hyper.s_z``. Proposal scales adapt (Robbins-Monro on the
log scale, running variance for the per-coordinate shape) during warmup only.

Chains are independent and may run on a thread pool; each chain draws from
its own ``SeedSequence`` child so results do not depend on scheduling.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from trackdeg.errors import DataError, EmptySeriesError, InitializationError, ModelSpecificationError
from trackdeg.model import IncrementTable, SeedLike, SegmentSeries, as_generator, wiener_loglik
from trackdeg.posterior import ModelKind, PosteriorSamples, SegmentAnchor
from trackdeg.priors import (
    HyperpriorConfig,
    Hyperparams,
    halfnormal_logpdf,
    hyperprior_logpdf,
    lkj_log_normalizer,
    lkj_logpdf_from_cholesky,
    lognormal_logpdf,
    uniform_logpdf,
)

logger = logging.getLogger(__name__)

HYPER_BLOCKS = ("s_mu", "s_sigma", "m_z", "s_z")
ADAPT_EXPONENT = 0.6
# fractions of warmup at which proposal shapes are re-estimated
REFRESH_POINTS = (0.4, 0.7)


class FitConfig(BaseModel):
    """Sampler settings."""

    model_config = ConfigDict(extra="forbid")

    n_chains: int = Field(default=4, ge=2)
    n_warmup: int = Field(default=2000, ge=0)
    n_draws: int = Field(default=2000, ge=1)
    seed: int = Field(default=0, ge=0)
    target_accept: float = Field(default=0.3, gt=0.0, lt=1.0)
    model_kind: ModelKind = ModelKind.MULTIVARIATE
    hyperprior: HyperpriorConfig = Field(default_factory=HyperpriorConfig)
    threads: int = Field(default=1, ge=1)
    init_jitter: float = Field(default=0.1, ge=0.0)


# ----------------------------------------------------------------------
# Correlation parameterization
# ----------------------------------------------------------------------


def n_cpc(n_indicators: int) -> int:
    return n_indicators * (n_indicators - 1) // 2


def _log1m_tanh2(y: float) -> float:
    # log(1 - tanh(y)^2) = -2 log cosh(y), stable for large |y|
    a = abs(y)
    return -2.0 * (a + math.log1p(math.exp(-2.0 * a)) - math.log(2.0))


def cpc_to_cholesky(y: np.ndarray, n_indicators: int) -> tuple[np.ndarray, float]:
    """Map unconstrained partial-correlation coordinates to the Cholesky factor of R.

    Returns:
        (L, log_jacobian) where R = L L^T and log_jacobian is log |dR / dy|
        over the off-diagonal elements of R
    """
    q = n_indicators
    chol = np.zeros((q, q))
    chol[0, 0] = 1.0
    log_jac = 0.0
    idx = 0
    for i in range(1, q):
        ss = 0.0
        for j in range(i):
            yij = float(y[idx])
            idx += 1
            zij = math.tanh(yij)
            value = zij if j == 0 else zij * math.sqrt(max(1.0 - ss, 0.0))
            chol[i, j] = value
            ss += value * value
            log_jac += (0.5 * (q - j - 2) + 1.0) * _log1m_tanh2(yij)
        chol[i, i] = math.sqrt(max(1.0 - ss, 0.0))
    return chol, log_jac


def correlation_to_cpc(correlation: np.ndarray) -> np.ndarray:
    """Inverse of :func:`cpc_to_cholesky` for a valid correlation matrix."""
    q = correlation.shape[0]
    chol = np.linalg.cholesky(correlation)
    y = np.zeros(n_cpc(q))
    idx = 0
    for i in range(1, q):
        ss = 0.0
        for j in range(i):
            value = chol[i, j]
            z = value if j == 0 else value / math.sqrt(max(1.0 - ss, 1e-300))
            y[idx] = math.atanh(float(np.clip(z, -1.0 + 1e-15, 1.0 - 1e-15)))
            ss += value * value
            idx += 1
    return y


# ----------------------------------------------------------------------
# State
# ----------------------------------------------------------------------


@dataclass
class SegmentState:
    """Parameters of one segment; ``cpc`` drives the correlation matrix."""

    segment_id: int
    drift: np.ndarray
    marginal_sd: np.ndarray
    cpc: np.ndarray
    zplus: np.ndarray
    corr_chol: np.ndarray = field(init=False)
    cpc_log_jacobian: float = field(init=False)

    def __post_init__(self) -> None:
        self.set_cpc(np.asarray(self.cpc, dtype=float))

    @property
    def n_indicators(self) -> int:
        return int(self.drift.size)

    def set_cpc(self, y: np.ndarray) -> None:
        self.cpc = y
        if y.size:
            self.corr_chol, self.cpc_log_jacobian = cpc_to_cholesky(y, self.n_indicators)
        else:
            # univariate model or a single indicator: R = I
            self.corr_chol, self.cpc_log_jacobian = np.eye(self.n_indicators), 0.0

    @property
    def correlation(self) -> np.ndarray:
        corr = self.corr_chol @ self.corr_chol.T
        np.fill_diagonal(corr, 1.0)
        return corr

    def covariance_cholesky(self) -> np.ndarray:
        return self.marginal_sd[:, None] * self.corr_chol

    def copy(self) -> SegmentState:
        return SegmentState(
            segment_id=self.segment_id,
            drift=self.drift.copy(),
            marginal_sd=self.marginal_sd.copy(),
            cpc=self.cpc.copy(),
            zplus=self.zplus.copy(),
        )


@dataclass
class ModelState:
    """A full parameter assignment: every segment plus the hyperparameters."""

    segments: list[SegmentState]
    hyper: Hyperparams

    def copy(self) -> ModelState:
        return ModelState(
            segments=[s.copy() for s in self.segments],
            hyper=Hyperparams(
                s_mu=self.hyper.s_mu.copy(),
                s_sigma=self.hyper.s_sigma.copy(),
                m_z=self.hyper.m_z.copy(),
                s_z=self.hyper.s_z.copy(),
                eta=self.hyper.eta,
            ),
        )


@dataclass(frozen=True)
class ModelData:
    """Dataset prepared for sampling."""

    series: tuple[SegmentSeries, ...]
    tables: tuple[IncrementTable, ...]
    labels: tuple[str, ...]
    hyperprior: HyperpriorConfig
    model_kind: ModelKind
    lkj_norm: float

    @property
    def n_indicators(self) -> int:
        return len(self.labels)

    @property
    def multivariate(self) -> bool:
        return self.model_kind is ModelKind.MULTIVARIATE and self.n_indicators >= 2

    @classmethod
    def prepare(
        cls,
        dataset: Sequence[SegmentSeries],
        hyperprior: HyperpriorConfig | None = None,
        model_kind: ModelKind = ModelKind.MULTIVARIATE,
    ) -> ModelData:
        """Validate a dataset and precompute its interval tables.

        Raises:
            DataError: empty dataset
            EmptySeriesError: a series has fewer than two observations
            ModelSpecificationError: indicator sets differ between series
        """
        series = tuple(dataset)
        if not series:
            raise DataError("Cannot fit an empty dataset")
        labels = series[0].labels
        seen: set[int] = set()
        for s in series:
            if s.n_obs < 2:
                raise EmptySeriesError(
                    f"Segment {s.segment_id} has {s.n_obs} observation(s); need at least 2"
                )
            if s.labels != labels:
                raise ModelSpecificationError(
                    f"Segment {s.segment_id} indicators {s.labels} differ from {labels}"
                )
            if s.segment_id in seen:
                raise ModelSpecificationError(f"Duplicate segment id {s.segment_id}")
            seen.add(s.segment_id)
        hyperprior = hyperprior or HyperpriorConfig()
        q = len(labels)
        multivariate = model_kind is ModelKind.MULTIVARIATE and q >= 2
        return cls(
            series=series,
            tables=tuple(IncrementTable.from_series(s) for s in series),
            labels=labels,
            hyperprior=hyperprior,
            model_kind=model_kind,
            lkj_norm=lkj_log_normalizer(q, hyperprior.eta_fixed) if multivariate else 0.0,
        )


# ----------------------------------------------------------------------
# Log posterior
# ----------------------------------------------------------------------


def segment_loglik(seg: SegmentState, table: IncrementTable) -> float:
    """Likelihood term of one segment (-inf when Sigma is degenerate)."""
    chol = seg.covariance_cholesky()
    if np.any(np.diag(chol) <= 0.0):
        return -math.inf
    zplus = seg.zplus if seg.zplus.shape[0] else None
    value = wiener_loglik(seg.drift, chol, table, zplus)
    return value if math.isfinite(value) else -math.inf


def segment_logprior(seg: SegmentState, hyper: Hyperparams, data: ModelData) -> float:
    """Prior of one segment's parameters given the hyperparameters."""
    if np.any(seg.drift < 0.0) or np.any(seg.marginal_sd <= 0.0):
        return -math.inf
    if seg.zplus.size and np.any(seg.zplus <= 0.0):
        return -math.inf
    total = float(np.sum(halfnormal_logpdf(seg.drift, hyper.s_mu)))
    total += float(np.sum(halfnormal_logpdf(seg.marginal_sd, hyper.s_sigma)))
    if data.multivariate:
        total += lkj_logpdf_from_cholesky(seg.corr_chol, hyper.eta, data.lkj_norm)
    if seg.zplus.size:
        total += float(np.sum(lognormal_logpdf(seg.zplus, hyper.m_z, hyper.s_z)))
    return total


def _hyper_in_support(hyper: Hyperparams) -> bool:
    return bool(
        np.all(hyper.s_mu > 0) and np.all(hyper.s_sigma > 0) and np.all(hyper.s_z > 0)
    )


def log_posterior(
    state: ModelState,
    dataset: ModelData | Sequence[SegmentSeries],
    hyperprior: HyperpriorConfig | None = None,
) -> float:
    """Unnormalized log posterior of a full parameter assignment.

    Sums the segment likelihoods, the per-segment priors (half-normal drift
    and sd, LKJ correlation, log-normal post-maintenance values) and the
    hyperprior. Returns -inf outside the support.
    """
    data = (
        dataset
        if isinstance(dataset, ModelData)
        else ModelData.prepare(dataset, hyperprior)
    )
    hp = hyperprior or data.hyperprior
    hyper = state.hyper
    if not _hyper_in_support(hyper):
        return -math.inf
    total = hyperprior_logpdf(hyper.s_mu, hyper.s_sigma, hyper.m_z, hyper.s_z, hp)
    if not math.isfinite(total):
        return -math.inf
    for seg, table in zip(state.segments, data.tables, strict=True):
        prior = segment_logprior(seg, hyper, data)
        if not math.isfinite(prior):
            return -math.inf
        lik = segment_loglik(seg, table)
        if not math.isfinite(lik):
            return -math.inf
        total += prior + lik
    return total


# ----------------------------------------------------------------------
# Proposal tuning
# ----------------------------------------------------------------------


@dataclass
class BlockTuner:
    """Random-walk scale of one block.

    The proposal sd is ``exp(log_scale) * base``. During warmup ``log_scale``
    follows a Robbins-Monro recursion towards the target acceptance rate and
    ``base`` is periodically replaced by the running sd of the block.
    """

    base: np.ndarray
    target_accept: float = 0.3
    log_scale: float = math.nan
    _t0: int = 0
    _count: int = 0
    _mean: np.ndarray | None = None
    _m2: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.base = np.asarray(self.base, dtype=float)
        if math.isnan(self.log_scale):
            self.log_scale = self.default_log_scale

    @property
    def default_log_scale(self) -> float:
        return math.log(2.38 / math.sqrt(max(self.base.size, 1)))

    @property
    def proposal_sd(self) -> np.ndarray:
        return math.exp(self.log_scale) * self.base

    def adapt(self, iteration: int, accepted: bool, x: np.ndarray) -> None:
        rate = (iteration - self._t0 + 1) ** -ADAPT_EXPONENT
        self.log_scale = float(
            np.clip(self.log_scale + rate * (float(accepted) - self.target_accept), -40.0, 5.0)
        )
        # Welford running variance
        self._count += 1
        if self._mean is None or self._m2 is None:
            self._mean = x.astype(float).copy()
            self._m2 = np.zeros_like(self._mean)
            return
        delta = x - self._mean
        self._mean = self._mean + delta / self._count
        self._m2 = self._m2 + delta * (x - self._mean)

    def refresh(self, iteration: int) -> None:
        """Replace ``base`` by the running sd collected since the last refresh."""
        if self._count >= 20 and self._m2 is not None:
            sd = np.sqrt(self._m2 / (self._count - 1))
            usable = np.isfinite(sd) & (sd > 0.0)
            if np.any(usable):
                self.base = np.where(usable, sd, self.base)
                self.log_scale = self.default_log_scale
                self._t0 = iteration
        self._count = 0
        self._mean = None
        self._m2 = None


TunerKey = tuple[str, int, int]


@dataclass
class Tuning:
    """Tuners of every block, keyed by (block, segment index, event index)."""

    tuners: dict[TunerKey, BlockTuner]

    def __getitem__(self, key: TunerKey) -> BlockTuner:
        return self.tuners[key]

    def refresh(self, iteration: int) -> None:
        for tuner in self.tuners.values():
            tuner.refresh(iteration)

    def with_scale(self, scale: float) -> Tuning:
        """Copy with every proposal sd set to ``scale`` (unit base)."""
        return Tuning(
            {
                key: BlockTuner(
                    base=np.ones_like(t.base),
                    target_accept=t.target_accept,
                    log_scale=math.log(scale),
                )
                for key, t in self.tuners.items()
            }
        )


def initial_tuning(state: ModelState, data: ModelData, target_accept: float = 0.3) -> Tuning:
    """Starting proposal scales from rough posterior-sd guesses."""
    tuners: dict[TunerKey, BlockTuner] = {}
    for j, (seg, table) in enumerate(zip(state.segments, data.tables, strict=True)):
        free = ~table.maint
        n_free = max(int(free.sum()), 1)
        t_free = float(table.dt[free].sum()) if free.any() else float(table.dt.sum())
        tuners[("mu", j, -1)] = BlockTuner(
            np.maximum(seg.marginal_sd / math.sqrt(max(t_free, 1e-12)), 1e-10), target_accept
        )
        tuners[("sigma", j, -1)] = BlockTuner(
            np.full(seg.n_indicators, 1.0 / math.sqrt(2.0 * n_free)), target_accept
        )
        if data.multivariate:
            tuners[("R", j, -1)] = BlockTuner(
                np.full(n_cpc(seg.n_indicators), 1.0 / math.sqrt(n_free)), target_accept
            )
        maint_dt = table.dt[table.maint]
        for e in range(seg.zplus.shape[0]):
            spread = seg.marginal_sd * math.sqrt(0.5 * maint_dt[e]) / seg.zplus[e]
            tuners[("zplus", j, e)] = BlockTuner(np.clip(spread, 1e-6, 1.0), target_accept)
    hyper = state.hyper
    tuners[("hyper.s_mu", -1, -1)] = BlockTuner(0.3 * hyper.s_mu, target_accept)
    tuners[("hyper.s_sigma", -1, -1)] = BlockTuner(0.3 * hyper.s_sigma, target_accept)
    tuners[("hyper.m_z", -1, -1)] = BlockTuner(0.3 * np.abs(hyper.m_z) + 1e-3, target_accept)
    tuners[("hyper.s_z", -1, -1)] = BlockTuner(np.full(hyper.s_z.size, 0.2), target_accept)
    return Tuning(tuners)


# ----------------------------------------------------------------------
# Initialization
# ----------------------------------------------------------------------


def _moment_estimates(table: IncrementTable) -> tuple[np.ndarray, np.ndarray, int]:
    free = ~table.maint
    n_free = int(free.sum())
    q = table.dz.shape[1]
    if n_free == 0:
        return np.zeros(q), np.full(q, np.nan), 0
    dt = table.dt[free]
    dz = table.dz[free]
    drift = np.maximum(dz.sum(axis=0) / dt.sum(), 0.0)
    resid = dz - drift[None, :] * dt[:, None]
    sd = np.sqrt(np.mean(resid**2 / dt[:, None], axis=0))
    return drift, sd, n_free


def initial_state(
    data: ModelData, seed: SeedLike = None, jitter: float = 0.0
) -> ModelState:
    """Starting point of a chain.

    Drift and sd come from per-segment method of moments on intervals without
    tamping (pooled when a segment has fewer than two such intervals), z+ from
    the observed post-tamping value, R from the identity and hyperparameters
    from moment matching clipped into the hyperprior support. ``jitter``
    multiplies positive values by exp(jitter * N(0, 1)) to disperse chains.

    Raises:
        InitializationError: the starting log posterior is not finite
    """
    rng = as_generator(seed)
    q = data.n_indicators
    estimates = [_moment_estimates(t) for t in data.tables]

    pooled_drift = np.zeros(q)
    pooled_sd = np.ones(q)
    with_free = [(d, s, n) for d, s, n in estimates if n >= 2]
    if with_free:
        weights = np.array([n for _, _, n in with_free], dtype=float)
        pooled_drift = np.average([d for d, _, _ in with_free], axis=0, weights=weights)
        pooled_sd = np.average([s for _, s, _ in with_free], axis=0, weights=weights)
    pooled_sd = np.where(pooled_sd > 0.0, pooled_sd, 1.0)

    def wiggle(x: np.ndarray) -> np.ndarray:
        if jitter <= 0.0:
            return x
        return x * np.exp(jitter * rng.standard_normal(x.shape))

    segments = []
    for table, (drift, sd, n_free) in zip(data.tables, estimates, strict=True):
        if n_free < 2:
            drift, sd = pooled_drift.copy(), pooled_sd.copy()
        sd = np.where(np.isfinite(sd) & (sd > 0.0), sd, pooled_sd)
        drift = wiggle(np.maximum(drift, 1e-9))
        sd = wiggle(sd)
        maint = table.maint
        if maint.any():
            z_end = table.z_end[maint]
            half = 0.5 * table.dt[maint]
            zplus = np.maximum(z_end - drift[None, :] * half[:, None], 0.5 * z_end)
            zplus = wiggle(np.where(zplus > 0.0, zplus, 1e-3))
        else:
            zplus = np.empty((0, q))
        n_y = n_cpc(q) if data.multivariate else 0
        cpc = jitter * rng.standard_normal(n_y) if jitter > 0 else np.zeros(n_y)
        segments.append(
            SegmentState(
                segment_id=table.segment_id,
                drift=drift,
                marginal_sd=sd,
                cpc=cpc,
                zplus=zplus,
            )
        )

    hyper = _initial_hyper(segments, data.hyperprior, q)
    state = ModelState(segments=segments, hyper=hyper)

    if not math.isfinite(log_posterior(state, data)):
        for seg, table in zip(state.segments, data.tables, strict=True):
            value = segment_logprior(seg, hyper, data) + segment_loglik(seg, table)
            if not math.isfinite(value):
                raise InitializationError(
                    f"Non-finite log posterior at initialization for segment {seg.segment_id}",
                    segment_id=seg.segment_id,
                )
        raise InitializationError("Non-finite hyperprior density at initialization")
    return state


def _clip_open(x: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    width = b - a
    lo = a + 0.01 * width
    hi = b - 0.01 * width
    return np.where(width > 0.0, np.clip(x, lo, hi), a)


def _initial_hyper(segments: list[SegmentState], config: HyperpriorConfig, q: int) -> Hyperparams:
    v = config.vector
    median = config.prior_median(q)
    drifts = np.stack([s.drift for s in segments])
    sds = np.stack([s.marginal_sd for s in segments])
    s_mu = _clip_open(np.sqrt(np.mean(drifts**2, axis=0)), v("a_mu", q), v("b_mu", q))
    s_sigma = _clip_open(np.sqrt(np.mean(sds**2, axis=0)), v("a_sigma", q), v("b_sigma", q))
    zplus = np.concatenate([s.zplus for s in segments], axis=0)
    if zplus.shape[0] >= 2:
        logs = np.log(zplus)
        m_z = np.maximum(logs.mean(axis=0), 1e-3)
        s_z = _clip_open(logs.std(axis=0, ddof=1), v("a_z", q), v("b_z", q))
    else:
        m_z, s_z = median.m_z, median.s_z
    return Hyperparams(s_mu=s_mu, s_sigma=s_sigma, m_z=m_z, s_z=s_z, eta=config.eta_fixed)


# ----------------------------------------------------------------------
# Metropolis updates
# ----------------------------------------------------------------------


def metropolis_update(
    x: np.ndarray,
    logp_x: float,
    log_target: Callable[[np.ndarray], float],
    proposal_sd: np.ndarray | float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, float, bool]:
    """One symmetric random-walk Metropolis update of a block.

    Proposals with a non-finite target are always rejected.
    """
    proposal = x + proposal_sd * rng.standard_normal(np.shape(x))
    log_u = math.log(rng.random())
    logp_prop = log_target(proposal)
    if math.isfinite(logp_prop) and log_u < logp_prop - logp_x:
        return proposal, logp_prop, True
    return x, logp_x, False


@dataclass
class AcceptInfo:
    """Accepted and proposed counts per block name."""

    accepted: dict[str, int] = field(default_factory=dict)
    proposed: dict[str, int] = field(default_factory=dict)

    def record(self, block: str, accepted: bool) -> None:
        self.proposed[block] = self.proposed.get(block, 0) + 1
        self.accepted[block] = self.accepted.get(block, 0) + int(accepted)

    def merge(self, other: AcceptInfo) -> None:
        for block, n in other.proposed.items():
            self.proposed[block] = self.proposed.get(block, 0) + n
            self.accepted[block] = self.accepted.get(block, 0) + other.accepted.get(block, 0)

    def rate(self, block: str) -> float:
        n = self.proposed.get(block, 0)
        return self.accepted.get(block, 0) / n if n else math.nan

    def rates(self) -> dict[str, float]:
        return {block: self.rate(block) for block in sorted(self.proposed)}


def _sweep(
    state: ModelState,
    data: ModelData,
    tuning: Tuning,
    rng: np.random.Generator,
    adapt: bool,
    iteration: int,
) -> AcceptInfo:
    """Update every block of ``state`` in place."""
    info = AcceptInfo()
    hyper = state.hyper

    def run_block(
        key: TunerKey, x: np.ndarray, logp: float, target: Callable[[np.ndarray], float]
    ) -> tuple[np.ndarray, float]:
        tuner = tuning[key]
        x_new, logp_new, accepted = metropolis_update(x, logp, target, tuner.proposal_sd, rng)
        info.record(key[0], accepted)
        if adapt:
            tuner.adapt(iteration, accepted, x_new)
        return x_new, logp_new

    for j, (seg, table) in enumerate(zip(state.segments, data.tables, strict=True)):
        lik = segment_loglik(seg, table)

        # drift
        def drift_target(d: np.ndarray) -> float:
            if np.any(d < 0.0):
                return -math.inf
            trial = seg.drift
            seg.drift = d
            value = segment_loglik(seg, table)
            seg.drift = trial
            return value + float(np.sum(halfnormal_logpdf(d, hyper.s_mu)))

        logp = lik + float(np.sum(halfnormal_logpdf(seg.drift, hyper.s_mu)))
        seg.drift, _ = run_block(("mu", j, -1), seg.drift, logp, drift_target)
        lik = segment_loglik(seg, table)

        # marginal sd on the log scale
        def sd_target(u: np.ndarray) -> float:
            sd = np.exp(u)
            if np.any(sd <= 0.0) or not np.all(np.isfinite(sd)):
                return -math.inf
            trial = seg.marginal_sd
            seg.marginal_sd = sd
            value = segment_loglik(seg, table)
            seg.marginal_sd = trial
            return value + float(np.sum(halfnormal_logpdf(sd, hyper.s_sigma))) + float(u.sum())

        u = np.log(seg.marginal_sd)
        logp = lik + float(np.sum(halfnormal_logpdf(seg.marginal_sd, hyper.s_sigma))) + float(u.sum())
        u, _ = run_block(("sigma", j, -1), u, logp, sd_target)
        seg.marginal_sd = np.exp(u)
        lik = segment_loglik(seg, table)

        # correlation through partial correlations
        if data.multivariate:

            def cpc_target(y: np.ndarray) -> float:
                trial = seg.cpc
                seg.set_cpc(y)
                value = (
                    segment_loglik(seg, table)
                    + lkj_logpdf_from_cholesky(seg.corr_chol, hyper.eta, data.lkj_norm)
                    + seg.cpc_log_jacobian
                )
                seg.set_cpc(trial)
                return value

            logp = (
                lik
                + lkj_logpdf_from_cholesky(seg.corr_chol, hyper.eta, data.lkj_norm)
                + seg.cpc_log_jacobian
            )
            y, _ = run_block(("R", j, -1), seg.cpc, logp, cpc_target)
            seg.set_cpc(y)
            lik = segment_loglik(seg, table)

        # post-maintenance states, one block per event
        for e in range(seg.zplus.shape[0]):

            def zplus_target(v: np.ndarray, e: int = e) -> float:
                z = np.exp(v)
                if np.any(z <= 0.0) or not np.all(np.isfinite(z)):
                    return -math.inf
                trial = seg.zplus[e].copy()
                seg.zplus[e] = z
                value = segment_loglik(seg, table)
                seg.zplus[e] = trial
                return (
                    value
                    + float(np.sum(lognormal_logpdf(z, hyper.m_z, hyper.s_z)))
                    + float(v.sum())
                )

            v = np.log(seg.zplus[e])
            logp = lik + float(np.sum(lognormal_logpdf(seg.zplus[e], hyper.m_z, hyper.s_z))) + float(
                v.sum()
            )
            v, _ = run_block(("zplus", j, e), v, logp, zplus_target)
            seg.zplus[e] = np.exp(v)
            lik = segment_loglik(seg, table)

    _update_hyper(state, data, run_block)
    return info


def _update_hyper(
    state: ModelState,
    data: ModelData,
    run_block: Callable[
        [TunerKey, np.ndarray, float, Callable[[np.ndarray], float]], tuple[np.ndarray, float]
    ],
) -> None:
    hp = data.hyperprior
    hyper = state.hyper
    q = data.n_indicators
    v = hp.vector
    drifts = np.stack([s.drift for s in state.segments])
    sds = np.stack([s.marginal_sd for s in state.segments])
    zplus = np.concatenate([s.zplus for s in state.segments], axis=0)

    def scale_target(values: np.ndarray, a: np.ndarray, b: np.ndarray) -> Callable[[np.ndarray], float]:
        def target(s: np.ndarray) -> float:
            if np.any(s <= 0.0):
                return -math.inf
            prior = float(np.sum(uniform_logpdf(s, a, b)))
            if not math.isfinite(prior):
                return -math.inf
            return prior + float(np.sum(halfnormal_logpdf(values, s)))

        return target

    target = scale_target(drifts, v("a_mu", q), v("b_mu", q))
    hyper.s_mu, _ = run_block(("hyper.s_mu", -1, -1), hyper.s_mu, target(hyper.s_mu), target)

    target = scale_target(sds, v("a_sigma", q), v("b_sigma", q))
    hyper.s_sigma, _ = run_block(
        ("hyper.s_sigma", -1, -1), hyper.s_sigma, target(hyper.s_sigma), target
    )

    def m_z_target(m: np.ndarray) -> float:
        prior = float(np.sum(lognormal_logpdf(m, v("M_z", q), v("S_z", q))))
        if not math.isfinite(prior):
            return -math.inf
        return prior + float(np.sum(lognormal_logpdf(zplus, m, hyper.s_z)))

    hyper.m_z, _ = run_block(("hyper.m_z", -1, -1), hyper.m_z, m_z_target(hyper.m_z), m_z_target)

    a_z, b_z = v("a_z", q), v("b_z", q)

    def s_z_target(s: np.ndarray) -> float:
        if np.any(s <= 0.0):
            return -math.inf
        prior = float(np.sum(uniform_logpdf(s, a_z, b_z)))
        if not math.isfinite(prior):
            return -math.inf
        return prior + float(np.sum(lognormal_logpdf(zplus, hyper.m_z, s)))

    hyper.s_z, _ = run_block(("hyper.s_z", -1, -1), hyper.s_z, s_z_target(hyper.s_z), s_z_target)


def step(
    state: ModelState,
    dataset: ModelData | Sequence[SegmentSeries],
    tuning: Tuning,
    seed: SeedLike = None,
    adapt: bool = False,
    iteration: int = 0,
) -> tuple[ModelState, AcceptInfo]:
    """One Metropolis-within-Gibbs sweep over all blocks.

    ``state`` is left untouched; ``tuning`` is only modified when ``adapt``.

    Returns:
        (new state, acceptance counts of this sweep)
    """
    data = dataset if isinstance(dataset, ModelData) else ModelData.prepare(dataset)
    new_state = state.copy()
    info = _sweep(new_state, data, tuning, as_generator(seed), adapt, iteration)
    return new_state, info


# ----------------------------------------------------------------------
# Chains
# ----------------------------------------------------------------------


@dataclass
class ChainResult:
    drift: np.ndarray
    marginal_sd: np.ndarray
    correlation: np.ndarray
    zplus: np.ndarray
    hyper: dict[str, np.ndarray]
    log_posterior: np.ndarray
    acceptance: AcceptInfo
    warmup_acceptance: AcceptInfo


def run_chain(
    data: ModelData,
    config: FitConfig,
    seed: SeedLike,
    chain: int = 0,
) -> ChainResult:
    """Run warmup and sampling for one chain."""
    rng = as_generator(seed)
    state = initial_state(data, rng, jitter=config.init_jitter)
    tuning = initial_tuning(state, data, config.target_accept)

    s_n = len(state.segments)
    q = data.n_indicators
    e_n = sum(seg.zplus.shape[0] for seg in state.segments)
    d_n = config.n_draws
    drift = np.empty((d_n, s_n, q))
    sd = np.empty((d_n, s_n, q))
    corr = np.empty((d_n, s_n, q, q))
    zplus = np.empty((d_n, e_n, q))
    hyper = {name: np.empty((d_n, q)) for name in HYPER_BLOCKS}
    lp = np.empty(d_n)

    refresh_at = {int(f * config.n_warmup) for f in REFRESH_POINTS if config.n_warmup >= 100}
    warm_info = AcceptInfo()
    draw_info = AcceptInfo()
    total = config.n_warmup + d_n
    report_every = max(total // 10, 1)

    for it in range(total):
        warm = it < config.n_warmup
        info = _sweep(state, data, tuning, rng, adapt=warm, iteration=it)
        if warm:
            warm_info.merge(info)
            if it in refresh_at:
                tuning.refresh(it)
            continue
        draw_info.merge(info)
        d = it - config.n_warmup
        for j, seg in enumerate(state.segments):
            drift[d, j] = seg.drift
            sd[d, j] = seg.marginal_sd
            corr[d, j] = seg.correlation
        if e_n:
            zplus[d] = np.concatenate([seg.zplus for seg in state.segments], axis=0)
        for name in HYPER_BLOCKS:
            hyper[name][d] = getattr(state.hyper, name)
        lp[d] = log_posterior(state, data)
        if (it + 1) % report_every == 0:
            logger.debug(f"chain {chain}: iteration {it + 1}/{total}, lp={lp[d]:.3f}")

    logger.debug(f"chain {chain}: warmup acceptance {warm_info.rates()}")
    return ChainResult(drift, sd, corr, zplus, hyper, lp, draw_info, warm_info)


def fit(dataset: Sequence[SegmentSeries], config: FitConfig | None = None) -> PosteriorSamples:
    """Fit the hierarchical model to a flagged dataset.

    Args:
        dataset: Series with maintenance flags already assigned
        config: Sampler settings (defaults: 4 chains, 2000 warmup, 2000 draws)

    Returns:
        Posterior draws of all segment parameters, tamping states and
        hyperparameters

    Raises:
        DataError: empty dataset or a series with fewer than two observations
        InitializationError: non-finite starting log posterior
    """
    config = config or FitConfig()
    data = ModelData.prepare(dataset, config.hyperprior, config.model_kind)
    logger.info(
        f"Fitting {config.model_kind.value} model: {len(data.series)} segments, "
        f"{data.n_indicators} indicators, {config.n_chains} chains x "
        f"({config.n_warmup} warmup + {config.n_draws} draws)"
    )

    seeds = np.random.SeedSequence(config.seed).spawn(config.n_chains)
    workers = min(config.threads, config.n_chains)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(
                pool.map(lambda c: run_chain(data, config, seeds[c], c), range(config.n_chains))
            )
    else:
        results = [run_chain(data, config, seeds[c], c) for c in range(config.n_chains)]

    events = [
        (s.segment_id, int(k)) for s in data.series for k in s.maintenance_intervals
    ]
    blocks = sorted({b for r in results for b in r.acceptance.proposed})
    acceptance = {b: [r.acceptance.rate(b) for r in results] for b in blocks}
    anchors = {
        s.segment_id: SegmentAnchor(float(s.times[-1]), tuple(float(v) for v in s.observations[-1]))
        for s in data.series
    }
    samples = PosteriorSamples(
        model_kind=config.model_kind,
        labels=data.labels,
        segment_ids=[s.segment_id for s in data.series],
        drift=np.stack([r.drift for r in results]),
        marginal_sd=np.stack([r.marginal_sd for r in results]),
        correlation=np.stack([r.correlation for r in results]),
        events=events,
        zplus=np.stack([r.zplus for r in results]),
        s_mu=np.stack([r.hyper["s_mu"] for r in results]),
        s_sigma=np.stack([r.hyper["s_sigma"] for r in results]),
        m_z=np.stack([r.hyper["m_z"] for r in results]),
        s_z=np.stack([r.hyper["s_z"] for r in results]),
        log_posterior=np.stack([r.log_posterior for r in results]),
        eta=config.hyperprior.eta_fixed,
        acceptance=acceptance,
        anchors=anchors,
    )
    logger.info(f"Fit finished; acceptance {dict((b, round(float(np.mean(r)), 3)) for b, r in acceptance.items())}")
    return samples
