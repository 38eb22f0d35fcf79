"""Prior and hyperprior distributions of the hierarchical model.

Per-segment priors:
- drift mu_{q,i} ~ HalfNormal(s_mu_q)
- marginal sd sigma_{q,i} ~ HalfNormal(s_sigma_q)
- correlation R_i ~ LKJ(eta)
- post-maintenance value z+_{q,i,k} ~ LogNormal(m_z_q, s_z_q)

Hyperpriors (defaults are the weakly informative values used for the
Queensland commuter-track study):
- s_mu_q ~ U(0, 10), s_sigma_q ~ U(0, 10), s_z_q ~ U(0, 2)
- m_z_q ~ LogNormal(2.3, 1)
- eta fixed at 1

Densities are plain numpy closed forms (hot path of the sampler); they are
tested against scipy.stats.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy import special

from trackdeg.model import SeedLike, as_generator, check_correlation

logger = logging.getLogger(__name__)

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
LOG_2 = math.log(2.0)

ArrayLike = float | np.ndarray


def _require_positive(value: ArrayLike, name: str) -> None:
    if np.any(~np.isfinite(np.asarray(value))) or np.any(np.asarray(value) <= 0.0):
        raise ValueError(f"{name} must be positive, got {value}")


def _scalar_or_array(value: np.ndarray) -> ArrayLike:
    return float(value) if value.ndim == 0 else value


def halfnormal_logpdf(x: ArrayLike, scale: ArrayLike) -> ArrayLike:
    """log of 2 * phi(x / scale) / scale for x >= 0, -inf for x < 0."""
    _require_positive(scale, "scale")
    x_arr = np.asarray(x, dtype=float)
    s = np.asarray(scale, dtype=float)
    with np.errstate(invalid="ignore"):
        out = LOG_2 - HALF_LOG_2PI - np.log(s) - 0.5 * (x_arr / s) ** 2
    out = np.where(x_arr >= 0.0, out, -np.inf)
    return _scalar_or_array(out)


def halfnormal_sample(scale: ArrayLike, seed: SeedLike = None, size: Any = None) -> ArrayLike:
    _require_positive(scale, "scale")
    rng = as_generator(seed)
    return _scalar_or_array(np.abs(rng.normal(0.0, scale, size=size)))


def lognormal_logpdf(x: ArrayLike, m: ArrayLike, s: ArrayLike) -> ArrayLike:
    """Log-normal density; ``m`` and ``s`` are the log-space mean and sd (median exp(m))."""
    _require_positive(s, "s")
    x_arr = np.asarray(x, dtype=float)
    s_arr = np.asarray(s, dtype=float)
    positive = x_arr > 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        logx = np.log(np.where(positive, x_arr, 1.0))
        out = -logx - np.log(s_arr) - HALF_LOG_2PI - 0.5 * ((logx - m) / s_arr) ** 2
    out = np.where(positive, out, -np.inf)
    return _scalar_or_array(out)


def lognormal_sample(m: ArrayLike, s: ArrayLike, seed: SeedLike = None, size: Any = None) -> ArrayLike:
    _require_positive(s, "s")
    rng = as_generator(seed)
    return _scalar_or_array(np.exp(rng.normal(m, s, size=size)))


def uniform_logpdf(x: ArrayLike, a: ArrayLike, b: ArrayLike) -> ArrayLike:
    """Uniform density on [a, b]; a point mass (log-density 0) when a == b."""
    x_arr = np.asarray(x, dtype=float)
    a_arr = np.asarray(a, dtype=float)
    b_arr = np.asarray(b, dtype=float)
    width = b_arr - a_arr
    inside = (x_arr >= a_arr) & (x_arr <= b_arr)
    with np.errstate(divide="ignore"):
        dens = np.where(width > 0.0, -np.log(np.where(width > 0.0, width, 1.0)), 0.0)
    out = np.where(inside, dens, -np.inf)
    return _scalar_or_array(out)


def lkj_log_normalizer(d: int, eta: float) -> float:
    """ln c_d such that p(R) = c_d |R|^(eta - 1) integrates to one."""
    if d < 1:
        raise ValueError(f"dimension must be >= 1, got {d}")
    _require_positive(eta, "eta")
    log_inv_c = 0.0
    for k in range(1, d):
        b = eta + 0.5 * (d - k - 1)
        log_inv_c += (2.0 * eta - 2.0 + d - k) * (d - k) * LOG_2
        log_inv_c += (d - k) * float(special.betaln(b, b))
    return -log_inv_c


def lkj_logpdf_from_cholesky(chol: np.ndarray, eta: float, log_norm: float) -> float:
    """LKJ log-density given the lower Cholesky factor of R and a precomputed ln c_d."""
    if eta == 1.0:
        return log_norm
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return (eta - 1.0) * logdet + log_norm


def lkj_logpdf(correlation: np.ndarray, eta: float) -> float:
    """(eta - 1) ln|R| + ln c_d.

    Raises:
        ValueError / DecompositionError: R is not a valid correlation matrix
    """
    chol = check_correlation(correlation)
    return lkj_logpdf_from_cholesky(chol, eta, lkj_log_normalizer(chol.shape[0], eta))


def lkj_sample(d: int, eta: float, seed: SeedLike = None) -> np.ndarray:
    """Draw a correlation matrix from LKJ(eta) with the onion construction."""
    if d < 2:
        raise ValueError(f"dimension must be >= 2, got {d}")
    _require_positive(eta, "eta")
    rng = as_generator(seed)

    chol = np.zeros((d, d))
    chol[0, 0] = 1.0
    beta = eta + 0.5 * (d - 2)
    r12 = 2.0 * rng.beta(beta, beta) - 1.0
    chol[1, 0] = r12
    chol[1, 1] = math.sqrt(max(1.0 - r12 * r12, 0.0))
    for k in range(2, d):
        beta -= 0.5
        y = rng.beta(0.5 * k, beta)
        u = rng.standard_normal(k)
        u /= np.linalg.norm(u)
        chol[k, :k] = math.sqrt(y) * u
        chol[k, k] = math.sqrt(max(1.0 - y, 0.0))
    corr = chol @ chol.T
    np.fill_diagonal(corr, 1.0)
    return 0.5 * (corr + corr.T)


@dataclass
class Hyperparams:
    """Global prior parameters shared by all segments."""

    s_mu: np.ndarray
    s_sigma: np.ndarray
    m_z: np.ndarray
    s_z: np.ndarray
    eta: float = 1.0

    def __post_init__(self) -> None:
        self.s_mu = np.asarray(self.s_mu, dtype=float).reshape(-1)
        self.s_sigma = np.asarray(self.s_sigma, dtype=float).reshape(-1)
        self.m_z = np.asarray(self.m_z, dtype=float).reshape(-1)
        self.s_z = np.asarray(self.s_z, dtype=float).reshape(-1)
        sizes = {self.s_mu.size, self.s_sigma.size, self.m_z.size, self.s_z.size}
        if len(sizes) != 1:
            raise ValueError("All hyperparameter vectors must have the same length")
        for name in ("s_mu", "s_sigma", "s_z"):
            _require_positive(getattr(self, name), name)
        _require_positive(self.eta, "eta")

    @property
    def n_indicators(self) -> int:
        return int(self.s_mu.size)

    def to_dict(self) -> dict[str, Any]:
        return {
            "s_mu": self.s_mu.tolist(),
            "s_sigma": self.s_sigma.tolist(),
            "m_z": self.m_z.tolist(),
            "s_z": self.s_z.tolist(),
            "eta": self.eta,
        }


FloatOrList = float | list[float]


class HyperpriorConfig(BaseModel):
    """Hyperprior ranges; each field is a scalar (shared) or one value per indicator."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    a_mu: FloatOrList = 0.0
    b_mu: FloatOrList = 10.0
    a_sigma: FloatOrList = 0.0
    b_sigma: FloatOrList = 10.0
    M_z: FloatOrList = Field(default=2.3, alias="m_z_loc")
    S_z: FloatOrList = Field(default=1.0, alias="m_z_scale")
    a_z: FloatOrList = 0.0
    b_z: FloatOrList = 2.0
    eta_fixed: float = Field(default=1.0, gt=0.0)

    @field_validator("S_z")
    @classmethod
    def _positive_scale(cls, v: FloatOrList) -> FloatOrList:
        if np.any(np.asarray(v, dtype=float) <= 0.0):
            raise ValueError("S_z must be positive")
        return v

    @model_validator(mode="after")
    def _check_ranges(self) -> HyperpriorConfig:
        for a_name, b_name in (("a_mu", "b_mu"), ("a_sigma", "b_sigma"), ("a_z", "b_z")):
            a = np.asarray(getattr(self, a_name), dtype=float)
            b = np.asarray(getattr(self, b_name), dtype=float)
            if np.any(a < 0.0):
                raise ValueError(f"{a_name} must be nonnegative (scale hyperparameter)")
            if np.any(a > b):
                raise ValueError(f"{a_name} must not exceed {b_name}")
            if np.any(b <= 0.0):
                raise ValueError(f"{b_name} must be positive")
        return self

    def vector(self, name: str, n_indicators: int) -> np.ndarray:
        """A field broadcast to one value per indicator."""
        value = np.asarray(getattr(self, name), dtype=float).reshape(-1)
        if value.size == 1:
            return np.full(n_indicators, float(value[0]))
        if value.size != n_indicators:
            raise ValueError(
                f"{name} has {value.size} entries but the model has {n_indicators} indicators"
            )
        return value

    def prior_median(self, n_indicators: int) -> Hyperparams:
        """Hyperparameters at their hyperprior medians."""
        return Hyperparams(
            s_mu=0.5 * (self.vector("a_mu", n_indicators) + self.vector("b_mu", n_indicators)),
            s_sigma=0.5
            * (self.vector("a_sigma", n_indicators) + self.vector("b_sigma", n_indicators)),
            m_z=np.exp(self.vector("M_z", n_indicators)),
            s_z=0.5 * (self.vector("a_z", n_indicators) + self.vector("b_z", n_indicators)),
            eta=self.eta_fixed,
        )


def sample_hyperparams(
    config: HyperpriorConfig, n_indicators: int, seed: SeedLike = None
) -> Hyperparams:
    """Draw every hyperparameter from its hyperprior; eta is fixed."""
    rng = as_generator(seed)
    v = config.vector
    s_mu = rng.uniform(v("a_mu", n_indicators), v("b_mu", n_indicators))
    s_sigma = rng.uniform(v("a_sigma", n_indicators), v("b_sigma", n_indicators))
    m_z = np.exp(rng.normal(v("M_z", n_indicators), v("S_z", n_indicators)))
    s_z = rng.uniform(v("a_z", n_indicators), v("b_z", n_indicators))
    # U(0, b) can return exactly 0 with negligible probability; keep scales positive
    tiny = np.finfo(float).tiny
    return Hyperparams(
        s_mu=np.maximum(s_mu, tiny),
        s_sigma=np.maximum(s_sigma, tiny),
        m_z=m_z,
        s_z=np.maximum(s_z, tiny),
        eta=config.eta_fixed,
    )


def hyperprior_logpdf(
    s_mu: np.ndarray,
    s_sigma: np.ndarray,
    m_z: np.ndarray,
    s_z: np.ndarray,
    config: HyperpriorConfig,
) -> float:
    """Joint hyperprior log-density; -inf outside support.

    Scale hyperparameters must be strictly positive even when a range starts at 0.
    """
    nq = np.asarray(s_mu).size
    if np.any(np.asarray(s_mu) <= 0) or np.any(np.asarray(s_sigma) <= 0) or np.any(
        np.asarray(s_z) <= 0
    ):
        return -math.inf
    v = config.vector
    total = float(np.sum(uniform_logpdf(s_mu, v("a_mu", nq), v("b_mu", nq))))
    total += float(np.sum(uniform_logpdf(s_sigma, v("a_sigma", nq), v("b_sigma", nq))))
    total += float(np.sum(lognormal_logpdf(m_z, v("M_z", nq), v("S_z", nq))))
    total += float(np.sum(uniform_logpdf(s_z, v("a_z", nq), v("b_z", nq))))
    return total
