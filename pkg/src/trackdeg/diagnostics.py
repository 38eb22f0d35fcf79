"""MCMC convergence diagnostics: split-R-hat and effective sample size.

Both work on a (chains, draws) array of one scalar parameter. The ESS uses
Geyer's initial monotone sequence on FFT autocovariances of the split chains.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from trackdeg.errors import ConvergenceError

if TYPE_CHECKING:
    from trackdeg.posterior import PosteriorSamples

logger = logging.getLogger(__name__)

RHAT_GATE = 1.05


@dataclass(frozen=True)
class ParamDiagnostic:
    """Convergence statistics of one scalar parameter."""

    split_rhat: float
    ess: float

    @property
    def converged(self) -> bool:
        # nan means constant draws (e.g. a fixed hyperparameter)
        return math.isnan(self.split_rhat) or self.split_rhat <= RHAT_GATE


def _as_chains(draws: np.ndarray) -> np.ndarray:
    arr = np.asarray(draws, dtype=float)
    if arr.ndim != 2:
        raise ValueError(f"Expected a (chains, draws) array, got shape {arr.shape}")
    return arr


def split_chains(draws: np.ndarray) -> np.ndarray:
    """Split each chain in half, doubling chains and halving draws (odd draw dropped)."""
    arr = _as_chains(draws)
    half = arr.shape[1] // 2
    return np.concatenate([arr[:, :half], arr[:, arr.shape[1] - half :]], axis=0)


def split_rhat(draws: np.ndarray) -> float:
    """Split-R-hat of a (chains, draws) array.

    Raises:
        ValueError: fewer than two chains
    """
    arr = _as_chains(draws)
    if arr.shape[0] < 2:
        raise ValueError("split-R-hat needs at least two chains")
    if arr.shape[1] < 4:
        return math.nan
    chains = split_chains(arr)
    _, n = chains.shape
    chain_means = chains.mean(axis=1)
    within = float(np.mean(chains.var(axis=1, ddof=1)))
    between = n * float(np.var(chain_means, ddof=1))
    if within <= 0.0 or not math.isfinite(within):
        return math.nan
    return math.sqrt(((n - 1) / n * within + between / n) / within)


def autocovariance(draws: np.ndarray) -> np.ndarray:
    """Autocovariance of each chain along the draw axis (biased estimator)."""
    arr = _as_chains(draws)
    n = arr.shape[1]
    centered = arr - arr.mean(axis=1, keepdims=True)
    size = 1 << (2 * n - 1).bit_length()
    spectrum = np.fft.rfft(centered, n=size, axis=1)
    acov = np.fft.irfft(spectrum * np.conjugate(spectrum), n=size, axis=1)[:, :n]
    return acov / n


def effective_sample_size(draws: np.ndarray) -> float:
    """Bulk-free ESS of the mean (Geyer initial monotone sequence on split chains)."""
    arr = _as_chains(draws)
    if arr.shape[1] < 4:
        return math.nan
    if np.ptp(arr) < np.finfo(float).resolution:
        return float(arr.size)
    chains = split_chains(arr)
    n_chain, n_draw = chains.shape
    acov = autocovariance(chains)
    chain_mean = chains.mean(axis=1)
    mean_var = float(np.mean(acov[:, 0])) * n_draw / (n_draw - 1.0)
    var_plus = mean_var * (n_draw - 1.0) / n_draw
    if n_chain > 1:
        var_plus += float(np.var(chain_mean, ddof=1))

    rho = np.zeros(n_draw)
    rho_even = 1.0
    rho[0] = rho_even
    rho_odd = 1.0 - (mean_var - float(np.mean(acov[:, 1]))) / var_plus
    rho[1] = rho_odd

    # initial positive sequence
    t = 1
    while t < n_draw - 3 and rho_even + rho_odd > 0.0:
        rho_even = 1.0 - (mean_var - float(np.mean(acov[:, t + 1]))) / var_plus
        rho_odd = 1.0 - (mean_var - float(np.mean(acov[:, t + 2]))) / var_plus
        if rho_even + rho_odd >= 0.0:
            rho[t + 1] = rho_even
            rho[t + 2] = rho_odd
        t += 2
    max_t = t - 2
    if rho_even > 0.0:
        rho[max_t + 1] = rho_even

    # initial monotone sequence
    t = 1
    while t <= max_t - 2:
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t]:
            rho[t + 1] = 0.5 * (rho[t - 1] + rho[t])
            rho[t + 2] = rho[t + 1]
        t += 2

    total = n_chain * n_draw
    tau = -1.0 + 2.0 * float(np.sum(rho[: max_t + 1])) + float(np.sum(rho[max_t + 1 : max_t + 2]))
    tau = max(tau, 1.0 / math.log10(total))
    return total / tau


def diagnostics(samples: PosteriorSamples) -> dict[str, ParamDiagnostic]:
    """split-R-hat and ESS for every scalar parameter of a posterior.

    Raises:
        ValueError: the posterior has a single chain
    """
    if samples.n_chains < 2:
        raise ValueError("diagnostics need at least two chains")
    result = {}
    for name, draws in samples.scalar_parameters().items():
        result[name] = ParamDiagnostic(split_rhat(draws), effective_sample_size(draws))
    logger.debug(f"Computed diagnostics for {len(result)} parameters")
    return result


def worst_rhat(diag: dict[str, ParamDiagnostic]) -> tuple[str | None, float]:
    """Parameter with the largest finite R-hat (None, nan when all are constant)."""
    worst_name: str | None = None
    worst = math.nan
    for name, d in diag.items():
        if math.isnan(d.split_rhat):
            continue
        if math.isnan(worst) or d.split_rhat > worst:
            worst_name, worst = name, d.split_rhat
    return worst_name, worst


def check_convergence(samples: PosteriorSamples, force: bool = False) -> dict[str, ParamDiagnostic]:
    """Apply the R-hat gate to a posterior.

    Raises:
        ConvergenceError: some R-hat exceeds the gate and ``force`` is False
    """
    diag = samples.diagnostics()
    name, worst = worst_rhat(diag)
    if name is not None and worst > RHAT_GATE:
        message = f"R-hat of {name} is {worst:.3f} (gate {RHAT_GATE})"
        if not force:
            raise ConvergenceError(f"Chains have not converged: {message}", worst)
        logger.warning(f"Ignoring failed convergence gate: {message}")
    return diag
