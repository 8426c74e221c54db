"""Censored compositional count likelihood.

Observed counts at a pixel are multinomial in the rates pushed through a
softmax. Molecules whose count fell below the per-molecule detection limit
contribute a censoring probability instead: the probability that a negative
multinomial vector (failure count = the pixel's observed total, success
probabilities = the censored slots' compositional probabilities) lies
componentwise below the detection limits. That orthant probability has no
closed form; it is estimated by importance-sampled Monte Carlo around a
frozen proposal, which keeps the estimator differentiable in the rates. An
exact lattice-enumeration evaluator is provided for small limit products and
doubles as the reference the sampler is tested against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.special import gammaln

from .data import CountDataset
from .errors import DataError, OracleRegimeError

__all__ = [
    "RateVector",
    "CensorBlock",
    "LikelihoodContext",
    "softmax_rates",
    "observed_multinomial_loglik",
    "negmult_logpmf",
    "censor_cdf_exact",
    "censor_cdf_mc",
    "dataset_loglik",
    "prepare_likelihood",
    "get_diagnostics",
    "reset_diagnostics",
]

EXACT_LATTICE_LIMIT = 1_000_000
LOG_PROB_FLOOR = float(np.log(1e-300))

_diagnostics = {"mc_floor_events": 0}


def get_diagnostics() -> dict:
    return dict(_diagnostics)


def reset_diagnostics() -> None:
    _diagnostics["mc_floor_events"] = 0


@dataclass(frozen=True)
class RateVector:
    """Unnormalized log rates for one pixel."""

    log_theta: np.ndarray

    @property
    def p(self) -> np.ndarray:
        return softmax_rates(torch.as_tensor(self.log_theta, dtype=torch.float64)).numpy()


@dataclass(frozen=True)
class CensorBlock:
    """Censoring problem for one pixel: which slots, their limits, their mass.

    p_censored are compositional probabilities of the censored slots (summing
    to strictly less than one; the remainder is the observed mass) and
    n_observed is the pixel's observed total acting as the failure count.
    """

    lods: np.ndarray
    p_censored: torch.Tensor
    n_observed: int

    def __post_init__(self):
        lods = np.asarray(self.lods, dtype=np.int64)
        if lods.ndim != 1 or lods.size == 0:
            raise DataError("censor block needs at least one censored slot")
        if np.any(lods < 1):
            raise DataError("detection limits must be >= 1")
        object.__setattr__(self, "lods", lods)
        p = torch.as_tensor(self.p_censored, dtype=torch.float64)
        if p.shape != (lods.size,):
            raise DataError("p_censored shape does not match lods")
        if float(p.detach().sum()) >= 1.0 or bool((p.detach() <= 0).any()):
            raise DataError("censored probabilities must be positive and sum below 1")
        if self.n_observed < 1:
            raise DataError("observed total must be positive")
        object.__setattr__(self, "p_censored", p)


def softmax_rates(log_theta: torch.Tensor) -> torch.Tensor:
    """Compositional probabilities from log rates, stable under shifts."""
    return torch.softmax(torch.as_tensor(log_theta, dtype=torch.float64), dim=-1)


def observed_multinomial_loglik(
    counts_obs: np.ndarray,
    p: torch.Tensor,
    observed_mask: np.ndarray,
) -> torch.Tensor:
    """Multinomial log-likelihood of one pixel's observed slots.

    The probability vector is renormalized to the observed slots; censored
    entries of counts_obs are ignored. Includes the multinomial coefficient.
    """
    x = torch.tensor(np.asarray(counts_obs, dtype=np.float64))
    p = torch.as_tensor(p, dtype=torch.float64)
    obs = torch.tensor(np.asarray(observed_mask, dtype=bool))
    p_obs = torch.where(obs, p, torch.zeros((), dtype=torch.float64))
    norm = p_obs.sum()
    if float(norm) <= 0.0:
        return torch.tensor(float("-inf"), dtype=torch.float64)
    p_tilde = p_obs / norm
    x_obs = torch.where(obs, x, torch.zeros((), dtype=torch.float64))
    if bool(((p_tilde == 0) & (x_obs > 0)).any()):
        return torch.tensor(float("-inf"), dtype=torch.float64)
    support = x_obs > 0
    log_term = torch.where(support, x_obs * torch.log(p_tilde.clamp(min=1e-300)), torch.zeros((), dtype=torch.float64))
    n = x_obs.sum()
    coeff = torch.lgamma(n + 1.0) - torch.lgamma(torch.where(obs, x, torch.zeros((), dtype=torch.float64)) + 1.0).sum()
    return log_term.sum() + coeff


def negmult_logpmf(k: np.ndarray, p_c: torch.Tensor, n_obs: int) -> torch.Tensor:
    """Negative multinomial log pmf at lattice point k.

    Counts failures at rate 1 - sum(p_c); the pmf of seeing k_j successes of
    each censored type before the n_obs-th failure.
    """
    k = np.asarray(k, dtype=np.int64)
    if np.any(k < 0):
        raise DataError("negative multinomial support is the nonnegative lattice")
    p = torch.as_tensor(p_c, dtype=torch.float64)
    total = float(p.sum())
    if total >= 1.0 or bool((p <= 0).any()):
        raise DataError("success probabilities must be positive and sum below 1")
    if n_obs < 1:
        raise DataError("failure count must be positive")
    kt = torch.as_tensor(k, dtype=torch.float64)
    n = float(n_obs)
    log_p0 = torch.log1p(-p.sum())
    return (
        torch.lgamma(kt.sum() + n)
        - float(gammaln(n))
        - torch.lgamma(kt + 1.0).sum()
        + (kt * torch.log(p)).sum()
        + n * log_p0
    )


def censor_cdf_exact(block: CensorBlock) -> float:
    """Log orthant probability by full lattice enumeration.

    Only feasible while prod(lods) stays small; the guard keeps this an
    explicit test-time tool rather than something that silently hangs.
    """
    lattice_size = float(np.prod(block.lods.astype(np.float64)))
    if lattice_size > EXACT_LATTICE_LIMIT:
        raise OracleRegimeError(
            f"lattice of {lattice_size:.3g} points exceeds the "
            f"exact-enumeration limit of {EXACT_LATTICE_LIMIT}"
        )
    grids = np.indices(tuple(int(l) for l in block.lods)).reshape(block.lods.size, -1)
    k = grids.T.astype(np.float64)
    p = block.p_censored.detach().numpy()
    n = float(block.n_observed)
    log_p0 = np.log1p(-p.sum())
    log_pmf = (
        gammaln(k.sum(axis=1) + n)
        - gammaln(n)
        - gammaln(k + 1.0).sum(axis=1)
        + (k * np.log(p)).sum(axis=1)
        + n * log_p0
    )
    m = log_pmf.max()
    return float(m + np.log(np.exp(log_pmf - m).sum()))


def _gamma_poisson_draws(
    rng: np.random.Generator,
    n_obs: np.ndarray,
    rate: np.ndarray,
    num_samples: int,
) -> np.ndarray:
    """Negative multinomial draws via the gamma-Poisson mixture.

    rate has shape (..., C) of per-slot means p_j / p_fail; returns integer
    draws of shape (..., num_samples, C).
    """
    g = rng.standard_gamma(n_obs[..., None], size=(*rate.shape[:-1], num_samples))
    return rng.poisson(g[..., None] * rate[..., None, :])


def _log_is_estimate(
    k: torch.Tensor,
    log_ratio_slots: torch.Tensor,
    log_ratio_fail: torch.Tensor,
    in_region: torch.Tensor,
) -> torch.Tensor:
    """Self-normalized importance-sampling log estimate of the orthant mass.

    log weights reduce to k . (log p - log p0) + n (log p_fail - log p_fail0)
    because the combinatorial factors cancel between target and proposal.
    Samples outside the orthant contribute zero; an empty in-region set falls
    back to a hard floor so the estimate stays finite.
    """
    num_samples = k.shape[-2]
    logw = (k * log_ratio_slots).sum(dim=-1) + log_ratio_fail
    logw = torch.where(in_region, logw, torch.full((), float("-inf"), dtype=torch.float64))
    est = torch.logsumexp(logw, dim=-1) - float(np.log(num_samples))
    floored = ~torch.isfinite(est)
    if bool(floored.any()):
        _diagnostics["mc_floor_events"] += int(floored.sum())
        est = torch.where(floored, torch.full((), LOG_PROB_FLOOR, dtype=torch.float64), est)
    return est


def censor_cdf_mc(
    block: CensorBlock,
    num_samples: int,
    rng: np.random.Generator,
    proposal: torch.Tensor | None = None,
) -> torch.Tensor:
    """Monte Carlo log orthant probability, differentiable in p_censored.

    Draws come from a negative multinomial at the (detached) proposal
    probabilities; importance weights carry the dependence on the live
    p_censored so gradients flow. With the default proposal the weights are
    identically one and the estimator is the in-region fraction.
    """
    if num_samples < 1:
        raise DataError("need at least one sample")
    p = block.p_censored
    p0 = (p.detach() if proposal is None else torch.as_tensor(proposal, dtype=torch.float64))
    p0_np = p0.numpy()
    fail0 = 1.0 - p0_np.sum()
    if fail0 <= 0.0:
        raise DataError("proposal probabilities must sum below 1")
    rate = p0_np / fail0
    k_np = _gamma_poisson_draws(rng, np.asarray(float(block.n_observed)), rate, num_samples)
    in_region = torch.as_tensor((k_np < block.lods).all(axis=-1))
    k = torch.as_tensor(k_np, dtype=torch.float64)
    log_fail = torch.log1p(-p.sum())
    log_fail0 = float(np.log1p(-p0_np.sum()))
    log_ratio_slots = torch.log(p) - torch.log(p0)
    log_ratio_fail = float(block.n_observed) * (log_fail - log_fail0)
    return _log_is_estimate(k, log_ratio_slots, log_ratio_fail, in_region)


@dataclass(frozen=True)
class LikelihoodContext:
    """Dataset tensors laid out once for repeated likelihood evaluation.

    Censored pixels are packed into padded (pixel, slot) arrays so every
    evaluation is a fixed sequence of gathers and trailing-axis reductions,
    which keeps results bitwise reproducible across thread counts.
    """

    counts: torch.Tensor
    observed: torch.Tensor
    log_coeff: float
    cens_pixels: torch.Tensor
    cens_idx: torch.Tensor
    cens_valid: torch.Tensor
    cens_lods: torch.Tensor
    cens_n: torch.Tensor
    cens_n_np: np.ndarray

    @property
    def num_censored_pixels(self) -> int:
        return int(self.cens_pixels.shape[0])


def prepare_likelihood(ds: CountDataset) -> LikelihoodContext:
    counts = torch.tensor(ds.counts, dtype=torch.float64)
    observed = torch.tensor(ds.observed)
    x_obs = np.where(ds.observed, ds.counts, 0)
    totals = x_obs.sum(axis=1)
    log_coeff = float((gammaln(totals + 1.0) - np.where(ds.observed, gammaln(ds.counts + 1.0), 0.0).sum(axis=1)).sum())

    cens_rows = np.flatnonzero(~ds.observed.all(axis=1))
    if cens_rows.size:
        per_pixel = [np.flatnonzero(~ds.observed[i]) for i in cens_rows]
        width = max(idx.size for idx in per_pixel)
        idx = np.zeros((cens_rows.size, width), dtype=np.int64)
        valid = np.zeros((cens_rows.size, width), dtype=bool)
        lods = np.ones((cens_rows.size, width), dtype=np.int64)
        for r, cols in enumerate(per_pixel):
            idx[r, : cols.size] = cols
            valid[r, : cols.size] = True
            lods[r, : cols.size] = ds.lod[cols]
    else:
        idx = np.zeros((0, 1), dtype=np.int64)
        valid = np.zeros((0, 1), dtype=bool)
        lods = np.ones((0, 1), dtype=np.int64)
    return LikelihoodContext(
        counts=counts,
        observed=observed,
        log_coeff=log_coeff,
        cens_pixels=torch.as_tensor(cens_rows, dtype=torch.int64),
        cens_idx=torch.as_tensor(idx),
        cens_valid=torch.as_tensor(valid),
        cens_lods=torch.as_tensor(lods, dtype=torch.float64),
        cens_n=torch.as_tensor(totals[cens_rows], dtype=torch.float64),
        cens_n_np=totals[cens_rows].astype(np.float64),
    )


def observed_loglik_batch(ctx: LikelihoodContext, log_theta: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Observed-slot multinomial log-likelihood for (..., M, D) log rates.

    Returns the summed log-likelihood per batch element and the per-pixel
    log observed mass log ||p^O|| (reused by the censoring term).
    """
    log_p = torch.log_softmax(log_theta, dim=-1)
    neg_inf = torch.full((), float("-inf"), dtype=torch.float64)
    log_obs_mass = torch.logsumexp(torch.where(ctx.observed, log_p, neg_inf), dim=-1)
    zero = torch.zeros((), dtype=torch.float64)
    contrib = torch.where(ctx.observed, ctx.counts * (log_p - log_obs_mass[..., None]), zero)
    total = contrib.sum(dim=-1).sum(dim=-1) + ctx.log_coeff
    return total, log_obs_mass


def censor_loglik_batch(
    ctx: LikelihoodContext,
    log_theta: torch.Tensor,
    log_obs_mass: torch.Tensor,
    num_samples: int,
    rng: np.random.Generator,
    frozen: "CensorNoise | None" = None,
) -> torch.Tensor:
    """Summed log censoring probability for (..., M, D) log rates.

    Each censored pixel gets an importance-sampled orthant estimate. When
    `frozen` noise is supplied both the lattice draws and the proposal's log
    probabilities are reused verbatim, which is what makes common-random-number
    finite differences of the full objective meaningful.
    """
    if ctx.num_censored_pixels == 0:
        return torch.zeros(log_theta.shape[:-2], dtype=torch.float64)
    log_p = torch.log_softmax(log_theta, dim=-1)
    gathered = log_p[..., ctx.cens_pixels, :]
    log_pc = torch.gather(gathered, -1, ctx.cens_idx.expand(*gathered.shape[:-2], *ctx.cens_idx.shape))
    log_fail = log_obs_mass[..., ctx.cens_pixels]

    if frozen is None:
        log_pc0 = log_pc.detach()
        log_fail0 = log_fail.detach()
        rate = torch.where(ctx.cens_valid, torch.exp(log_pc0 - log_fail0[..., None]), torch.zeros((), dtype=torch.float64)).numpy()
        k_np = _gamma_poisson_draws(rng, ctx.cens_n_np, rate, num_samples)
        k = torch.as_tensor(k_np, dtype=torch.float64)
        in_region = torch.as_tensor((k_np < ctx.cens_lods.numpy()[..., None, :]).all(axis=-1))
    else:
        log_pc0 = frozen.log_pc0
        log_fail0 = frozen.log_fail0
        k = frozen.k
        in_region = frozen.in_region

    ratio_slots = torch.where(ctx.cens_valid, log_pc - log_pc0, torch.zeros((), dtype=torch.float64))
    ratio_fail = ctx.cens_n * (log_fail - log_fail0)
    per_pixel = _log_is_estimate(k, ratio_slots[..., None, :], ratio_fail[..., None], in_region)
    return per_pixel.sum(dim=-1)


@dataclass(frozen=True)
class CensorNoise:
    """Frozen censoring draws and proposal log-probabilities for CRN reuse."""

    k: torch.Tensor
    in_region: torch.Tensor
    log_pc0: torch.Tensor
    log_fail0: torch.Tensor


def freeze_censor_noise(
    ctx: LikelihoodContext,
    log_theta: torch.Tensor,
    num_samples: int,
    rng: np.random.Generator,
) -> CensorNoise | None:
    """Draw censoring noise at the current rates and freeze it for reuse."""
    if ctx.num_censored_pixels == 0:
        return None
    log_p = torch.log_softmax(log_theta.detach(), dim=-1)
    neg_inf = torch.full((), float("-inf"), dtype=torch.float64)
    log_obs_mass = torch.logsumexp(torch.where(ctx.observed, log_p, neg_inf), dim=-1)
    gathered = log_p[..., ctx.cens_pixels, :]
    log_pc0 = torch.gather(gathered, -1, ctx.cens_idx.expand(*gathered.shape[:-2], *ctx.cens_idx.shape))
    log_fail0 = log_obs_mass[..., ctx.cens_pixels]
    rate = torch.where(ctx.cens_valid, torch.exp(log_pc0 - log_fail0[..., None]), torch.zeros((), dtype=torch.float64)).numpy()
    k_np = _gamma_poisson_draws(rng, ctx.cens_n_np, rate, num_samples)
    return CensorNoise(
        k=torch.as_tensor(k_np, dtype=torch.float64),
        in_region=torch.as_tensor((k_np < ctx.cens_lods.numpy()[..., None, :]).all(axis=-1)),
        log_pc0=log_pc0,
        log_fail0=log_fail0,
    )


def dataset_loglik(
    ds: CountDataset,
    log_theta: torch.Tensor | np.ndarray,
    mc_samples: int,
    rng: np.random.Generator,
) -> torch.Tensor:
    """Full-dataset censored log-likelihood at one rate matrix."""
    lt = torch.as_tensor(log_theta, dtype=torch.float64)
    if lt.shape != (ds.num_pixels, ds.num_molecules):
        raise DataError("log_theta shape does not match the dataset")
    ctx = prepare_likelihood(ds)
    obs, log_obs_mass = observed_loglik_batch(ctx, lt)
    cens = censor_loglik_batch(ctx, lt, log_obs_mass, mc_samples, rng)
    return obs + cens
