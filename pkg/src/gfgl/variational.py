"""Variational families over log rates and shrinkage variables.

The hierarchical family ties the log-rate variance at each pixel to the
edge shrinkage variables: a pixel's precision is the sum of the reciprocal
Laplace rates on its incident edges, so strongly fused edges (large nu)
tighten the rate posterior. The mean-field family gives every log rate an
independent learned scale. Shrinkage variables get Gamma factors in both
cases; the plain-lasso prior pins them instead.

All parameters are kept as unconstrained float64 torch leaves (logs of the
positive quantities) so a plain gradient step can never leave the domain.
Sampling consumes numpy noise only, via fixed-shape gathers, which keeps
draws bitwise reproducible across torch thread counts and lets the same
noise be replayed exactly for common-random-number checks.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .data import CountDataset
from .errors import ConfigError, DataError
from .graph import SpatialGraph
from .priors import GAMMA_LASSO, PLAIN_LASSO, PriorConfig
from .reparam import gamma_draw, standard_gamma_from_uniform

__all__ = [
    "HIERARCHICAL",
    "MEAN_FIELD",
    "FamilyConfig",
    "VariationalParams",
    "DrawBatch",
    "BaseNoise",
    "init_params",
    "params_from_state",
    "draw_base_noise",
    "sample_draws",
    "sample_from_noise",
    "PosteriorSummary",
    "posterior_summary",
]

logger = logging.getLogger(__name__)

HIERARCHICAL = "hierarchical"
MEAN_FIELD = "mean-field"

LEAF_ORDER = ("mu", "log_sigma", "log_a", "log_b", "log_lam0", "log_lam1")


@dataclass(frozen=True)
class FamilyConfig:
    """Family choice plus the sampling budget of the objective estimator."""

    family: str = HIERARCHICAL
    prior_kind: str = GAMMA_LASSO
    samples_grad: int = 2
    samples_cdf: int = 100
    closed_form_expectations: bool = True

    def __post_init__(self):
        if self.family not in (HIERARCHICAL, MEAN_FIELD):
            raise ConfigError(f"unknown family {self.family!r}")
        if self.prior_kind not in (GAMMA_LASSO, PLAIN_LASSO):
            raise ConfigError(f"unknown prior kind {self.prior_kind!r}")
        if self.family == HIERARCHICAL and self.prior_kind == PLAIN_LASSO:
            raise ConfigError(
                "the hierarchical family needs per-edge shrinkage factors; "
                "use the mean-field family with the plain lasso"
            )
        if self.samples_grad < 1 or self.samples_cdf < 1:
            raise ConfigError("sample counts must be positive")

    @property
    def uses_shrinkage_factors(self) -> bool:
        return self.prior_kind == GAMMA_LASSO


class VariationalParams:
    """Unconstrained torch leaves of the variational distribution.

    mu and log_sigma are (M, D); log_a and log_b are per-edge (R, D) Gamma
    shape/rate logs; log_lam0 and log_lam1 are per-molecule (D,). log_sigma
    is present only for the mean-field family.
    """

    def __init__(
        self,
        graph: SpatialGraph,
        mu: torch.Tensor,
        log_sigma: torch.Tensor | None,
        log_a: torch.Tensor,
        log_b: torch.Tensor,
        log_lam0: torch.Tensor,
        log_lam1: torch.Tensor,
    ):
        self.graph = graph
        self.mu = mu
        self.log_sigma = log_sigma
        self.log_a = log_a
        self.log_b = log_b
        self.log_lam0 = log_lam0
        self.log_lam1 = log_lam1

    @property
    def num_molecules(self) -> int:
        return int(self.mu.shape[1])

    @property
    def sigma(self) -> torch.Tensor:
        if self.log_sigma is None:
            raise ConfigError("the hierarchical family has no free rate scale")
        return torch.exp(self.log_sigma)

    @property
    def a(self) -> torch.Tensor:
        return torch.exp(self.log_a)

    @property
    def b(self) -> torch.Tensor:
        return torch.exp(self.log_b)

    @property
    def lam0(self) -> torch.Tensor:
        return torch.exp(self.log_lam0)

    @property
    def lam1(self) -> torch.Tensor:
        return torch.exp(self.log_lam1)

    def leaves(self) -> dict[str, torch.Tensor]:
        out = {}
        for name in LEAF_ORDER:
            t = getattr(self, name)
            if t is not None:
                out[name] = t
        return out

    def trainable_leaves(self, cfg: FamilyConfig) -> dict[str, torch.Tensor]:
        names = ["mu"]
        if cfg.family == MEAN_FIELD:
            names.append("log_sigma")
        if cfg.uses_shrinkage_factors:
            names.extend(["log_a", "log_b", "log_lam0", "log_lam1"])
        return {n: getattr(self, n) for n in names}

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.detach().numpy().copy() for name, t in self.leaves().items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        with torch.no_grad():
            for name, t in self.leaves().items():
                if name not in arrays:
                    raise DataError(f"missing parameter block {name!r}")
                src = torch.as_tensor(arrays[name], dtype=torch.float64)
                if src.shape != t.shape:
                    raise DataError(
                        f"parameter block {name!r} has shape {tuple(src.shape)}, "
                        f"expected {tuple(t.shape)}"
                    )
                t.copy_(src)


def _leaf(values: np.ndarray) -> torch.Tensor:
    return torch.tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


def params_from_state(
    graph: SpatialGraph,
    cfg: FamilyConfig,
    arrays: dict[str, np.ndarray],
) -> VariationalParams:
    """Rebuild parameters from stored arrays, validating shapes against the graph."""
    mu = np.asarray(arrays.get("mu"), dtype=np.float64)
    if mu.ndim != 2 or mu.shape[0] != graph.num_vertices:
        raise DataError(
            f"stored mu has shape {mu.shape}, expected ({graph.num_vertices}, D)"
        )
    d = mu.shape[1]
    expected = {
        "log_a": (graph.num_edges, d),
        "log_b": (graph.num_edges, d),
        "log_lam0": (d,),
        "log_lam1": (d,),
    }
    if cfg.family == MEAN_FIELD:
        expected["log_sigma"] = (graph.num_vertices, d)
    for name, shape in expected.items():
        if name not in arrays:
            raise DataError(f"missing parameter block {name!r}")
        if tuple(np.asarray(arrays[name]).shape) != shape:
            raise DataError(
                f"parameter block {name!r} has shape {np.asarray(arrays[name]).shape}, "
                f"expected {shape}"
            )
    return VariationalParams(
        graph=graph,
        mu=_leaf(mu),
        log_sigma=_leaf(arrays["log_sigma"]) if cfg.family == MEAN_FIELD else None,
        log_a=_leaf(arrays["log_a"]),
        log_b=_leaf(arrays["log_b"]),
        log_lam0=_leaf(arrays["log_lam0"]),
        log_lam1=_leaf(arrays["log_lam1"]),
    )


def init_params(
    ds: CountDataset,
    cfg: FamilyConfig,
    fixed_nu: float | None = None,
) -> tuple[VariationalParams, PriorConfig]:
    """Moment-matched starting point computed from the observed counts.

    Edge factors start at shape 2 with rate equal to the molecule's observed
    mean count; the molecule-level factors start at shape 1 with the same
    rate, and the top-level rates are the observed count variances. Rate
    means start at smoothed observed frequencies, with half the detection
    limit standing in for censored entries. The plain-lasso rate defaults
    to the overall observed mean count, putting the penalty at the scale of
    the data just like the shrinkage start above.
    """
    g = ds.graph
    if cfg.family == HIERARCHICAL and int(g.degrees.min()) < 1:
        raise ConfigError(
            "the hierarchical family needs every pixel to touch an edge; "
            "this graph has isolated pixels"
        )
    counts = ds.counts.astype(np.float64)
    observed = ds.observed
    num_obs = observed.sum(axis=0)

    mean = np.empty(ds.num_molecules)
    var = np.empty(ds.num_molecules)
    for d in range(ds.num_molecules):
        col = counts[observed[:, d], d]
        if col.size == 0:
            proxy = ds.lod[d] / 2.0
            logger.warning(
                "molecule %r has no observed counts; seeding moments from half its detection limit",
                ds.molecule_names[d],
            )
            mean[d] = proxy
            var[d] = max(proxy * proxy, 1e-6)
        else:
            mean[d] = col.mean()
            var[d] = col.var(ddof=1) if col.size > 1 else max(col.mean(), 1e-6)
    mean = np.maximum(mean, 1e-3)
    var = np.maximum(var, 1e-6)

    totals = np.where(observed, counts, 0.0).sum(axis=1, keepdims=True)
    denom = totals + 0.5 * ds.num_molecules
    filled = np.where(observed, counts + 0.5, ds.lod[None, :] / 2.0)
    mu = np.log(filled / denom)

    num_edges = g.num_edges
    vp = VariationalParams(
        graph=g,
        mu=_leaf(mu),
        log_sigma=_leaf(np.zeros_like(mu)) if cfg.family == MEAN_FIELD else None,
        log_a=_leaf(np.full((num_edges, ds.num_molecules), np.log(2.0))),
        log_b=_leaf(np.tile(np.log(mean), (num_edges, 1))),
        log_lam0=_leaf(np.zeros(ds.num_molecules)),
        log_lam1=_leaf(np.log(mean)),
    )
    if cfg.prior_kind == PLAIN_LASSO and fixed_nu is None:
        fixed_nu = float(counts[observed].mean())
    prior = PriorConfig(
        kind=cfg.prior_kind,
        tau=var,
        fixed_nu=fixed_nu if cfg.prior_kind == PLAIN_LASSO else None,
    )
    return vp, prior


@dataclass(frozen=True)
class BaseNoise:
    """Distribution-free noise a draw batch is a deterministic function of.

    eps are standard normals; u_nu and u_lam are uniforms mapped through the
    inverse Gamma CDF at the current shapes, so replaying the same noise at
    perturbed parameters moves along a smooth path.
    """

    eps: np.ndarray
    u_nu: np.ndarray | None
    u_lam: np.ndarray | None


@dataclass(frozen=True)
class DrawBatch:
    """One batch of reparameterized draws; leading axis is the sample index."""

    log_theta: torch.Tensor
    gamma: torch.Tensor | None
    nu: torch.Tensor | None
    lam: torch.Tensor | None


_incidence_tensors: dict[int, tuple[SpatialGraph, torch.Tensor, torch.Tensor]] = {}


def _graph_gather_tensors(g: SpatialGraph) -> tuple[torch.Tensor, torch.Tensor]:
    cached = _incidence_tensors.get(id(g))
    if cached is None or cached[0] is not g:
        inc = torch.tensor(g.incident_edges)
        valid = torch.tensor(g.incident_valid, dtype=torch.float64).unsqueeze(-1)
        _incidence_tensors[id(g)] = (g, inc, valid)
        return inc, valid
    return cached[1], cached[2]


def _precision_from_nu(g: SpatialGraph, nu: torch.Tensor) -> torch.Tensor:
    """Per-pixel precision: summed reciprocal rates over incident edges.

    The left-to-right fold over incident slots mirrors the accumulation
    order of apply_abs_incidence_transpose, keeping the two paths bitwise
    identical (grid degrees are tiny, so the loop costs nothing).
    """
    inc, valid = _graph_gather_tensors(g)
    nu_inv = 1.0 / nu
    gathered = nu_inv[:, inc, :] * valid
    total = gathered[:, :, 0, :]
    for c in range(1, gathered.shape[2]):
        total = total + gathered[:, :, c, :]
    return total


def _assemble(
    vp: VariationalParams,
    cfg: FamilyConfig,
    eps: torch.Tensor,
    x_nu: torch.Tensor | None,
    x_lam: torch.Tensor | None,
) -> DrawBatch:
    nu = lam = gamma = None
    if x_nu is not None:
        nu = gamma_draw(x_nu, vp.a, vp.b)
    if x_lam is not None:
        lam = gamma_draw(x_lam, vp.lam0, vp.lam1)
    if cfg.family == HIERARCHICAL:
        gamma = _precision_from_nu(vp.graph, nu)
        log_theta = vp.mu + eps * torch.rsqrt(gamma)
    else:
        log_theta = vp.mu + eps * vp.sigma
    return DrawBatch(log_theta=log_theta, gamma=gamma, nu=nu, lam=lam)


def sample_draws(
    vp: VariationalParams,
    cfg: FamilyConfig,
    rng: np.random.Generator,
    num_samples: int | None = None,
    rates_only: bool = False,
) -> DrawBatch:
    """Fresh reparameterized draws for one objective evaluation.

    rates_only skips whatever shrinkage draws the log rates do not depend
    on, for cheap posterior summaries.
    """
    s = num_samples if num_samples is not None else cfg.samples_grad
    m, d = vp.mu.shape
    eps = torch.as_tensor(rng.standard_normal((s, m, d)))
    x_nu = x_lam = None
    if cfg.uses_shrinkage_factors:
        r = vp.graph.num_edges
        need_nu = cfg.family == HIERARCHICAL or not rates_only
        if need_nu:
            a_np = vp.a.detach().numpy()
            x_nu = torch.as_tensor(rng.standard_gamma(np.broadcast_to(a_np, (s, r, d))))
        if not rates_only:
            lam0_np = vp.lam0.detach().numpy()
            x_lam = torch.as_tensor(rng.standard_gamma(np.broadcast_to(lam0_np, (s, d))))
    return _assemble(vp, cfg, eps, x_nu, x_lam)


def draw_base_noise(
    vp: VariationalParams,
    cfg: FamilyConfig,
    rng: np.random.Generator,
    num_samples: int | None = None,
) -> BaseNoise:
    """Raw noise for a draw batch, retained so it can be replayed."""
    s = num_samples if num_samples is not None else cfg.samples_grad
    m, d = vp.mu.shape
    eps = rng.standard_normal((s, m, d))
    u_nu = u_lam = None
    if cfg.uses_shrinkage_factors:
        r = vp.graph.num_edges
        u_nu = rng.random((s, r, d))
        u_lam = rng.random((s, d))
    return BaseNoise(eps=eps, u_nu=u_nu, u_lam=u_lam)


def sample_from_noise(
    vp: VariationalParams,
    cfg: FamilyConfig,
    noise: BaseNoise,
) -> DrawBatch:
    """Deterministic draw batch from retained noise (inverse-CDF gamma path)."""
    eps = torch.as_tensor(noise.eps)
    x_nu = x_lam = None
    if cfg.uses_shrinkage_factors:
        a_np = np.broadcast_to(vp.a.detach().numpy(), noise.u_nu.shape)
        lam0_np = np.broadcast_to(vp.lam0.detach().numpy(), noise.u_lam.shape)
        x_nu = torch.as_tensor(standard_gamma_from_uniform(a_np, noise.u_nu))
        x_lam = torch.as_tensor(standard_gamma_from_uniform(lam0_np, noise.u_lam))
    return _assemble(vp, cfg, eps, x_nu, x_lam)


@dataclass(frozen=True)
class PosteriorSummary:
    """Marginal quantiles of the normalized (per-molecule) rate field."""

    quantile_levels: tuple[float, ...]
    values: np.ndarray
    molecule_names: tuple[str, ...]

    def level_index(self, level: float) -> int:
        for i, q in enumerate(self.quantile_levels):
            if abs(q - level) < 1e-12:
                return i
        raise ConfigError(f"quantile level {level} was not computed")

    @property
    def median(self) -> np.ndarray:
        return self.values[self.level_index(0.5)]

    def interval(self, level: float) -> tuple[np.ndarray, np.ndarray]:
        lo = (1.0 - level) / 2.0
        return (
            self.values[self.level_index(lo)],
            self.values[self.level_index(1.0 - lo)],
        )


DEFAULT_QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


def posterior_summary(
    vp: VariationalParams,
    cfg: FamilyConfig,
    rng: np.random.Generator,
    num_draws: int = 1000,
    quantile_levels: tuple[float, ...] = DEFAULT_QUANTILES,
    molecule_names: tuple[str, ...] | None = None,
) -> PosteriorSummary:
    """Quantiles of the normalized rate field under the fitted distribution.

    Each draw of log rates is exponentiated and normalized per molecule
    across pixels, so the summaries live on the identifiable scale.
    """
    if num_draws < 100:
        raise ConfigError("too few draws for stable quantiles; use at least 100")
    for q in quantile_levels:
        if not 0.0 < q < 1.0:
            raise ConfigError("quantile levels must lie strictly inside (0, 1)")
    m, d = vp.mu.shape
    draws = np.empty((num_draws, m, d))
    done = 0
    with torch.no_grad():
        while done < num_draws:
            chunk = min(200, num_draws - done)
            batch = sample_draws(vp, cfg, rng, num_samples=chunk, rates_only=True)
            lt = batch.log_theta.detach().numpy()
            lt = lt - lt.max(axis=1, keepdims=True)
            t = np.exp(lt)
            draws[done : done + chunk] = t / t.sum(axis=1, keepdims=True)
            done += chunk
    values = np.quantile(draws, np.asarray(quantile_levels), axis=0)
    names = molecule_names if molecule_names is not None else tuple(f"m{j}" for j in range(d))
    return PosteriorSummary(
        quantile_levels=tuple(float(q) for q in quantile_levels),
        values=values,
        molecule_names=names,
    )
