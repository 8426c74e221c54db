"""Evaluation metrics and the normalization baseline.

Everything is computed on the identifiable scale: per-molecule fields over
pixels, each summing to one. The TIC baseline is the pixel-total-normalized
count matrix; model fields come from posterior summaries. SSIM follows the
standard windowed form with Gaussian weights, adapted to masked grids by
renormalizing each window over its in-mask support.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate

from .data import CountDataset
from .errors import ConfigError, DataError, NumericsError
from .graph import SpatialGraph
from .priors import GAMMA_LASSO, PLAIN_LASSO
from .trainer import TrainConfig, fit
from .variational import HIERARCHICAL, FamilyConfig, PosteriorSummary, posterior_summary

__all__ = [
    "RelativeRateField",
    "relative_rate_field",
    "tic_normalize",
    "RmseReport",
    "rmse_relative",
    "CoverageReport",
    "ci_coverage",
    "ssim",
    "family_label",
    "AblationReport",
    "run_ablation_suite",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RelativeRateField:
    """Per-molecule spatial distributions: columns are nonnegative, sum to 1."""

    values: np.ndarray
    provenance: str


def relative_rate_field(values: np.ndarray, provenance: str) -> RelativeRateField:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise DataError("a rate field is a (pixels, molecules) matrix")
    if (values < 0).any() or not np.isfinite(values).all():
        raise DataError("rate fields must be finite and nonnegative")
    sums = values.sum(axis=0)
    if (sums <= 0).any():
        raise DataError("every molecule column needs positive mass")
    return RelativeRateField(values=values / sums, provenance=provenance)


def tic_normalize(ds: CountDataset) -> RelativeRateField:
    """Total-ion-count baseline: per-pixel proportions, columns renormalized.

    Censored entries contribute zero mass. A molecule censored everywhere
    has no information at all and falls back to a uniform column.
    """
    totals = (ds.counts * ds.observed).sum(axis=1, keepdims=True).astype(np.float64)
    q = np.where(ds.observed, ds.counts / totals, 0.0)
    sums = q.sum(axis=0)
    m = ds.num_pixels
    out = np.empty_like(q)
    for d in range(ds.num_molecules):
        out[:, d] = q[:, d] / sums[d] if sums[d] > 0 else 1.0 / m
    return RelativeRateField(values=out, provenance="tic")


RAW = "raw"
STANDARDIZED = "per-molecule-standardized"


@dataclass(frozen=True)
class RmseReport:
    per_molecule: np.ndarray
    overall: float
    scale: str


def rmse_relative(
    a: RelativeRateField,
    b: RelativeRateField,
    scale: str = STANDARDIZED,
) -> RmseReport:
    """Per-molecule and pooled RMSE between two rate fields.

    b is the reference; standardized mode divides each molecule's errors by
    the reference column's standard deviation before pooling, so molecules
    of very different spatial contrast contribute comparably.
    """
    if scale not in (RAW, STANDARDIZED):
        raise ConfigError(f"unknown scale {scale!r}")
    if a.values.shape != b.values.shape:
        raise DataError(f"shape mismatch: {a.values.shape} vs {b.values.shape}")
    err = a.values - b.values
    if scale == STANDARDIZED:
        sd = b.values.std(axis=0)
        if (sd <= 0).any():
            raise NumericsError("reference column has zero variance; use the raw scale")
        err = err / sd
    per_molecule = np.sqrt((err**2).mean(axis=0))
    overall = float(np.sqrt((err**2).mean()))
    return RmseReport(per_molecule=per_molecule, overall=overall, scale=scale)


@dataclass(frozen=True)
class CoverageReport:
    level: float
    per_molecule: np.ndarray
    overall: float


def ci_coverage(
    summary: PosteriorSummary,
    truth: RelativeRateField,
    level: float,
) -> CoverageReport:
    """Fraction of entries whose truth lands inside the central interval."""
    lo, hi = summary.interval(level)
    if lo.shape != truth.values.shape:
        raise DataError(f"shape mismatch: {lo.shape} vs {truth.values.shape}")
    inside = (truth.values >= lo) & (truth.values <= hi)
    return CoverageReport(
        level=level,
        per_molecule=inside.mean(axis=0),
        overall=float(inside.mean()),
    )


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    w1 = np.exp(-0.5 * (x / sigma) ** 2)
    w = np.outer(w1, w1)
    return w / w.sum()


def ssim(
    img_a: np.ndarray,
    img_b: np.ndarray,
    graph: SpatialGraph,
    window: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """Mean local structural similarity between two fields on the grid.

    Dynamic range is taken jointly over both images. Window statistics are
    renormalized over in-mask pixels so masked regions never dilute a
    window; grids smaller than the window collapse to a single global
    window over all unmasked pixels.
    """
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != (graph.num_vertices,) or b.shape != (graph.num_vertices,):
        raise DataError("images must be vectors over the graph's pixels")
    both = np.concatenate([a, b])
    span = float(both.max() - both.min())
    if span == 0.0:
        return 1.0 if np.array_equal(a, b) else 0.0
    c1 = (k1 * span) ** 2
    c2 = (k2 * span) ** 2

    if graph.rows < window or graph.cols < window:
        logger.info(
            "grid %dx%d smaller than the %d-pixel window; using one global window",
            graph.rows, graph.cols, window,
        )
        mu_a, mu_b = a.mean(), b.mean()
        va, vb = a.var(), b.var()
        vab = ((a - mu_a) * (b - mu_b)).mean()
        return float(
            (2 * mu_a * mu_b + c1) * (2 * vab + c2)
            / ((mu_a**2 + mu_b**2 + c1) * (va + vb + c2))
        )

    mask = np.asarray(graph.mask, dtype=np.float64)
    grid_a = np.zeros((graph.rows, graph.cols))
    grid_b = np.zeros((graph.rows, graph.cols))
    inside = np.asarray(graph.mask)
    grid_a[inside] = a
    grid_b[inside] = b
    w = _gaussian_window(window, sigma)

    def win(img: np.ndarray) -> np.ndarray:
        return correlate(img, w, mode="constant", cval=0.0)

    weight = win(mask)
    mu_a = win(grid_a) / weight
    mu_b = win(grid_b) / weight
    var_a = np.maximum(win(grid_a**2) / weight - mu_a**2, 0.0)
    var_b = np.maximum(win(grid_b**2) / weight - mu_b**2, 0.0)
    cov = win(grid_a * grid_b) / weight - mu_a * mu_b
    score = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    )
    return float(score[inside].mean())


def family_label(cfg: FamilyConfig) -> str:
    if cfg.family == HIERARCHICAL and cfg.prior_kind == GAMMA_LASSO:
        return "HV-GFGL"
    if cfg.prior_kind == GAMMA_LASSO:
        return "MF-GFGL"
    if cfg.prior_kind == PLAIN_LASSO:
        return "MF-GFL"
    raise ConfigError("unlabeled configuration")


@dataclass
class AblationReport:
    """RMSE and coverage tables across model configurations plus the baseline."""

    molecule_names: tuple[str, ...]
    rmse_rows: list[tuple[str, np.ndarray, float]]
    coverage_rows: list[tuple[str, float, np.ndarray, float]]
    rmse_scale: str

    def write_csv(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "rmse.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["model", *self.molecule_names, "overall"])
            for label, per_mol, overall in self.rmse_rows:
                w.writerow([label, *[repr(v) for v in per_mol], repr(overall)])
        with open(out / "coverage.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["model", "level", *self.molecule_names, "overall"])
            for label, level, per_mol, overall in self.coverage_rows:
                w.writerow([label, level, *[repr(v) for v in per_mol], repr(overall)])

    def format_text(self) -> str:
        width = max(len("model"), *(len(r[0]) for r in self.rmse_rows)) + 2
        cols = [*self.molecule_names, "overall"]
        lines = [f"RMSE ({self.rmse_scale})"]
        header = "model".ljust(width) + "".join(c.rjust(10) for c in cols)
        lines.append(header)
        for label, per_mol, overall in self.rmse_rows:
            vals = [*per_mol, overall]
            lines.append(label.ljust(width) + "".join(f"{v:10.4f}" for v in vals))
        if self.coverage_rows:
            lines.append("")
            lines.append("CI coverage")
            lines.append("model".ljust(width) + "level".rjust(7) + "".join(c.rjust(10) for c in cols))
            for label, level, per_mol, overall in self.coverage_rows:
                vals = [*per_mol, overall]
                lines.append(
                    label.ljust(width) + f"{level:7.2f}" + "".join(f"{v:10.4f}" for v in vals)
                )
        return "\n".join(lines) + "\n"


def run_ablation_suite(
    ds: CountDataset,
    truth: RelativeRateField,
    configs: list[FamilyConfig],
    tc: TrainConfig,
    rmse_scale: str = STANDARDIZED,
    posterior_draws: int = 1000,
) -> AblationReport:
    """Fit every configuration and tabulate RMSE and coverage against truth."""
    rmse_rows = [("TIC", *_rmse_pair(tic_normalize(ds), truth, rmse_scale))]
    coverage_rows = []
    for cfg in configs:
        label = family_label(cfg)
        result = fit(ds, cfg, tc)
        rng = np.random.default_rng(np.random.SeedSequence(entropy=tc.seed, spawn_key=(2**31,)))
        summary = posterior_summary(
            result.params, cfg, rng, num_draws=posterior_draws,
            molecule_names=ds.molecule_names,
        )
        median = relative_rate_field(summary.median, "posterior-median")
        rmse_rows.append((label, *_rmse_pair(median, truth, rmse_scale)))
        for level in (0.9, 0.5):
            cov = ci_coverage(summary, truth, level)
            coverage_rows.append((label, level, cov.per_molecule, cov.overall))
    return AblationReport(
        molecule_names=ds.molecule_names,
        rmse_rows=rmse_rows,
        coverage_rows=coverage_rows,
        rmse_scale=rmse_scale,
    )


def _rmse_pair(field: RelativeRateField, truth: RelativeRateField, scale: str) -> tuple[np.ndarray, float]:
    report = rmse_relative(field, truth, scale=scale)
    return report.per_molecule, report.overall
