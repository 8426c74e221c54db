"""Command-line pipeline: simulate, fit, evaluate, report.

Every subcommand echoes its resolved configuration, writes a manifest with
the config hash, seed, and package version next to its outputs, and is
deterministic given the seed. CSV files are the authoritative outputs;
images are conveniences for eyeballing fits.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import click
import numpy as np
import torch

from . import __version__
from .data import CountDataset, load_dataset, save_dataset
from .errors import ConfigError, DataError, GfglError, NumericsError
from .metrics import (
    RAW,
    STANDARDIZED,
    ci_coverage,
    family_label,
    relative_rate_field,
    rmse_relative,
    ssim,
    tic_normalize,
)
from .priors import GAMMA_LASSO, PLAIN_LASSO
from .simulate import get_preset, load_spec, load_truth, save_spec, save_truth, simulate
from .trainer import TrainConfig, fit
from .variational import (
    DEFAULT_QUANTILES,
    HIERARCHICAL,
    MEAN_FIELD,
    FamilyConfig,
    PosteriorSummary,
    posterior_summary,
)

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}

FAMILY_FLAGS = {
    "hv-gfgl": (HIERARCHICAL, GAMMA_LASSO),
    "mf-gfgl": (MEAN_FIELD, GAMMA_LASSO),
    "mf-gfl": (MEAN_FIELD, PLAIN_LASSO),
}


def _setup_logging(verbose: bool) -> None:
    level = LOG_LEVELS.get(os.environ.get("GFGL_LOG", "warn").lower(), logging.WARNING)
    if verbose:
        level = min(level, logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _echo_config(command: str, config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    click.echo(f"{command} config: {canonical}")
    return canonical


def _write_manifest(out_dir: Path, command: str, config: dict, seed: int) -> None:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    manifest = {
        "command": command,
        "config": config,
        "config_sha256": hashlib.sha256(canonical.encode()).hexdigest(),
        "seed": seed,
        "version": __version__,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def _guard(fn):
    """Map package errors onto the documented exit codes."""

    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (DataError, OSError) as err:
            click.echo(f"error: {err}", err=True)
            sys.exit(3)
        except NumericsError as err:
            click.echo(f"numerical failure: {err}", err=True)
            sys.exit(4)
        except ConfigError as err:
            raise click.UsageError(str(err))
        except GfglError as err:
            click.echo(f"error: {err}", err=True)
            sys.exit(3)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@click.group()
@click.option("--seed", type=int, default=0, show_default=True, help="Master RNG seed.")
@click.option("--threads", type=int, default=None, help="Worker thread bound (default: all cores).")
@click.option("--verbose", is_flag=True, help="Chatty progress logging.")
@click.version_option(version=__version__)
@click.pass_context
def main(ctx: click.Context, seed: int, threads: int | None, verbose: bool):
    """Censored graph-fused gamma lasso pipeline."""
    _setup_logging(verbose)
    if threads is not None:
        if threads < 1:
            raise click.UsageError("--threads must be positive")
        torch.set_num_threads(threads)
    ctx.obj = {"seed": seed, "threads": threads, "verbose": verbose}


@main.command("simulate")
@click.option("--preset", type=str, default=None, help="Built-in design: paper-like or smoke.")
@click.option("--spec", "spec_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="JSON spec file (overrides --preset).")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.pass_context
@_guard
def cmd_simulate(ctx: click.Context, preset: str | None, spec_path: str | None, out_dir: str):
    """Draw a synthetic dataset and write it with its ground truth."""
    seed = ctx.obj["seed"]
    if spec_path is not None:
        spec = load_spec(spec_path)
    elif preset is not None:
        spec = get_preset(preset, seed=seed)
    else:
        raise click.UsageError("give either --preset or --spec")
    config = {"command": "simulate", "spec": spec.to_dict()}
    _echo_config("simulate", config)

    ds, truth = simulate(spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out / "counts.csv", out / "meta.txt")
    save_truth(truth, out / "truth.csv")
    save_spec(spec, out / "spec.json")
    _write_manifest(out, "simulate", config, seed)
    click.echo(f"wrote {ds.num_pixels} pixels x {ds.num_molecules} molecules to {out}")


def _family_config(family: str, samples_grad: int, samples_cdf: int) -> FamilyConfig:
    if family not in FAMILY_FLAGS:
        raise click.UsageError(f"unknown family {family!r}; choose from {', '.join(FAMILY_FLAGS)}")
    fam, prior = FAMILY_FLAGS[family]
    return FamilyConfig(family=fam, prior_kind=prior,
                        samples_grad=samples_grad, samples_cdf=samples_cdf)


def _write_posterior_csv(path: Path, summary: PosteriorSummary) -> None:
    levels = summary.quantile_levels
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["pixel", "molecule", *[f"q{q:g}" for q in levels]])
        _, m, d = summary.values.shape
        for i in range(m):
            for j in range(d):
                w.writerow([i, summary.molecule_names[j],
                            *[repr(float(summary.values[k, i, j])) for k in range(len(levels))]])


def _read_posterior_csv(path: Path) -> PosteriorSummary:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0][:2] != ["pixel", "molecule"]:
        raise DataError(f"{path} is not a posterior summary file")
    levels = tuple(float(h[1:]) for h in rows[0][2:])
    names: list[str] = []
    cells: dict[tuple[int, str], list[float]] = {}
    max_pixel = -1
    for row in rows[1:]:
        if not row:
            continue
        pixel = int(row[0])
        name = row[1]
        if name not in names:
            names.append(name)
        cells[(pixel, name)] = [float(v) for v in row[2:]]
        max_pixel = max(max_pixel, pixel)
    values = np.zeros((len(levels), max_pixel + 1, len(names)))
    for (pixel, name), vals in cells.items():
        values[:, pixel, names.index(name)] = vals
    return PosteriorSummary(quantile_levels=levels, values=values, molecule_names=tuple(names))


@main.command("fit")
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--family", type=str, default="hv-gfgl", show_default=True,
              help="hv-gfgl, mf-gfgl, or mf-gfl.")
@click.option("--iters", type=int, default=25000, show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--resume", "resume_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--samples-grad", type=int, default=2, show_default=True)
@click.option("--samples-cdf", type=int, default=100, show_default=True)
@click.option("--fixed-nu", type=float, default=None,
              help="Shared Laplace rate for the plain lasso "
                   "(default: the observed mean count).")
@click.option("--checkpoint-every", type=int, default=0, show_default=True,
              help="Also checkpoint every N iterations (0: only at the end).")
@click.option("--posterior-draws", type=int, default=1000, show_default=True)
@click.pass_context
@_guard
def cmd_fit(ctx, data_dir, family, iters, out_dir, resume_path, samples_grad,
            samples_cdf, fixed_nu, checkpoint_every, posterior_draws):
    """Fit one model configuration and write checkpoint, trace, and summary."""
    seed = ctx.obj["seed"]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _family_config(family, samples_grad, samples_cdf)
    tc = TrainConfig(
        max_iters=iters,
        seed=seed,
        checkpoint_every=checkpoint_every,
        checkpoint_path=str(out / "checkpoint.bin"),
        log_every=500 if ctx.obj["verbose"] else 0,
    )
    config = {
        "command": "fit",
        "data": str(Path(data_dir).resolve()),
        "family": family,
        "iters": iters,
        "samples_grad": samples_grad,
        "samples_cdf": samples_cdf,
        "fixed_nu": fixed_nu,
        "posterior_draws": posterior_draws,
        "resume": str(Path(resume_path).resolve()) if resume_path else None,
    }
    _echo_config("fit", config)

    ds = load_dataset(Path(data_dir) / "counts.csv", Path(data_dir) / "meta.txt")
    result = fit(ds, cfg, tc, fixed_nu=fixed_nu, resume_from=resume_path)
    config["fixed_nu"] = result.prior.fixed_nu
    result.trace.write_csv(str(out / "trace.csv"))
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(2**31,)))
    summary = posterior_summary(
        result.params, cfg, rng, num_draws=posterior_draws,
        quantile_levels=DEFAULT_QUANTILES, molecule_names=ds.molecule_names,
    )
    _write_posterior_csv(out / "posterior.csv", summary)
    _write_manifest(out, "fit", config, seed)
    final = result.trace.elbo()[-1] if len(result.trace) else float("nan")
    click.echo(f"finished {result.iterations_run} iterations, final objective {final:.2f}")


def _load_fit_dir(fit_dir: Path, data_override: str | None) -> tuple[CountDataset, PosteriorSummary, dict]:
    manifest_path = fit_dir / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"{fit_dir} has no manifest.json; is it a fit output directory?")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    data_dir = Path(data_override) if data_override else Path(manifest["config"]["data"])
    ds = load_dataset(data_dir / "counts.csv", data_dir / "meta.txt")
    summary = _read_posterior_csv(fit_dir / "posterior.csv")
    if summary.molecule_names != ds.molecule_names:
        raise DataError("posterior summary and dataset disagree on molecule names")
    manifest["resolved_data_dir"] = str(data_dir)
    return ds, summary, manifest


def _ssim_table(ds: CountDataset, summary: PosteriorSummary) -> tuple[list[tuple[str, float]], dict[str, float]]:
    tic = tic_normalize(ds)
    median = relative_rate_field(summary.median, "posterior-median")
    per_molecule = [
        (name, ssim(tic.values[:, j], median.values[:, j], ds.graph))
        for j, name in enumerate(ds.molecule_names)
    ]
    scores = np.asarray([s for _, s in per_molecule])
    quantiles = {
        "min": float(scores.min()),
        "q25": float(np.quantile(scores, 0.25)),
        "median": float(np.quantile(scores, 0.5)),
        "q75": float(np.quantile(scores, 0.75)),
        "max": float(scores.max()),
    }
    return per_molecule, quantiles


@main.command("evaluate")
@click.option("--fit", "fit_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--truth", "truth_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), default=None,
              help="Override the dataset directory recorded in the fit manifest.")
@click.option("--tic/--no-tic", "include_tic", default=True, show_default=True,
              help="Include the TIC baseline row in the RMSE table.")
@click.option("--rmse-scale", type=click.Choice(["standardized", "raw"]),
              default="standardized", show_default=True,
              help="Raw works when some truth column is spatially constant.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
              help="Where to write tables (default: the fit directory).")
@click.pass_context
@_guard
def cmd_evaluate(ctx, fit_dir, truth_path, data_dir, include_tic, rmse_scale, out_dir):
    """Score a fit: RMSE and coverage when truth is given, SSIM always."""
    seed = ctx.obj["seed"]
    scale = STANDARDIZED if rmse_scale == "standardized" else RAW
    fit_path = Path(fit_dir)
    out = Path(out_dir) if out_dir else fit_path
    out.mkdir(parents=True, exist_ok=True)
    config = {
        "command": "evaluate",
        "fit": str(fit_path.resolve()),
        "truth": str(Path(truth_path).resolve()) if truth_path else None,
        "tic": include_tic,
        "rmse_scale": rmse_scale,
    }
    _echo_config("evaluate", config)

    ds, summary, _ = _load_fit_dir(fit_path, data_dir)
    median = relative_rate_field(summary.median, "posterior-median")

    if truth_path is not None:
        values, names = load_truth(truth_path)
        if names != ds.molecule_names:
            raise DataError("truth and dataset disagree on molecule names")
        truth = relative_rate_field(values, "truth")
        with open(out / "rmse.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["model", *ds.molecule_names, "overall"])
            rows = []
            if include_tic:
                rows.append(("TIC", rmse_relative(tic_normalize(ds), truth, scale=scale)))
            rows.append(("posterior-median", rmse_relative(median, truth, scale=scale)))
            for label, rep in rows:
                w.writerow([label, *[repr(v) for v in rep.per_molecule], repr(rep.overall)])
                click.echo(f"rmse[{label}] overall = {rep.overall:.4f}")
        with open(out / "coverage.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["level", *ds.molecule_names, "overall"])
            for level in (0.9, 0.5):
                cov = ci_coverage(summary, truth, level)
                w.writerow([level, *[repr(v) for v in cov.per_molecule], repr(cov.overall)])
                click.echo(f"coverage[{level:.0%}] overall = {cov.overall:.3f}")

    per_molecule, quantiles = _ssim_table(ds, summary)
    with open(out / "ssim.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["molecule", "ssim_tic_vs_median"])
        for name, score in per_molecule:
            w.writerow([name, repr(score)])
        for qname, qval in quantiles.items():
            w.writerow([f"quantile_{qname}", repr(qval)])
    click.echo(
        "ssim quantiles (tic vs median): "
        + ", ".join(f"{k}={v:.3f}" for k, v in quantiles.items())
    )
    _write_manifest(out, "evaluate", config, seed)


def _grid_image(graph, values: np.ndarray) -> np.ndarray:
    img = np.full((graph.rows, graph.cols), np.nan)
    img[np.asarray(graph.mask)] = values
    return img


def _write_grid_csv(path: Path, img: np.ndarray) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        for row in img:
            w.writerow(["NA" if np.isnan(v) else repr(float(v)) for v in row])


@main.command("report")
@click.option("--fit", "fit_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.pass_context
@_guard
def cmd_report(ctx, fit_dir, data_dir, out_dir):
    """Render per-molecule heatmaps (truth when available, TIC, posterior median)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    seed = ctx.obj["seed"]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config = {"command": "report", "fit": str(Path(fit_dir).resolve())}
    _echo_config("report", config)

    ds, summary, manifest = _load_fit_dir(Path(fit_dir), data_dir)
    fields: list[tuple[str, np.ndarray]] = []
    truth_file = Path(manifest["resolved_data_dir"]) / "truth.csv"
    if truth_file.exists():
        values, names = load_truth(truth_file)
        if names == ds.molecule_names:
            fields.append(("truth", relative_rate_field(values, "truth").values))
    fields.append(("tic", tic_normalize(ds).values))
    fields.append(("median", relative_rate_field(summary.median, "posterior-median").values))

    cmap = plt.get_cmap("viridis").copy()
    cmap.set_bad("#d0d0d0")
    names = ds.molecule_names
    d = len(names)
    fig, axes = plt.subplots(len(fields), d, figsize=(2.0 * d, 2.2 * len(fields)), squeeze=False)
    for j, name in enumerate(names):
        # one color scale per molecule so the rows are comparable
        vmax = max(fields[k][1][:, j].max() for k in range(len(fields)))
        for k, (field_name, values) in enumerate(fields):
            img = _grid_image(ds.graph, values[:, j])
            _write_grid_csv(out / f"grid_{field_name}_{name}.csv", img)
            single, ax1 = plt.subplots(figsize=(3, 3))
            for ax in (axes[k][j], ax1):
                ax.imshow(img, cmap=cmap, vmin=0.0, vmax=vmax, interpolation="nearest")
                ax.set_xticks([])
                ax.set_yticks([])
            ax1.set_title(f"{field_name} {name}", fontsize=9)
            single.savefig(out / f"heatmap_{field_name}_{name}.png", dpi=120,
                           bbox_inches="tight")
            plt.close(single)
            if j == 0:
                axes[k][j].set_ylabel(field_name, fontsize=10)
            if k == 0:
                axes[k][j].set_title(name, fontsize=10)
    fig.tight_layout()
    fig.savefig(out / "panel.png", dpi=120)
    plt.close(fig)
    _write_manifest(out, "report", config, seed)
    click.echo(f"wrote {len(fields) * d} heatmaps and panel.png to {out}")


if __name__ == "__main__":
    main()
