"""Stochastic-gradient training loop with restartable state.

One iteration draws fresh noise, evaluates the objective, and takes an Adam
step on the unconstrained leaves. The noise for iteration i comes from a
generator seeded by (seed, i) alone, so a run is a pure function of its
seed and starting state: interrupting, checkpointing, and resuming replays
the identical sequence bit for bit. Checkpoints are a small self-describing
binary container (fixed magic, JSON header with sorted keys, raw array
payload, CRC) written without timestamps so identical states produce
identical files.
"""

from __future__ import annotations

import csv
import json
import logging
import time
import zlib
from dataclasses import dataclass, replace

import numpy as np
import torch

from .data import CountDataset, encode_mask
from .elbo import TERM_NAMES, ElboBreakdown, elbo_terms, prepare_model, total_from_terms
from .errors import ConfigError, DataError, NumericsError, TrainingDivergedError
from .priors import PriorConfig
from .variational import FamilyConfig, VariationalParams, init_params, params_from_state

__all__ = [
    "TrainConfig",
    "TrainTrace",
    "FitResult",
    "Checkpoint",
    "iteration_rng",
    "fit",
    "save_checkpoint",
    "load_checkpoint",
]

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"GFGLCKPT"
CHECKPOINT_VERSION = 1

TRACE_COLUMNS = ("iteration",) + TERM_NAMES + ("elbo", "seconds")


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer settings; the defaults are the ones used throughout."""

    max_iters: int = 25000
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    elbo_window: int = 200
    early_stop_rel_tol: float | None = None
    checkpoint_every: int = 0
    checkpoint_path: str | None = None
    log_every: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ConfigError("max_iters must be positive")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if self.elbo_window < 1:
            raise ConfigError("elbo_window must be positive")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be nonnegative")


def iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    """The generator owning all of iteration i's noise; stateless by design."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(iteration,)))


class TrainTrace:
    """Per-iteration objective record, CSV-serializable."""

    def __init__(self):
        self.columns: dict[str, list[float]] = {name: [] for name in TRACE_COLUMNS}

    def __len__(self) -> int:
        return len(self.columns["iteration"])

    def append(self, iteration: int, bd: ElboBreakdown, seconds: float) -> None:
        self.columns["iteration"].append(float(iteration))
        for name in TERM_NAMES:
            self.columns[name].append(getattr(bd, name))
        self.columns["elbo"].append(bd.total)
        self.columns["seconds"].append(seconds)

    def as_arrays(self) -> dict[str, np.ndarray]:
        return {name: np.asarray(vals, dtype=np.float64) for name, vals in self.columns.items()}

    def elbo(self) -> np.ndarray:
        return np.asarray(self.columns["elbo"], dtype=np.float64)

    def smoothed_elbo(self, window: int) -> np.ndarray:
        """Trailing moving average, shorter windows at the start."""
        values = self.elbo()
        csum = np.concatenate([[0.0], np.cumsum(values)])
        idx = np.arange(1, values.size + 1)
        lo = np.maximum(idx - window, 0)
        return (csum[idx] - csum[lo]) / (idx - lo)

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(TRACE_COLUMNS)
            for row in zip(*(self.columns[name] for name in TRACE_COLUMNS)):
                w.writerow([f"{row[0]:.0f}"] + [repr(float(v)) for v in row[1:]])

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "TrainTrace":
        trace = cls()
        for name in TRACE_COLUMNS:
            trace.columns[name] = [float(v) for v in arrays[name]]
        return trace


@dataclass
class FitResult:
    params: VariationalParams
    prior: PriorConfig
    family: FamilyConfig
    train: TrainConfig
    trace: TrainTrace
    iterations_run: int
    stopped_early: bool
    skipped_iterations: list[int]


@dataclass(frozen=True)
class Checkpoint:
    """Decoded checkpoint: metadata plus named arrays."""

    meta: dict
    arrays: dict[str, np.ndarray]


def _family_meta(cfg: FamilyConfig) -> dict:
    return {
        "family": cfg.family,
        "prior_kind": cfg.prior_kind,
        "samples_grad": cfg.samples_grad,
        "samples_cdf": cfg.samples_cdf,
        "closed_form_expectations": cfg.closed_form_expectations,
    }


def _adam_entries(optimizer: torch.optim.Adam, leaf_names: list[str]) -> tuple[dict, dict[str, np.ndarray]]:
    steps: dict[str, float] = {}
    arrays: dict[str, np.ndarray] = {}
    state = optimizer.state_dict()["state"]
    for idx, name in enumerate(leaf_names):
        if idx not in state:
            continue
        entry = state[idx]
        steps[name] = float(entry["step"])
        arrays[f"adam.exp_avg.{name}"] = entry["exp_avg"].numpy().copy()
        arrays[f"adam.exp_avg_sq.{name}"] = entry["exp_avg_sq"].numpy().copy()
    return steps, arrays


def save_checkpoint(
    path: str,
    vp: VariationalParams,
    cfg: FamilyConfig,
    prior: PriorConfig,
    tc: TrainConfig,
    iteration: int,
    optimizer: torch.optim.Adam | None,
    trace: TrainTrace,
    molecule_names: tuple[str, ...],
) -> None:
    """Write the complete restartable state as one deterministic binary file."""
    g = vp.graph
    leaf_names = list(vp.trainable_leaves(cfg).keys())
    adam_steps, adam_arrays = ({}, {})
    if optimizer is not None:
        adam_steps, adam_arrays = _adam_entries(optimizer, leaf_names)

    arrays: dict[str, np.ndarray] = {}
    for name, arr in vp.state_arrays().items():
        arrays[f"param.{name}"] = arr
    arrays["tau"] = prior.tau.copy()
    arrays.update(adam_arrays)
    for name, arr in trace.as_arrays().items():
        if name == "seconds":
            continue  # wall clock would break checkpoint bit-identity
        arrays[f"trace.{name}"] = arr

    meta = {
        "iteration": int(iteration),
        "seed": int(tc.seed),
        "learning_rate": tc.learning_rate,
        "beta1": tc.beta1,
        "beta2": tc.beta2,
        "epsilon": tc.epsilon,
        "family_config": _family_meta(cfg),
        "prior_kind": prior.kind,
        "fixed_nu": prior.fixed_nu,
        "adam_steps": adam_steps,
        "leaf_names": leaf_names,
        "graph": {"rows": g.rows, "cols": g.cols, "mask": encode_mask(np.asarray(g.mask))},
        "molecule_names": list(molecule_names),
    }

    names = sorted(arrays)
    payload_parts: list[bytes] = []
    descriptors = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(arrays[name])
        arr = arr.astype(arr.dtype.newbyteorder("<")) if arr.dtype.byteorder == ">" else arr
        raw = arr.tobytes()
        descriptors.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        payload_parts.append(raw)
        offset += len(raw)
    payload = b"".join(payload_parts)
    header = {
        "version": CHECKPOINT_VERSION,
        "meta": meta,
        "arrays": descriptors,
        "payload_nbytes": len(payload),
        "payload_crc32": zlib.crc32(payload),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(CHECKPOINT_VERSION.to_bytes(4, "little"))
        f.write(len(header_bytes).to_bytes(8, "little"))
        f.write(header_bytes)
        f.write(payload)


def load_checkpoint(path: str) -> Checkpoint:
    """Decode and fully validate a checkpoint file before exposing any state."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(CHECKPOINT_MAGIC) + 12 or not blob.startswith(CHECKPOINT_MAGIC):
        raise DataError(f"{path} is not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    version = int.from_bytes(blob[pos : pos + 4], "little")
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    pos += 4
    header_len = int.from_bytes(blob[pos : pos + 8], "little")
    pos += 8
    if pos + header_len > len(blob):
        raise DataError("checkpoint header is truncated")
    header = json.loads(blob[pos : pos + header_len].decode("utf-8"))
    pos += header_len
    payload = blob[pos:]
    if len(payload) != header["payload_nbytes"]:
        raise DataError("checkpoint payload length does not match its header")
    if zlib.crc32(payload) != header["payload_crc32"]:
        raise DataError("checkpoint payload failed its integrity check")
    arrays = {}
    for desc in header["arrays"]:
        start, n = desc["offset"], desc["nbytes"]
        arr = np.frombuffer(payload[start : start + n], dtype=np.dtype(desc["dtype"]))
        arrays[desc["name"]] = arr.reshape(desc["shape"]).copy()
    return Checkpoint(meta=header["meta"], arrays=arrays)


def _validate_resume(ckpt: Checkpoint, ds: CountDataset, cfg: FamilyConfig, tc: TrainConfig) -> None:
    meta = ckpt.meta
    g = meta["graph"]
    if (g["rows"], g["cols"]) != (ds.graph.rows, ds.graph.cols):
        raise DataError(
            f"checkpoint was made on a {g['rows']}x{g['cols']} grid, "
            f"dataset is {ds.graph.rows}x{ds.graph.cols}"
        )
    if g["mask"] != encode_mask(np.asarray(ds.graph.mask)):
        raise DataError("checkpoint pixel mask does not match the dataset")
    if tuple(meta["molecule_names"]) != ds.molecule_names:
        raise DataError("checkpoint molecule names do not match the dataset")
    stored = meta["family_config"]
    if stored["family"] != cfg.family or stored["prior_kind"] != cfg.prior_kind:
        raise ConfigError("checkpoint family does not match the requested configuration")
    for key, mine in (
        ("seed", tc.seed),
        ("learning_rate", tc.learning_rate),
        ("beta1", tc.beta1),
        ("beta2", tc.beta2),
        ("epsilon", tc.epsilon),
    ):
        if meta[key] != mine:
            raise ConfigError(
                f"checkpoint {key}={meta[key]} differs from the requested {mine}; "
                "resuming under different optimizer settings is not reproducible"
            )


def _restore_adam(optimizer: torch.optim.Adam, ckpt: Checkpoint, leaf_names: list[str]) -> None:
    sd = optimizer.state_dict()
    state = {}
    for idx, name in enumerate(leaf_names):
        key = f"adam.exp_avg.{name}"
        if key not in ckpt.arrays:
            continue
        state[idx] = {
            "step": torch.tensor(float(ckpt.meta["adam_steps"][name])),
            "exp_avg": torch.as_tensor(ckpt.arrays[key]),
            "exp_avg_sq": torch.as_tensor(ckpt.arrays[f"adam.exp_avg_sq.{name}"]),
        }
    sd["state"] = state
    optimizer.load_state_dict(sd)


def fit(
    ds: CountDataset,
    cfg: FamilyConfig,
    tc: TrainConfig,
    fixed_nu: float | None = None,
    resume_from: str | None = None,
) -> FitResult:
    """Run (or continue) optimization and return the fitted state."""
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        _validate_resume(ckpt, ds, cfg, tc)
        stored = ckpt.meta["family_config"]
        cfg = replace(
            cfg,
            samples_grad=int(stored["samples_grad"]),
            samples_cdf=int(stored["samples_cdf"]),
            closed_form_expectations=bool(stored["closed_form_expectations"]),
        )
        vp = params_from_state(
            ds.graph,
            cfg,
            {name[len("param.") :]: arr for name, arr in ckpt.arrays.items() if name.startswith("param.")},
        )
        prior = PriorConfig(
            kind=ckpt.meta["prior_kind"],
            tau=ckpt.arrays["tau"],
            fixed_nu=ckpt.meta["fixed_nu"],
        )
        trace_arrays = {
            name[len("trace.") :]: arr for name, arr in ckpt.arrays.items() if name.startswith("trace.")
        }
        trace_arrays["seconds"] = np.zeros_like(trace_arrays["iteration"])
        trace = TrainTrace.from_arrays(trace_arrays)
        start_iter = int(ckpt.meta["iteration"])
    else:
        ckpt = None
        vp, prior = init_params(ds, cfg, fixed_nu=fixed_nu)
        trace = TrainTrace()
        start_iter = 0

    ctx = prepare_model(ds, prior)
    leaves = vp.trainable_leaves(cfg)
    leaf_names = list(leaves.keys())
    optimizer = torch.optim.Adam(
        list(leaves.values()),
        lr=tc.learning_rate,
        betas=(tc.beta1, tc.beta2),
        eps=tc.epsilon,
    )
    if ckpt is not None:
        _restore_adam(optimizer, ckpt, leaf_names)

    skipped: list[int] = []
    bad_streak = 0
    stopped_early = False
    window = tc.elbo_window

    def _checkpoint(iteration: int) -> None:
        save_checkpoint(
            tc.checkpoint_path, vp, cfg, prior, tc, iteration, optimizer, trace, ds.molecule_names
        )

    iteration = start_iter
    for iteration in range(start_iter, tc.max_iters):
        rng = iteration_rng(tc.seed, iteration)
        t0 = time.perf_counter()
        try:
            terms = elbo_terms(ctx, vp, prior, cfg, rng)
        except NumericsError as err:
            bad_streak += 1
            skipped.append(iteration)
            logger.warning("iteration %d skipped: %s", iteration, err)
            if bad_streak >= 10:
                if tc.checkpoint_path:
                    _checkpoint(iteration + 1)
                raise TrainingDivergedError(
                    f"10 consecutive non-finite objectives, last at iteration {iteration}",
                    term=err.term,
                ) from err
            continue
        bad_streak = 0
        optimizer.zero_grad(set_to_none=True)
        (-total_from_terms(terms)).backward()
        optimizer.step()
        bd = ElboBreakdown(**{name: float(v.detach()) for name, v in terms.items()})
        trace.append(iteration, bd, time.perf_counter() - t0)

        if tc.log_every and (iteration + 1) % tc.log_every == 0:
            logger.info("iter %d elbo %.4f", iteration, bd.total)
        if tc.checkpoint_every and tc.checkpoint_path and (iteration + 1) % tc.checkpoint_every == 0:
            _checkpoint(iteration + 1)
        if (
            tc.early_stop_rel_tol is not None
            and len(trace) >= 2 * window
            and (iteration + 1) % window == 0
        ):
            values = trace.elbo()
            recent = values[-window:].mean()
            prev = values[-2 * window : -window].mean()
            if abs(recent - prev) / max(1.0, abs(prev)) < tc.early_stop_rel_tol:
                stopped_early = True
                break

    iterations_run = iteration + 1 if tc.max_iters > start_iter else start_iter
    if tc.checkpoint_path:
        _checkpoint(iterations_run)
    return FitResult(
        params=vp,
        prior=prior,
        family=cfg,
        train=tc,
        trace=trace,
        iterations_run=iterations_run,
        stopped_early=stopped_early,
        skipped_iterations=skipped,
    )
