"""Synthetic censored count maps with piecewise-constant true rates.

True per-molecule rates are built by stacking axis-aligned rectangles and
discs with additive log-rate offsets on a flat base, so region interiors
are exactly constant and change points sit exactly on region boundaries.
Counts are competitive: each pixel's total is split multinomially across
molecules by the relative rates, and any count strictly below its
molecule's detection limit is withheld. Censoring is therefore a
deterministic function of the drawn counts, never an independent coin.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import CountDataset, make_dataset
from .errors import ConfigError, DataError
from .graph import build_grid_graph

__all__ = [
    "Rect",
    "Disc",
    "SimSpec",
    "SimTruth",
    "ChangePointReport",
    "simulate",
    "count_change_points",
    "paper_like_spec",
    "smoke_spec",
    "get_preset",
    "PRESET_NAMES",
    "save_truth",
    "load_truth",
    "save_spec",
    "load_spec",
]


@dataclass(frozen=True)
class Rect:
    """Half-open pixel rectangle [row0, row1) x [col0, col1) with a log-rate offset."""

    row0: int
    row1: int
    col0: int
    col1: int
    offset: float

    def validate(self, rows: int, cols: int) -> None:
        if not (0 <= self.row0 < self.row1 <= rows and 0 <= self.col0 < self.col1 <= cols):
            raise ConfigError(f"rectangle {self} does not fit a {rows}x{cols} grid")
        if not np.isfinite(self.offset):
            raise ConfigError("region offsets must be finite")

    def contains(self, rr: np.ndarray, cc: np.ndarray) -> np.ndarray:
        return (rr >= self.row0) & (rr < self.row1) & (cc >= self.col0) & (cc < self.col1)

    def to_dict(self) -> dict:
        return {"kind": "rect", "row0": self.row0, "row1": self.row1,
                "col0": self.col0, "col1": self.col1, "offset": self.offset}


@dataclass(frozen=True)
class Disc:
    """Disc of pixels within `radius` of (row, col), with a log-rate offset."""

    row: float
    col: float
    radius: float
    offset: float

    def validate(self, rows: int, cols: int) -> None:
        if self.radius <= 0:
            raise ConfigError("disc radius must be positive")
        if (self.row - self.radius < -0.5 or self.row + self.radius > rows - 0.5
                or self.col - self.radius < -0.5 or self.col + self.radius > cols - 0.5):
            raise ConfigError(f"disc {self} does not fit a {rows}x{cols} grid")
        if not np.isfinite(self.offset):
            raise ConfigError("region offsets must be finite")

    def contains(self, rr: np.ndarray, cc: np.ndarray) -> np.ndarray:
        return (rr - self.row) ** 2 + (cc - self.col) ** 2 <= self.radius**2

    def to_dict(self) -> dict:
        return {"kind": "disc", "row": self.row, "col": self.col,
                "radius": self.radius, "offset": self.offset}


Region = Rect | Disc


def _region_from_dict(d: dict) -> Region:
    kind = d.get("kind")
    if kind == "rect":
        return Rect(int(d["row0"]), int(d["row1"]), int(d["col0"]), int(d["col1"]), float(d["offset"]))
    if kind == "disc":
        return Disc(float(d["row"]), float(d["col"]), float(d["radius"]), float(d["offset"]))
    raise ConfigError(f"unknown region kind {kind!r}")


@dataclass(frozen=True)
class SimSpec:
    """Everything that defines one synthetic dataset, including its seed."""

    rows: int
    cols: int
    base_log_rate: tuple[float, ...]
    regions: tuple[tuple[Region, ...], ...]
    total_scale: float
    lod: tuple[int, ...]
    seed: int = 0
    constant_total: bool = False
    molecule_names: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ConfigError("grid dimensions must be positive")
        d = len(self.base_log_rate)
        if d < 1:
            raise ConfigError("need at least one molecule")
        if len(self.regions) != d or len(self.lod) != d:
            raise ConfigError("base_log_rate, regions, and lod must have one entry per molecule")
        if self.molecule_names is not None and len(self.molecule_names) != d:
            raise ConfigError("molecule_names length does not match")
        if not self.total_scale > 0:
            raise ConfigError("total_scale must be positive")
        if any(l < 0 for l in self.lod):
            raise ConfigError("detection limits must be nonnegative")
        for shapes in self.regions:
            for shape in shapes:
                shape.validate(self.rows, self.cols)

    @property
    def num_molecules(self) -> int:
        return len(self.base_log_rate)

    def names(self) -> tuple[str, ...]:
        if self.molecule_names is not None:
            return tuple(self.molecule_names)
        return tuple(f"met{j + 1}" for j in range(self.num_molecules))

    def to_dict(self) -> dict:
        return {
            "rows": self.rows,
            "cols": self.cols,
            "base_log_rate": list(self.base_log_rate),
            "regions": [[s.to_dict() for s in shapes] for shapes in self.regions],
            "total_scale": self.total_scale,
            "lod": list(self.lod),
            "seed": self.seed,
            "constant_total": self.constant_total,
            # default names stay implicit so the round trip preserves equality
            "molecule_names": list(self.molecule_names) if self.molecule_names else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimSpec":
        return cls(
            rows=int(d["rows"]),
            cols=int(d["cols"]),
            base_log_rate=tuple(float(v) for v in d["base_log_rate"]),
            regions=tuple(tuple(_region_from_dict(s) for s in shapes) for shapes in d["regions"]),
            total_scale=float(d["total_scale"]),
            lod=tuple(int(v) for v in d["lod"]),
            seed=int(d.get("seed", 0)),
            constant_total=bool(d.get("constant_total", False)),
            molecule_names=tuple(d["molecule_names"]) if d.get("molecule_names") else None,
        )


@dataclass(frozen=True)
class SimTruth:
    """Ground truth behind one simulated dataset."""

    theta: np.ndarray
    theta_tilde: np.ndarray
    change_point_edges: np.ndarray
    molecule_names: tuple[str, ...]


def true_log_rates(spec: SimSpec) -> np.ndarray:
    """The (pixels, molecules) log-rate matrix the spec describes.

    Pixels inside the same set of regions receive bitwise-identical values,
    so true change points are exact zero/nonzero distinctions.
    """
    rr, cc = np.meshgrid(np.arange(spec.rows), np.arange(spec.cols), indexing="ij")
    rr = rr.reshape(-1)
    cc = cc.reshape(-1)
    lt = np.empty((spec.rows * spec.cols, spec.num_molecules))
    for d in range(spec.num_molecules):
        col = np.full(rr.shape, spec.base_log_rate[d])
        for shape in spec.regions[d]:
            col = col + shape.offset * shape.contains(rr, cc)
        lt[:, d] = col
    return lt


def simulate(spec: SimSpec) -> tuple[CountDataset, SimTruth]:
    """Draw one dataset and return it with its generating truth."""
    graph = build_grid_graph(spec.rows, spec.cols)
    lt = true_log_rates(spec)
    theta = np.exp(lt)
    p = theta / theta.sum(axis=1, keepdims=True)

    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    m = graph.num_vertices
    if spec.constant_total:
        totals = np.full(m, int(round(spec.total_scale)), dtype=np.int64)
    else:
        totals = rng.poisson(spec.total_scale, size=m)
    counts = rng.multinomial(totals, p)

    lod = np.asarray(spec.lod, dtype=np.int64)
    observed = counts >= lod[None, :]
    if (~observed).all(axis=1).any():
        i = int(np.nonzero((~observed).all(axis=1))[0][0])
        raise DataError(
            f"pixel {i} censored every molecule; total_scale {spec.total_scale} is too "
            "small for the detection limits, increase it or lower the lods"
        )
    if ((counts * observed).sum(axis=1) < 1).any():
        i = int(np.nonzero((counts * observed).sum(axis=1) < 1)[0][0])
        raise DataError(
            f"pixel {i} has no observed counts; total_scale {spec.total_scale} is too "
            "small, increase it"
        )
    ds = make_dataset(counts, observed, lod, graph, spec.names())

    theta_tilde = theta / theta.sum(axis=0, keepdims=True)
    alpha = lt[graph.edge_i, :] - lt[graph.edge_j, :]
    truth = SimTruth(
        theta=theta,
        theta_tilde=theta_tilde,
        change_point_edges=alpha != 0.0,
        molecule_names=spec.names(),
    )
    return ds, truth


@dataclass(frozen=True)
class ChangePointReport:
    """Change-point counts against the identifiability budget M - M/D."""

    counts: np.ndarray
    bound: float
    within_bound: np.ndarray

    @property
    def ok(self) -> bool:
        return bool(self.within_bound.all())


def count_change_points(truth: SimTruth) -> ChangePointReport:
    m, d = truth.theta.shape
    counts = truth.change_point_edges.sum(axis=0)
    bound = m - m / d
    return ChangePointReport(
        counts=counts.astype(np.int64),
        bound=bound,
        within_bound=counts <= bound,
    )


def paper_like_spec(seed: int = 0, total_scale: float = 20000.0) -> SimSpec:
    """Seven-molecule 32x32 design with mixed heterogeneity and censoring.

    The total scale puts the abundant molecules in the thousands of counts
    per pixel, where a per-pixel normalization is limited by competitive
    distortion (one molecule's proportion shifts wherever the others vary)
    rather than by sampling noise. Two low-abundance molecules carry
    detection limits tuned so roughly a tenth to a third of their pixels
    censor at the default total scale.
    """
    n = 32
    regions = (
        # near-constant: one broad, weak plateau
        (Rect(4, 28, 4, 28, 0.15),),
        # one strong disc
        (Disc(10.0, 10.0, 6.0, np.log(4.0)),),
        # one strong rectangle
        (Rect(16, 28, 14, 26, np.log(3.0)),),
        # two opposing plateaus
        (Rect(2, 12, 2, 12, np.log(2.5)), Rect(20, 30, 18, 30, -np.log(2.5))),
        # heterogeneous multi-region pattern
        (
            Disc(8.0, 22.0, 5.0, np.log(3.0)),
            Rect(18, 30, 2, 12, np.log(2.0)),
            Disc(24.0, 24.0, 4.0, -np.log(2.0)),
            Rect(0, 6, 0, 16, np.log(1.5)),
        ),
        # low abundance, censored, single disc
        (Disc(16.0, 16.0, 8.0, np.log(3.0)),),
        # low abundance, censored, single rectangle
        (Rect(6, 22, 18, 30, np.log(2.5)),),
    )
    base = (0.0, 0.0, 0.0, 0.0, 0.0, -6.7, -6.8)
    lod = (0, 0, 0, 0, 0, 3, 3)
    return SimSpec(
        rows=n,
        cols=n,
        base_log_rate=base,
        regions=regions,
        total_scale=total_scale,
        lod=lod,
        seed=seed,
    )


def smoke_spec(seed: int = 0) -> SimSpec:
    """Tiny 8x8 three-molecule design for fast end-to-end runs."""
    return SimSpec(
        rows=8,
        cols=8,
        base_log_rate=(0.0, 0.0, -2.8),
        regions=(
            (Rect(0, 8, 0, 4, np.log(3.0)),),
            (),
            (Disc(4.0, 4.0, 2.5, np.log(2.0)),),
        ),
        total_scale=200.0,
        lod=(0, 0, 3),
        seed=seed,
    )


PRESET_NAMES = ("paper-like", "smoke")


def get_preset(name: str, seed: int = 0) -> SimSpec:
    if name == "paper-like":
        return paper_like_spec(seed)
    if name == "smoke":
        return smoke_spec(seed)
    raise ConfigError(f"unknown preset {name!r}; available: {', '.join(PRESET_NAMES)}")


def save_spec(spec: SimSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_spec(path: str | Path) -> SimSpec:
    return SimSpec.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def save_truth(truth: SimTruth, path: str | Path) -> None:
    """Write the normalized truth as (pixel, molecule, theta_tilde) rows."""
    lines = ["pixel,molecule,theta_tilde"]
    m, d = truth.theta_tilde.shape
    for i in range(m):
        for j in range(d):
            lines.append(f"{i},{truth.molecule_names[j]},{float(truth.theta_tilde[i, j])!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_truth(path: str | Path) -> tuple[np.ndarray, tuple[str, ...]]:
    """Read a truth CSV back into an array plus molecule names."""
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or text[0].strip() != "pixel,molecule,theta_tilde":
        raise DataError(f"{path} is not a truth file")
    names: list[str] = []
    entries: dict[tuple[int, str], float] = {}
    max_pixel = -1
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 fields")
        pixel = int(parts[0])
        name = parts[1]
        if name not in names:
            names.append(name)
        entries[(pixel, name)] = float(parts[2])
        max_pixel = max(max_pixel, pixel)
    values = np.zeros((max_pixel + 1, len(names)))
    for (pixel, name), v in entries.items():
        values[pixel, names.index(name)] = v
    return values, tuple(names)
