"""Count datasets with left-censoring metadata, and their file formats.

A dataset couples an ``M x D`` matrix of molecular counts on the pixels of a
:class:`~gfgl.graph.SpatialGraph` with a boolean ``observed`` matrix. An
unobserved entry means the instrument could not report the count because it
fell below that molecule's limit of detection (LOD): the value is unknown,
known only to be strictly less than ``lod[d]``. Zeros are legitimate
observed counts and are distinct from censoring.

File formats
------------
counts CSV
    Header ``pixel_row,pixel_col,<molecule names...>``, then one row per
    vertex in row-major pixel order. Entries are nonnegative integers or the
    literal token ``NA`` (case-sensitive) for censored values.
meta file
    Line-oriented ``key = value``. Keys: ``grid_rows``, ``grid_cols``,
    optional ``mask`` (run-length string over the row-major grid, e.g.
    ``"7T,2F,55T"``), and ``lod.<molecule>`` for each molecule.

Molecule names may be any unicode text without ``=``, newlines, or
leading/trailing whitespace. Datasets are immutable after load.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .graph import SpatialGraph, build_grid_graph

__all__ = [
    "CountDataset",
    "PixelTotals",
    "make_dataset",
    "load_dataset",
    "save_dataset",
    "compute_totals",
    "encode_mask",
    "decode_mask",
    "datasets_equal",
]

CENSOR_TOKEN = "NA"


@dataclass(frozen=True)
class CountDataset:
    """Validated compositional count data on a pixel grid.

    ``counts[i, d]`` is meaningful only where ``observed[i, d]`` is True;
    censored slots are stored as 0 and ignored everywhere.
    """

    counts: np.ndarray
    observed: np.ndarray
    lod: np.ndarray
    graph: SpatialGraph
    molecule_names: tuple[str, ...]

    @property
    def num_pixels(self) -> int:
        return self.counts.shape[0]

    @property
    def num_molecules(self) -> int:
        return self.counts.shape[1]

    def censored_sets(self) -> list[np.ndarray]:
        """Per-pixel arrays of censored molecule indices (C_i)."""
        return [np.nonzero(~self.observed[i])[0] for i in range(self.num_pixels)]


@dataclass(frozen=True)
class PixelTotals:
    """Observed total count per pixel: N_i = sum over observed d of x[i, d]."""

    totals: np.ndarray


def _validate_names(names: tuple[str, ...]) -> None:
    if len(names) == 0:
        raise DataError("dataset needs at least one molecule column")
    if len(set(names)) != len(names):
        raise DataError("molecule names must be unique")
    for name in names:
        if not name or name != name.strip():
            raise DataError(f"invalid molecule name {name!r}: empty or padded with whitespace")
        if "=" in name or "\n" in name or "\r" in name:
            raise DataError(f"invalid molecule name {name!r}: '=' and newlines are reserved")


def make_dataset(counts, observed, lod, graph: SpatialGraph, molecule_names) -> CountDataset:
    """Validate arrays and assemble an immutable CountDataset."""
    names = tuple(str(n) for n in molecule_names)
    _validate_names(names)
    counts = np.asarray(counts, dtype=np.int64)
    observed = np.asarray(observed, dtype=bool)
    lod = np.asarray(lod, dtype=np.int64)
    m, d = graph.num_vertices, len(names)
    if counts.shape != (m, d):
        raise DataError(f"counts shape {counts.shape} does not match graph/molecules ({m}, {d})")
    if observed.shape != (m, d):
        raise DataError(f"observed shape {observed.shape} does not match counts {counts.shape}")
    if lod.shape != (d,):
        raise DataError(f"lod must have one entry per molecule, got shape {lod.shape}")
    if (counts[observed] < 0).any():
        raise DataError("negative counts are not allowed")
    if (lod < 0).any():
        raise DataError("limits of detection must be nonnegative")
    censored_any = (~observed).any(axis=0)
    if (censored_any & (lod < 1)).any():
        bad = [names[k] for k in np.nonzero(censored_any & (lod < 1))[0]]
        raise DataError(f"molecules with censored entries need lod >= 1: {bad}")
    if (~observed).all(axis=1).any():
        i = int(np.nonzero((~observed).all(axis=1))[0][0])
        raise DataError(f"pixel {i} has no observed molecule (all-NA row)")
    totals = (counts * observed).sum(axis=1)
    if (totals < 1).any():
        i = int(np.nonzero(totals < 1)[0][0])
        raise DataError(f"pixel {i} has zero observed total; every pixel needs N_i >= 1")
    counts = np.where(observed, counts, 0)  # censored slots carry no information
    counts.flags.writeable = False
    observed = observed.copy()
    observed.flags.writeable = False
    lod = lod.copy()
    lod.flags.writeable = False
    return CountDataset(counts=counts, observed=observed, lod=lod, graph=graph,
                        molecule_names=names)


def compute_totals(ds: CountDataset) -> PixelTotals:
    """Observed-only totals; censored entries never contribute."""
    return PixelTotals(totals=(ds.counts * ds.observed).sum(axis=1))


def encode_mask(mask: np.ndarray) -> str:
    flat = mask.reshape(-1)
    runs = []
    start = 0
    for k in range(1, flat.size + 1):
        if k == flat.size or flat[k] != flat[start]:
            runs.append(f"{k - start}{'T' if flat[start] else 'F'}")
            start = k
    return ",".join(runs)


def decode_mask(text: str, rows: int, cols: int) -> np.ndarray:
    values = []
    for token in text.split(","):
        token = token.strip()
        if len(token) < 2 or token[-1] not in "TF" or not token[:-1].isdigit():
            raise DataError(f"malformed mask run token {token!r}")
        values.extend([token[-1] == "T"] * int(token[:-1]))
    if len(values) != rows * cols:
        raise DataError(f"mask run length {len(values)} does not cover {rows}x{cols} grid")
    return np.asarray(values, dtype=bool).reshape(rows, cols)


def _parse_meta(meta_path: Path) -> dict[str, str]:
    entries: dict[str, str] = {}
    for lineno, raw in enumerate(meta_path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition(" = ")
        if not sep or not key:
            raise DataError(f"{meta_path}:{lineno}: expected 'key = value', got {raw!r}")
        if key in entries:
            raise DataError(f"{meta_path}:{lineno}: duplicate key {key!r}")
        entries[key] = value
    return entries


def _meta_int(entries: dict[str, str], key: str, path: Path) -> int:
    if key not in entries:
        raise DataError(f"{path}: missing required key {key!r}")
    try:
        return int(entries[key])
    except ValueError as exc:
        raise DataError(f"{path}: key {key!r} must be an integer, got {entries[key]!r}") from exc


def load_dataset(counts_path, meta_path) -> CountDataset:
    """Load and validate a dataset from its counts CSV and meta file.

    Raises DataError for malformed files, negative counts, all-NA pixels,
    rows out of row-major order, or a censored molecule without an LOD.
    """
    counts_path, meta_path = Path(counts_path), Path(meta_path)
    entries = _parse_meta(meta_path)
    rows = _meta_int(entries, "grid_rows", meta_path)
    cols = _meta_int(entries, "grid_cols", meta_path)
    mask = decode_mask(entries["mask"], rows, cols) if "mask" in entries else None
    graph = build_grid_graph(rows, cols, mask)

    with counts_path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{counts_path}: empty file") from None
        if header[:2] != ["pixel_row", "pixel_col"]:
            raise DataError(
                f"{counts_path}: header must start with pixel_row,pixel_col, got {header[:2]}")
        names = tuple(header[2:])
        _validate_names(names)
        d = len(names)
        counts = np.zeros((graph.num_vertices, d), dtype=np.int64)
        observed = np.ones((graph.num_vertices, d), dtype=bool)
        n_rows = 0
        for row in reader:
            if len(row) != d + 2:
                raise DataError(
                    f"{counts_path}: row {n_rows + 2} has {len(row)} fields, expected {d + 2}")
            if n_rows >= graph.num_vertices:
                raise DataError(f"{counts_path}: more rows than masked-in pixels "
                                f"({graph.num_vertices})")
            try:
                r, c = int(row[0]), int(row[1])
            except ValueError as exc:
                raise DataError(f"{counts_path}: row {n_rows + 2}: bad pixel coordinates") from exc
            want = graph.coordinates[n_rows]
            if (r, c) != (int(want[0]), int(want[1])):
                raise DataError(
                    f"{counts_path}: row {n_rows + 2} is pixel ({r}, {c}); expected "
                    f"({int(want[0])}, {int(want[1])}); rows must follow row-major mask order")
            for k, token in enumerate(row[2:]):
                if token == CENSOR_TOKEN:
                    observed[n_rows, k] = False
                else:
                    try:
                        value = int(token)
                    except ValueError as exc:
                        raise DataError(
                            f"{counts_path}: row {n_rows + 2}, column {names[k]!r}: "
                            f"expected integer or NA, got {token!r}") from exc
                    if value < 0:
                        raise DataError(
                            f"{counts_path}: row {n_rows + 2}, column {names[k]!r}: "
                            f"negative count {value}")
                    counts[n_rows, k] = value
            n_rows += 1
    if n_rows != graph.num_vertices:
        raise DataError(f"{counts_path}: {n_rows} pixel rows, expected {graph.num_vertices}")

    lod = np.zeros(d, dtype=np.int64)
    for key, value in entries.items():
        if key.startswith("lod."):
            name = key[4:]
            if name not in names:
                raise DataError(f"{meta_path}: lod given for unknown molecule {name!r}")
            try:
                lod[names.index(name)] = int(value)
            except ValueError as exc:
                raise DataError(f"{meta_path}: lod for {name!r} must be an integer") from exc
    censored_any = (~observed).any(axis=0)
    for k in np.nonzero(censored_any)[0]:
        if f"lod.{names[k]}" not in entries:
            raise DataError(
                f"{meta_path}: molecule {names[k]!r} has censored entries but no lod.{names[k]}")
    return make_dataset(counts, observed, lod, graph, names)


def save_dataset(ds: CountDataset, counts_path, meta_path) -> None:
    """Write the dataset so that load_dataset reproduces it bit-exactly."""
    counts_path, meta_path = Path(counts_path), Path(meta_path)
    counts_path.parent.mkdir(parents=True, exist_ok=True)
    meta_path.parent.mkdir(parents=True, exist_ok=True)
    with counts_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pixel_row", "pixel_col", *ds.molecule_names])
        for i in range(ds.num_pixels):
            r, c = ds.graph.coordinates[i]
            cells = [
                str(int(ds.counts[i, k])) if ds.observed[i, k] else CENSOR_TOKEN
                for k in range(ds.num_molecules)
            ]
            writer.writerow([int(r), int(c), *cells])
    lines = [f"grid_rows = {ds.graph.rows}", f"grid_cols = {ds.graph.cols}"]
    if not ds.graph.mask.all():
        lines.append(f"mask = {encode_mask(ds.graph.mask)}")
    for k, name in enumerate(ds.molecule_names):
        lines.append(f"lod.{name} = {int(ds.lod[k])}")
    meta_path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def datasets_equal(a: CountDataset, b: CountDataset) -> bool:
    return (
        a.molecule_names == b.molecule_names
        and a.graph.rows == b.graph.rows
        and a.graph.cols == b.graph.cols
        and np.array_equal(a.graph.mask, b.graph.mask)
        and np.array_equal(a.counts, b.counts)
        and np.array_equal(a.observed, b.observed)
        and np.array_equal(a.lod, b.lod)
    )
