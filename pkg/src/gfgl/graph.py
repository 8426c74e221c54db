"""Pixel-grid spatial graphs and their sparse incidence algebra.

A tissue image is modeled as an undirected graph whose vertices are the
unmasked pixels of an ``rows x cols`` grid and whose edges join 4-neighbors
(von Neumann connectivity). The signed incidence operator ``H`` maps a
vertex signal to edge differences; its unsigned counterpart ``H+`` has both
entries +1, and ``(H+)^T`` therefore sums edge values over the edges
incident to each vertex. Graphs are immutable after construction and safe
for concurrent reads.

Everything is stored in edge-list / index-array form; dense ``R x M``
matrices are never materialized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import DataError

__all__ = [
    "SpatialGraph",
    "IncidenceOperator",
    "build_grid_graph",
    "graph_from_edges",
    "apply_incidence",
    "apply_incidence_transpose",
    "apply_abs_incidence_transpose",
    "incidence_operator",
]


@dataclass(frozen=True)
class SpatialGraph:
    """Undirected graph over grid pixels, with precomputed index arrays.

    Attributes
    ----------
    rows, cols:
        Grid dimensions. For non-grid graphs built via ``graph_from_edges``
        these describe the bounding box of the supplied coordinates.
    mask:
        ``(rows, cols)`` boolean array; True marks pixels that are vertices.
    edges:
        ``(R, 2)`` int array; each row is ``(i, j)`` with ``i < j``
        (canonical orientation, so H's sign convention is reproducible).
    coordinates:
        ``(M, 2)`` int array of ``(row, col)`` per vertex, row-major order.
    incident_edges, incident_sign, incident_valid:
        ``(M, max_degree)`` padded per-vertex arrays: the edge indices in
        ``xi(i)``, the sign of vertex i in each such edge row of H
        (+1 when i is the smaller endpoint), and a validity mask for the
        padding. These drive gather-based operator applications that are
        bitwise reproducible regardless of thread count.
    neighbor_vertices:
        ``(M, max_degree)`` padded neighbor vertex per incident edge.
    """

    rows: int
    cols: int
    mask: np.ndarray
    edges: np.ndarray
    coordinates: np.ndarray
    incident_edges: np.ndarray = field(repr=False)
    incident_sign: np.ndarray = field(repr=False)
    incident_valid: np.ndarray = field(repr=False)
    neighbor_vertices: np.ndarray = field(repr=False)

    @property
    def num_vertices(self) -> int:
        return self.coordinates.shape[0]

    @property
    def num_edges(self) -> int:
        return self.edges.shape[0]

    @property
    def edge_i(self) -> np.ndarray:
        return self.edges[:, 0]

    @property
    def edge_j(self) -> np.ndarray:
        return self.edges[:, 1]

    @property
    def degrees(self) -> np.ndarray:
        return self.incident_valid.sum(axis=1)

    def adjacency(self, i: int) -> list[tuple[int, int]]:
        """xi(i): list of (edge index, neighbor vertex) incident to vertex i."""
        valid = self.incident_valid[i]
        return list(
            zip(self.incident_edges[i, valid].tolist(), self.neighbor_vertices[i, valid].tolist())
        )

    def vertex_index_grid(self) -> np.ndarray:
        """(rows, cols) int grid mapping pixel -> vertex index, -1 off-mask."""
        grid = np.full((self.rows, self.cols), -1, dtype=np.int64)
        grid[self.coordinates[:, 0], self.coordinates[:, 1]] = np.arange(self.num_vertices)
        return grid


@dataclass(frozen=True)
class IncidenceOperator:
    """Sparse CSR forms of H (signed) and H+ (unsigned), both R x M."""

    rows: int
    cols: int
    h: sp.csr_matrix
    h_abs: sp.csr_matrix


def _finalize_graph(rows: int, cols: int, mask: np.ndarray, edges: np.ndarray,
                    coordinates: np.ndarray) -> SpatialGraph:
    m = coordinates.shape[0]
    r = edges.shape[0]
    degree = np.zeros(m, dtype=np.int64)
    if r:
        np.add.at(degree, edges[:, 0], 1)
        np.add.at(degree, edges[:, 1], 1)
    max_deg = max(int(degree.max()) if m else 0, 1)
    incident_edges = np.zeros((m, max_deg), dtype=np.int64)
    incident_sign = np.zeros((m, max_deg), dtype=np.float64)
    incident_valid = np.zeros((m, max_deg), dtype=bool)
    neighbor = np.zeros((m, max_deg), dtype=np.int64)
    cursor = np.zeros(m, dtype=np.int64)
    for e in range(r):
        i, j = int(edges[e, 0]), int(edges[e, 1])
        for v, sign, other in ((i, 1.0, j), (j, -1.0, i)):
            c = cursor[v]
            incident_edges[v, c] = e
            incident_sign[v, c] = sign
            incident_valid[v, c] = True
            neighbor[v, c] = other
            cursor[v] += 1
    return SpatialGraph(
        rows=rows,
        cols=cols,
        mask=mask,
        edges=edges,
        coordinates=coordinates,
        incident_edges=incident_edges,
        incident_sign=incident_sign,
        incident_valid=incident_valid,
        neighbor_vertices=neighbor,
    )


def build_grid_graph(rows: int, cols: int, pixel_mask: np.ndarray | None = None) -> SpatialGraph:
    """Build the 4-neighbor graph over the masked-in pixels of a grid.

    Vertices are masked-in pixels in row-major order; edges connect
    horizontally or vertically adjacent pixels that are both in the mask.
    Construction is deterministic given ``(rows, cols, pixel_mask)``.

    Raises
    ------
    DataError
        If dimensions are invalid, the mask shape mismatches, or the mask
        selects no pixels.
    """
    if rows < 1 or cols < 1:
        raise DataError(f"grid dimensions must be >= 1, got {rows}x{cols}")
    if pixel_mask is None:
        mask = np.ones((rows, cols), dtype=bool)
    else:
        mask = np.asarray(pixel_mask, dtype=bool)
        if mask.shape != (rows, cols):
            raise DataError(f"mask shape {mask.shape} does not match grid {rows}x{cols}")
    if not mask.any():
        raise DataError("empty graph: mask selects no pixels")

    index = np.full((rows, cols), -1, dtype=np.int64)
    rr, cc = np.nonzero(mask)
    index[rr, cc] = np.arange(rr.size)
    coordinates = np.stack([rr, cc], axis=1).astype(np.int64)

    edges = []
    for v in range(rr.size):
        r, c = int(rr[v]), int(cc[v])
        if c + 1 < cols and mask[r, c + 1]:
            edges.append((v, int(index[r, c + 1])))
        if r + 1 < rows and mask[r + 1, c]:
            edges.append((v, int(index[r + 1, c])))
    edge_arr = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    # row-major vertex order makes the right/down neighbor the larger index
    return _finalize_graph(rows, cols, mask, edge_arr, coordinates)


def graph_from_edges(num_vertices: int, edges, coordinates=None) -> SpatialGraph:
    """Build a graph from an explicit edge list (test/internal use only).

    Edges are canonicalized to (min, max) order. Coordinates default to a
    single row of pixels.
    """
    if num_vertices < 1:
        raise DataError("graph needs at least one vertex")
    edge_arr = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edge_arr.size:
        if edge_arr.min() < 0 or edge_arr.max() >= num_vertices:
            raise DataError("edge endpoint out of range")
        if (edge_arr[:, 0] == edge_arr[:, 1]).any():
            raise DataError("self-loops are not allowed")
        edge_arr = np.stack([edge_arr.min(axis=1), edge_arr.max(axis=1)], axis=1)
        if len({(int(i), int(j)) for i, j in edge_arr}) != edge_arr.shape[0]:
            raise DataError("duplicate edges are not allowed")
    if coordinates is None:
        coordinates = np.stack(
            [np.zeros(num_vertices, dtype=np.int64), np.arange(num_vertices, dtype=np.int64)],
            axis=1,
        )
        rows, cols = 1, num_vertices
        mask = np.ones((rows, cols), dtype=bool)
    else:
        coordinates = np.asarray(coordinates, dtype=np.int64)
        rows = int(coordinates[:, 0].max()) + 1
        cols = int(coordinates[:, 1].max()) + 1
        mask = np.zeros((rows, cols), dtype=bool)
        mask[coordinates[:, 0], coordinates[:, 1]] = True
    return _finalize_graph(rows, cols, mask, edge_arr, coordinates)


def _check_length(name: str, value: np.ndarray, expected: int) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape != (expected,):
        raise DataError(f"{name} must have shape ({expected},), got {arr.shape}")
    return arr


def apply_incidence(graph: SpatialGraph, vertex_values) -> np.ndarray:
    """H v: per-edge differences out[r] = v[i] - v[j] for edge r = (i, j)."""
    v = _check_length("vertex_values", vertex_values, graph.num_vertices)
    return v[graph.edge_i] - v[graph.edge_j]


def apply_incidence_transpose(graph: SpatialGraph, edge_values) -> np.ndarray:
    """H^T w: signed sum of incident edge values at each vertex."""
    w = _check_length("edge_values", edge_values, graph.num_edges)
    m = graph.num_vertices
    return (np.bincount(graph.edge_i, weights=w, minlength=m)
            - np.bincount(graph.edge_j, weights=w, minlength=m))


def apply_abs_incidence_transpose(graph: SpatialGraph, edge_values) -> np.ndarray:
    """(H+)^T w: out[i] = sum of w over the edges incident to vertex i.

    Accumulates in per-vertex incident-slot order (ascending edge index), the
    same fold the batched samplers use, so the two paths agree bitwise.
    """
    w = _check_length("edge_values", edge_values, graph.num_edges)
    if not np.isfinite(w).all():
        raise DataError("edge_values must be finite")
    out = np.zeros(graph.num_vertices)
    if graph.num_edges == 0:
        return out
    padded = np.where(graph.incident_valid, w[graph.incident_edges], 0.0)
    for c in range(padded.shape[1]):
        out += padded[:, c]
    return out


def incidence_operator(graph: SpatialGraph) -> IncidenceOperator:
    """Sparse CSR H and H+ for callers that want matrix form."""
    r, m = graph.num_edges, graph.num_vertices
    rows = np.repeat(np.arange(r, dtype=np.int64), 2)
    cols = graph.edges.reshape(-1)
    data = np.tile(np.array([1.0, -1.0]), r)
    h = sp.csr_matrix((data, (rows, cols)), shape=(r, m))
    h_abs = sp.csr_matrix((np.abs(data), (rows, cols)), shape=(r, m))
    return IncidenceOperator(rows=r, cols=m, h=h, h_abs=h_abs)
