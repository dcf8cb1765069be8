"""Multi-magnification image graphs.

Nodes are stored level-major: all level-0 nodes (one per pixel, row-major),
then level 1, and so on. A node's position is ``(x, y, z)`` in ``[0, 1]^3``
where ``x`` follows image columns, ``y`` follows rows and ``z`` is the height
of the node above the image plane. The square footprint a node projects onto
the image has side ``z * n0`` pixels, so a default level-``m`` node with
``z = factor**m / n0`` covers exactly its child block.

Feature vector layout (see :func:`node_feature_vector`)::

    [c1, c2, c3, m_hat, x, y, z]
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Segments

FEATURE_DIM = 7
GRAPH_SCHEMA = "npgat.graph/1"
MAX_LEVELS = 5


class GraphError(ValueError):
    pass


def king_edges(rows, cols):
    """Undirected king-graph edges of a ``rows x cols`` grid, as an (E, 2) array.

    Node ``(i, j)`` has index ``i * cols + j``; each pair appears once with
    the smaller index first.
    """
    if rows < 1 or cols < 1:
        raise GraphError("grid dimensions must be >= 1")
    idx = np.arange(rows * cols).reshape(rows, cols)
    pairs = [
        (idx[:, :-1], idx[:, 1:]),  # horizontal
        (idx[:-1, :], idx[1:, :]),  # vertical
        (idx[:-1, :-1], idx[1:, 1:]),  # diagonal
        (idx[:-1, 1:], idx[1:, :-1]),  # anti-diagonal
    ]
    edges = [np.stack([a.ravel(), b.ravel()], axis=1) for a, b in pairs]
    edges = np.concatenate(edges, axis=0).astype(np.int64)
    edges.sort(axis=1)
    return edges[np.lexsort((edges[:, 1], edges[:, 0]))]


@dataclass
class Footprint:
    center: tuple
    half_side: float
    rows: np.ndarray  # covered pixel rows (inclusive range as index array)
    cols: np.ndarray

    @property
    def valid_count(self):
        return int(self.rows.size * self.cols.size)

    def pixels(self):
        """Covered ``(row, col)`` pairs."""
        rr, cc = np.meshgrid(self.rows, self.cols, indexing="ij")
        return np.stack([rr.ravel(), cc.ravel()], axis=1)


def _exact_range(center, h):
    """Integer ``k`` range with ``|k + 0.5 - center| <= h``, evaluated exactly
    as written so boundary rounding matches a direct per-pixel test."""
    lo = np.ceil(center - h - 0.5).astype(np.int64)
    hi = np.floor(center + h - 0.5).astype(np.int64)
    inside = lambda k: np.abs(k + 0.5 - center) <= h
    lo = np.where(inside(lo - 1), lo - 1, lo)
    lo = np.where(~inside(lo) & (lo <= hi), lo + 1, lo)
    hi = np.where(inside(hi + 1), hi + 1, hi)
    hi = np.where(~inside(hi) & (hi >= lo), hi - 1, hi)
    return lo, hi


def _footprint_ranges(positions, n0):
    """Inclusive pixel ranges ``[r0, r1] x [c0, c1]`` per node (may be empty).

    A pixel is covered when its center lies in the closed square of half-side
    ``z * n0 / 2`` around ``(x * n0, y * n0)``.
    """
    positions = np.atleast_2d(positions)
    cx = positions[:, 0] * n0
    cy = positions[:, 1] * n0
    h = positions[:, 2] * n0 / 2.0
    # pixel k has center k + 0.5; covered iff |k + 0.5 - c| <= h
    c0, c1 = _exact_range(cx, h)
    r0, r1 = _exact_range(cy, h)
    c0 = np.clip(c0, 0, None)
    r0 = np.clip(r0, 0, None)
    c1 = np.clip(c1, None, n0 - 1)
    r1 = np.clip(r1, None, n0 - 1)
    return r0, r1, c0, c1


def footprint_counts(positions, n0):
    r0, r1, c0, c1 = _footprint_ranges(positions, n0)
    return np.clip(r1 - r0 + 1, 0, None) * np.clip(c1 - c0 + 1, 0, None)


def pyramid_footprint(position, n0):
    """Footprint of a single node at ``position`` on an ``n0 x n0`` image."""
    position = np.asarray(position, dtype=np.float64)
    r0, r1, c0, c1 = (int(v[0]) for v in _footprint_ranges(position[None, :], n0))
    rows = np.arange(r0, r1 + 1) if r1 >= r0 else np.zeros(0, dtype=np.int64)
    cols = np.arange(c0, c1 + 1) if c1 >= c0 else np.zeros(0, dtype=np.int64)
    return Footprint(
        center=(float(position[0] * n0), float(position[1] * n0)),
        half_side=float(position[2] * n0 / 2.0),
        rows=rows,
        cols=cols,
    )


def footprint_means(positions, planes):
    """Mean of each ``planes[..., k]`` over every node's footprint.

    Uses a summed-area table, so cost is linear in the node count. Returns
    ``(means, counts)``; nodes with an empty footprint get mean 0.
    """
    planes = np.asarray(planes, dtype=np.float64)
    if planes.ndim == 2:
        planes = planes[..., None]
    n0 = planes.shape[0]
    sat = np.zeros((n0 + 1, n0 + 1, planes.shape[2]))
    sat[1:, 1:] = planes.cumsum(axis=0).cumsum(axis=1)
    r0, r1, c0, c1 = _footprint_ranges(positions, n0)
    counts = np.clip(r1 - r0 + 1, 0, None) * np.clip(c1 - c0 + 1, 0, None)
    ok = counts > 0
    r0c, r1c = np.where(ok, r0, 0), np.where(ok, r1 + 1, 0)
    c0c, c1c = np.where(ok, c0, 0), np.where(ok, c1 + 1, 0)
    sums = sat[r1c, c1c] - sat[r0c, c1c] - sat[r1c, c0c] + sat[r0c, c0c]
    means = np.zeros_like(sums)
    means[ok] = sums[ok] / counts[ok, None]
    return means, counts


@dataclass
class Arcs:
    """Directed view of one or more graphs: both directions of every edge plus
    a self-arc per node, sorted by (dst, src)."""

    src: np.ndarray
    dst: np.ndarray
    n_nodes: int
    segments: Segments = field(repr=False)
    _src_index: Segments = field(default=None, repr=False)

    @property
    def src_index(self):
        """``src`` as a reusable gather index."""
        if self._src_index is None:
            self._src_index = Segments(self.src, self.n_nodes)
        return self._src_index

    @classmethod
    def from_edges(cls, edges, n_nodes, self_arcs=True):
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        src = [edges[:, 0], edges[:, 1]]
        dst = [edges[:, 1], edges[:, 0]]
        if self_arcs:
            loop = np.arange(n_nodes, dtype=np.int64)
            src.append(loop)
            dst.append(loop)
        src = np.concatenate(src)
        dst = np.concatenate(dst)
        order = np.lexsort((src, dst))
        src, dst = src[order], dst[order]
        return cls(src, dst, int(n_nodes), Segments(dst, n_nodes))

    @classmethod
    def concat(cls, arcs_list):
        """Disjoint union (node ids offset in list order)."""
        src, dst, off = [], [], 0
        for a in arcs_list:
            src.append(a.src + off)
            dst.append(a.dst + off)
            off += a.n_nodes
        src = np.concatenate(src)
        dst = np.concatenate(dst)
        return cls(src, dst, off, Segments(dst, off))

    def in_degree(self):
        return self.segments.counts()


@dataclass
class MagnificationGraph:
    levels: int
    factor: int
    sizes: list  # n(m) per level
    level: np.ndarray  # (N,) magnification index
    ij: np.ndarray  # (N, 2) grid row / column within the level
    positions: np.ndarray  # (N, 3)
    colors: np.ndarray  # (N, 3)
    empty: np.ndarray  # (N,) footprint had no valid pixel / parent claimed no child
    edges: np.ndarray  # (E, 2) undirected, smaller index first
    _arcs: Arcs = field(default=None, repr=False, compare=False)

    @property
    def n0(self):
        return self.sizes[0]

    @property
    def n_nodes(self):
        return int(self.level.size)

    @property
    def offsets(self):
        return np.concatenate([[0], np.cumsum([s * s for s in self.sizes])]).astype(np.int64)

    def level_slice(self, m):
        off = self.offsets
        return slice(int(off[m]), int(off[m + 1]))

    def index(self, m, i, j):
        return int(self.offsets[m] + i * self.sizes[m] + j)

    @property
    def m_hat(self):
        if self.levels == 1:
            return np.zeros(self.n_nodes)
        return self.level / (self.levels - 1)

    @property
    def mobile(self):
        """Mask of nodes whose position may change (every level above 0)."""
        return self.level > 0

    def arcs(self):
        if self._arcs is None:
            self._arcs = Arcs.from_edges(self.edges, self.n_nodes)
        return self._arcs

    def features(self):
        """(N, 7) node feature matrix."""
        return np.concatenate(
            [self.colors, self.m_hat[:, None], self.positions], axis=1
        )

    def copy(self):
        g = MagnificationGraph(
            self.levels,
            self.factor,
            list(self.sizes),
            self.level.copy(),
            self.ij.copy(),
            self.positions.copy(),
            self.colors.copy(),
            self.empty.copy(),
            self.edges,  # topology is shared and never mutated
        )
        g._arcs = self._arcs
        return g

    def default_positions(self):
        return _default_positions(self.level, self.ij, self.factor, self.n0)

    # ------------------------------------------------------------------
    # serialization

    def to_dict(self):
        nodes = []
        for k in range(self.n_nodes):
            nodes.append(
                {
                    "level": int(self.level[k]),
                    "i": int(self.ij[k, 0]),
                    "j": int(self.ij[k, 1]),
                    "position": [float(v) for v in self.positions[k]],
                    "color": [float(v) for v in self.colors[k]],
                    "empty": bool(self.empty[k]),
                }
            )
        return {
            "schema": GRAPH_SCHEMA,
            "levels": self.levels,
            "factor": self.factor,
            "sizes": list(self.sizes),
            "feature_layout": ["c1", "c2", "c3", "m_hat", "x", "y", "z"],
            "nodes": nodes,
            "edges": self.edges.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("schema") != GRAPH_SCHEMA:
            raise GraphError(f"unsupported graph schema {d.get('schema')!r}")
        nodes = d["nodes"]
        g = build_base_graph(d["sizes"][0], d["sizes"][0], d["levels"], d["factor"])
        if len(nodes) != g.n_nodes:
            raise GraphError("node count does not match levels/sizes")
        g.positions = np.array([n["position"] for n in nodes], dtype=np.float64)
        g.colors = np.array([n["color"] for n in nodes], dtype=np.float64)
        g.empty = np.array([n["empty"] for n in nodes], dtype=bool)
        edges = np.asarray(d["edges"], dtype=np.int64).reshape(-1, 2)
        if not np.array_equal(edges, g.edges):
            raise GraphError("edge list does not match the base topology")
        return g

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def _default_positions(level, ij, factor, n0):
    block = np.power(float(factor), level)
    x = (ij[:, 1] + 0.5) * block / n0
    y = (ij[:, 0] + 0.5) * block / n0
    z = block / n0
    return np.stack([x, y, z], axis=1)


def build_base_graph(height, width, levels, factor=2):
    if height != width:
        raise GraphError(f"graph patches must be square, got {height}x{width}")
    n0 = int(height)
    if n0 < 1:
        raise GraphError("image size must be >= 1")
    if not 1 <= levels <= MAX_LEVELS:
        raise GraphError(f"levels must be in [1, {MAX_LEVELS}], got {levels}")
    if levels > 1 and factor < 2:
        raise GraphError("factor must be >= 2")
    if levels > 1 and n0 % (factor ** (levels - 1)):
        raise GraphError(f"factor**(levels-1) = {factor ** (levels - 1)} does not divide {n0}")

    sizes = [n0 // factor**m for m in range(levels)]
    level, ij, edges = [], [], []
    offset = 0
    offsets = []
    for m, n in enumerate(sizes):
        offsets.append(offset)
        ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        level.append(np.full(n * n, m, dtype=np.int64))
        ij.append(np.stack([ii.ravel(), jj.ravel()], axis=1))
        edges.append(king_edges(n, n) + offset)
        offset += n * n
    for m in range(levels - 1):
        n, n_up = sizes[m], sizes[m + 1]
        ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        child = offsets[m] + ii * n + jj
        parent = offsets[m + 1] + (ii // factor) * n_up + jj // factor
        edges.append(np.stack([child.ravel(), parent.ravel()], axis=1))

    level = np.concatenate(level)
    ij = np.concatenate(ij).astype(np.int64)
    edges = np.concatenate(edges).astype(np.int64)
    edges.sort(axis=1)
    edges = edges[np.lexsort((edges[:, 1], edges[:, 0]))]
    positions = _default_positions(level, ij, factor, n0)
    n = level.size
    return MagnificationGraph(
        levels=levels,
        factor=factor,
        sizes=sizes,
        level=level,
        ij=ij,
        positions=positions,
        colors=np.zeros((n, 3)),
        empty=np.zeros(n, dtype=bool),
        edges=edges,
    )


def project_features(graph, image):
    """Set every node's color to the mean image color over its footprint."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=2)
    if image.shape[:2] != (graph.n0, graph.n0) or image.shape[2] != 3:
        raise GraphError(
            f"image shape {image.shape} does not match graph size {graph.n0}x{graph.n0}x3"
        )
    g = graph.copy()
    means, counts = footprint_means(g.positions, image)
    g.colors = means
    g.empty = counts == 0
    return g


def node_feature_vector(graph, k):
    """Feature 7-vector ``[c1, c2, c3, m_hat, x, y, z]`` of node ``k``."""
    return np.concatenate([graph.colors[k], [graph.m_hat[k]], graph.positions[k]])


def graph_from_image(image, levels, factor=2):
    image = np.asarray(image, dtype=np.float64)
    g = build_base_graph(image.shape[0], image.shape[1], levels, factor)
    return project_features(g, image)
