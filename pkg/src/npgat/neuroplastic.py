"""Learned node-position mutation with fixed topology.

Only nodes above level 0 ever move. A small dense network maps a node's
feature vector to a new position in ``(0, 1)^3``; applying it ``K`` times
realizes the position recursion. After moving, :func:`enforce_constraints`
repairs footprints that lost too many valid pixels and
:func:`refresh_features` re-derives coarse colors from nearest children.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .autodiff import Tape
from .graph import FEATURE_DIM, footprint_counts

Z_RESOLUTION = 1e-6


@dataclass
class MutationConfig:
    iterations: int = 2
    min_valid_fraction: float = 0.25
    refresh: bool = True

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0.0 < self.min_valid_fraction <= 1.0:
            raise ValueError("min_valid_fraction must be in (0, 1]")


def glorot(rng, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class MutationNet:
    """Three dense layers ``7 -> h -> h -> 3``, sigmoid after each."""

    names = ("w1", "b1", "w2", "b2", "w3", "b3")

    def __init__(self, params):
        self.params = {k: np.asarray(params[k], dtype=np.float64) for k in self.names}

    @classmethod
    def init(cls, hidden=16, seed=0, identity_fit=True, fit_steps=600):
        rng = np.random.default_rng(seed)
        params = {
            "w1": glorot(rng, FEATURE_DIM, hidden),
            "b1": np.zeros(hidden),
            "w2": glorot(rng, hidden, hidden),
            "b2": np.zeros(hidden),
            "w3": glorot(rng, hidden, 3),
            "b3": np.zeros(3),
        }
        net = cls(params)
        if identity_fit:
            net.fit_identity(rng, steps=fit_steps)
        return net

    @classmethod
    def zeros(cls, hidden=16):
        return cls({
            "w1": np.zeros((FEATURE_DIM, hidden)), "b1": np.zeros(hidden),
            "w2": np.zeros((hidden, hidden)), "b2": np.zeros(hidden),
            "w3": np.zeros((hidden, 3)), "b3": np.zeros(3),
        })

    @property
    def hidden(self):
        return self.params["w1"].shape[1]

    def copy(self):
        return MutationNet({k: v.copy() for k, v in self.params.items()})

    def forward(self, tape, features, params=None):
        """Differentiable forward; ``params`` maps names to tape tensors."""
        p = params if params is not None else {k: tape.const(v) for k, v in self.params.items()}
        h = tape.sigmoid(tape.matmul(features, p["w1"]) + p["b1"])
        h = tape.sigmoid(tape.matmul(h, p["w2"]) + p["b2"])
        return tape.sigmoid(tape.matmul(h, p["w3"]) + p["b3"])

    def __call__(self, features):
        tape = Tape()
        return self.forward(tape, tape.const(features)).values

    def fit_identity(self, rng, steps=600, n=2048, lr=1e-2):
        """Pre-fit the net so its output reproduces the input position.

        Sampled positions follow default node layouts (any x, y; small z), so
        the first mutation rounds start near the unmodified base graph.
        """
        feats = np.empty((n, FEATURE_DIM))
        feats[:, :3] = rng.random((n, 3))
        feats[:, 3] = rng.choice([0.0, 0.25, 0.5, 0.75, 1.0], size=n)
        feats[:, 4:6] = rng.random((n, 2))
        feats[:, 6] = rng.uniform(0.02, 0.6, size=n)
        target = feats[:, 4:7]
        m = {k: np.zeros_like(v) for k, v in self.params.items()}
        v = {k: np.zeros_like(v) for k, v in self.params.items()}
        b1, b2, eps = 0.9, 0.999, 1e-8
        for t in range(1, steps + 1):
            tape = Tape()
            p = {k: tape.leaf(val) for k, val in self.params.items()}
            out = self.forward(tape, tape.const(feats), p)
            diff = out - target
            loss = tape.mean(diff * diff)
            tape.backward(loss)
            for k in self.names:
                g = p[k].grad
                m[k] = b1 * m[k] + (1 - b1) * g
                v[k] = b2 * v[k] + (1 - b2) * g * g
                mh = m[k] / (1 - b1**t)
                vh = v[k] / (1 - b2**t)
                self.params[k] = self.params[k] - lr * mh / (np.sqrt(vh) + eps)


def mutation_tape_positions(tape, net, graph, config, params=None):
    """Differentiable counterpart of :func:`mutate_positions`.

    Returns ``(mobile, moved)``: indices of mobile nodes and an (M, 3) tensor
    of their positions after ``config.iterations`` rounds, depending on
    ``params`` (tape tensors). Colors between rounds are refreshed without
    gradient, and values match :func:`mutate_positions` before clipping.
    """
    mobile = np.flatnonzero(graph.mobile)
    g = graph.copy()
    pos = tape.const(g.positions[mobile])
    for _ in range(config.iterations):
        feats = g.features()[mobile]
        x = tape.concat([tape.const(feats[:, :4]), pos], axis=1)
        pos = net.forward(tape, x, params)
        g.positions[mobile] = pos.values
        if config.refresh:
            g = refresh_features(g)
    return mobile, pos


def mutate_positions(graph, net, config):
    """Apply the mutation net ``config.iterations`` times to all mobile nodes."""
    g = graph.copy()
    if not g.mobile.any():
        return g
    mobile = np.flatnonzero(g.mobile)
    for _ in range(config.iterations):
        g.positions[mobile] = net(g.features()[mobile])
        if config.refresh:
            g = refresh_features(g)
    np.clip(g.positions, 0.0, 1.0, out=g.positions)
    return g


def required_pixels(graph, fraction):
    """Minimum valid-pixel count per node: ``fraction`` of the level's default
    footprint area (``factor**m`` squared), rounded up."""
    area = np.power(float(graph.factor), 2 * graph.level)
    return np.ceil(fraction * area - 1e-9).astype(np.int64)


def enforce_constraints(graph, config):
    """Clamp positions into ``[0, 1]^3`` and raise ``z`` of starved footprints.

    Returns ``(graph, report)``; the report lists one dict per repaired node.
    Level-0 nodes are never touched.
    """
    g = graph.copy()
    report = []
    mobile = g.mobile
    before = g.positions.copy()
    clamped = np.clip(g.positions, 0.0, 1.0)
    g.positions[mobile] = clamped[mobile]
    for k in np.flatnonzero(mobile & np.any(before != g.positions, axis=1)):
        report.append({
            "node": int(k), "level": int(g.level[k]), "reason": "clamp",
            "before": [float(v) for v in before[k]],
            "after": [float(v) for v in g.positions[k]],
        })

    n0 = g.n0
    need = required_pixels(g, config.min_valid_fraction)
    counts = footprint_counts(g.positions, n0)
    bad = np.flatnonzero(mobile & (counts < need))
    if bad.size:
        pos = g.positions[bad]
        lo = pos[:, 2].copy()
        hi = np.ones_like(lo)
        top = pos.copy()
        top[:, 2] = 1.0
        solvable = footprint_counts(top, n0) >= need[bad]
        while True:
            active = (hi - lo) > Z_RESOLUTION
            if not active.any():
                break
            mid = 0.5 * (lo + hi)
            trial = pos.copy()
            trial[:, 2] = mid
            ok = footprint_counts(trial, n0) >= need[bad]
            hi = np.where(active & ok, mid, hi)
            lo = np.where(active & ~ok, mid, lo)
        new_z = np.where(solvable, hi, 1.0)
        for row, k in enumerate(bad):
            z_before = float(g.positions[k, 2])
            g.positions[k, 2] = new_z[row]
            report.append({
                "node": int(k), "level": int(g.level[k]),
                "reason": "min_valid_pixels" if solvable[row] else "unresolved",
                "before": [float(v) for v in pos[row]],
                "after": [float(v) for v in g.positions[k]],
                "z_before": z_before,
            })
    return g, report


def _nearest_brute(child, parent):
    out = np.empty(child.shape[0], dtype=np.int64)
    chunk = max(1, 4_000_000 // max(parent.shape[0], 1))
    for s in range(0, child.shape[0], chunk):
        d = child[s:s + chunk, None, :] - parent[None, :, :]
        out[s:s + chunk] = np.argmin((d * d).sum(axis=2), axis=1)
    return out


def assign_parents(graph, m, candidates=4):
    """Index (into level ``m + 1``) of the nearest parent for each level-``m`` node.

    Distance is Euclidean in ``(x, y)``; ties go to the lowest parent index.
    A KD-tree proposes candidates, distances are recomputed exactly and rows
    whose candidate list might be cut inside a near-tie fall back to brute force.
    """
    child = graph.positions[graph.level_slice(m), :2]
    parent = graph.positions[graph.level_slice(m + 1), :2]
    k = min(candidates, parent.shape[0])
    if k < candidates or child.shape[0] * parent.shape[0] < 4096:
        return _nearest_brute(child, parent)
    _, cand = cKDTree(parent).query(child, k=k)
    diff = child[:, None, :] - parent[cand]
    d2 = (diff * diff).sum(axis=2)
    best = d2.min(axis=1)
    # lowest index among exact minima
    masked = np.where(d2 == best[:, None], cand, np.iinfo(np.int64).max)
    out = masked.min(axis=1)
    # the k-th candidate being (almost) as close means more ties may exist
    unsure = d2.max(axis=1) <= best * (1 + 1e-9) + 1e-15
    if unsure.any():
        out[unsure] = _nearest_brute(child[unsure], parent)
    return out


def refresh_features(graph):
    """Recompute colors of levels above 0 from their nearest children.

    Carries no gradient. Parents that claim no child keep their color and
    are flagged in ``graph.empty``.
    """
    g = graph.copy()
    for m in range(g.levels - 1):
        owner = assign_parents(g, m)
        sl_c, sl_p = g.level_slice(m), g.level_slice(m + 1)
        n_par = sl_p.stop - sl_p.start
        counts = np.bincount(owner, minlength=n_par)
        sums = np.stack(
            [np.bincount(owner, weights=g.colors[sl_c, k], minlength=n_par) for k in range(3)],
            axis=1,
        )
        claimed = counts > 0
        colors = g.colors[sl_p].copy()
        colors[claimed] = sums[claimed] / counts[claimed, None]
        g.colors[sl_p] = colors
        g.empty[sl_p] = ~claimed
    return g
