"""Residual graph-attention network with position-conditioned attention.

Row convention: node embeddings are rows, so a layer computes ``z = h @ W``.
For an arc ``j -> i`` (``i`` the destination being updated) the logit is::

    e_ij = LeakyReLU(a . [z_i || z_j || (pos_i - pos_j)])

normalised by a softmax over all arcs entering ``i`` (self-arc included).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import ShapeError, Tape, dropout_mask
from .graph import FEATURE_DIM, Arcs

LEAKY_SLOPE = 0.2


@dataclass
class ModelConfig:
    in_dim: int = FEATURE_DIM
    hidden: int = 32
    layers: int = 6
    heads: int = 1
    dropout: float = 0.1
    aggregator: str = "gat"  # or "gcn"
    positional_attention: bool = True

    def __post_init__(self):
        if self.aggregator not in ("gat", "gcn"):
            raise ValueError(f"unknown aggregator {self.aggregator!r}")
        if self.layers < 1 or self.hidden < 1 or self.heads < 1:
            raise ValueError("layers, hidden and heads must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


def min_layers(levels):
    """Layers needed for a message from level 0 to reach the top level and back."""
    return 2 * (levels - 1) + 1


@dataclass
class AttentionRecords:
    src: np.ndarray
    dst: np.ndarray
    alpha: list = field(default_factory=list)  # one (E,) array per layer, head-averaged

    def incoming_sums(self, layer):
        return np.bincount(self.dst, weights=self.alpha[layer], minlength=self.dst.max() + 1)


def _glorot(rng, shape, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class GatModel:
    def __init__(self, config, params):
        self.config = config
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    def copy(self):
        return GatModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def layer_dims(self):
        c = self.config
        return [(c.in_dim if l == 0 else c.hidden, c.hidden) for l in range(c.layers)]

    def param_names(self):
        return list(self.params)

    def to_dict(self):
        return {
            "config": asdict(self.config),
            "params": {
                k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
                for k, v in self.params.items()
            },
        }

    @classmethod
    def from_dict(cls, d):
        config = ModelConfig(**d["config"])
        params = {
            k: np.array(v["data"], dtype=np.float64).reshape(v["shape"])
            for k, v in d["params"].items()
        }
        return cls(config, params)


def init_model(config=None, seed=0):
    """Glorot-uniform weights and attention vectors, zero biases."""
    config = config or ModelConfig()
    rng = np.random.default_rng(seed)
    params = {}
    for l in range(config.layers):
        fin = config.in_dim if l == 0 else config.hidden
        fout = config.hidden
        for h in range(config.heads):
            params[f"gat{l}.{h}.W"] = _glorot(rng, (fin, fout), fin, fout)
            if config.aggregator == "gat":
                na = 2 * fout + 3
                params[f"gat{l}.{h}.a"] = _glorot(rng, (na,), na, 1)
        params[f"gat{l}.b"] = np.zeros(fout)
    params["head.W"] = _glorot(rng, (config.hidden, 1), config.hidden, 1)
    params["head.b"] = np.zeros(1)
    return GatModel(config, params)


def attention_logits(z_i, z_j, pos_i, pos_j, a, slope=LEAKY_SLOPE):
    """Un-normalised attention score of the arc ``j -> i``."""
    z_i, z_j = np.asarray(z_i, float), np.asarray(z_j, float)
    pos_i, pos_j = np.asarray(pos_i, float), np.asarray(pos_j, float)
    a = np.asarray(a, float)
    x = np.concatenate([z_i, z_j, pos_i - pos_j])
    if x.shape != a.shape:
        raise ShapeError(f"attention_logits: a has shape {a.shape}, expected {x.shape}")
    e = float(a @ x)
    return e if e > 0 else slope * e


def _gat_head(tape, h, pos_diff, arcs, W, a, fout, positional):
    z = tape.matmul(h, W)
    a_dst = tape.reshape(a[0:fout], (fout, 1))
    a_src = tape.reshape(a[fout:2 * fout], (fout, 1))
    s_dst = tape.reshape(tape.matmul(z, a_dst), (-1,))
    s_src = tape.reshape(tape.matmul(z, a_src), (-1,))
    logits = tape.gather_rows(s_dst, arcs.segments) + tape.gather_rows(s_src, arcs.src_index)
    if positional:
        a_pos = tape.reshape(a[2 * fout:2 * fout + 3], (3, 1))
        logits = logits + tape.reshape(tape.matmul(pos_diff, a_pos), (-1,))
    e = tape.leaky_relu(logits, LEAKY_SLOPE)
    alpha = tape.segment_softmax(e, arcs.segments)
    return tape.arc_aggregate(alpha, z, arcs.segments, arcs.src_index), alpha


def gat_layer(tape, h, positions, arcs, p, layer, config, pos_diff=None):
    """One attention layer on the tape; returns ``(h_next, alpha_values)``."""
    fout = config.hidden
    if pos_diff is None and config.positional_attention:
        pos_diff = tape.gather_rows(positions, arcs.segments) - tape.gather_rows(positions, arcs.src_index)
    agg, alphas = None, []
    for hd in range(config.heads):
        out, alpha = _gat_head(
            tape, h, pos_diff, arcs, p[f"gat{layer}.{hd}.W"], p[f"gat{layer}.{hd}.a"],
            fout, config.positional_attention,
        )
        agg = out if agg is None else agg + out
        alphas.append(alpha.values)
    if config.heads > 1:
        agg = tape.mul(agg, 1.0 / config.heads)
    h_next = tape.relu(agg + p[f"gat{layer}.b"])
    return h_next, np.mean(alphas, axis=0)


def gcn_norm(arcs):
    """Per-arc ``1 / sqrt(|N(i)| |N(j)|)`` with neighborhoods from in-degree."""
    deg = arcs.in_degree().astype(np.float64)
    return 1.0 / np.sqrt(deg[arcs.dst] * deg[arcs.src])


def gcn_layer(tape, h, arcs, p, layer, config):
    agg = None
    coef = tape.const(gcn_norm(arcs))
    for hd in range(config.heads):
        hw = tape.matmul(h, p[f"gat{layer}.{hd}.W"])
        out = tape.arc_aggregate(coef, hw, arcs.segments, arcs.src_index)
        agg = out if agg is None else agg + out
    if config.heads > 1:
        agg = tape.mul(agg, 1.0 / config.heads)
    return tape.relu(agg + p[f"gat{layer}.b"])


def forward_tensors(tape, model, features, positions, arcs, params=None, train=False, rng=None):
    """Full network on the tape.

    ``features`` is an (N, in_dim) tensor and ``positions`` an (N, 3) tensor
    (used by positional attention). Returns ``(probabilities, records)`` where
    probabilities is an (N,) tensor.
    """
    config = model.config
    if features.shape[1] != config.in_dim:
        raise ShapeError(
            f"network_forward: features have {features.shape[1]} columns, model expects {config.in_dim}"
        )
    if features.shape[0] != arcs.n_nodes:
        raise ShapeError("network_forward: feature rows do not match node count")
    p = params if params is not None else {k: tape.const(v) for k, v in model.params.items()}
    if train and config.dropout > 0 and rng is None:
        raise ValueError("training-mode forward with dropout needs an rng")
    records = AttentionRecords(arcs.src, arcs.dst)
    pos_diff = None
    if config.aggregator == "gat" and config.positional_attention:
        pos_diff = tape.gather_rows(positions, arcs.segments) - tape.gather_rows(positions, arcs.src_index)

    h = features
    for l in range(config.layers):
        if config.aggregator == "gat":
            out, alpha = gat_layer(tape, h, positions, arcs, p, l, config, pos_diff)
            records.alpha.append(alpha)
        else:
            out = gcn_layer(tape, h, arcs, p, l, config)
        if train and config.dropout > 0:
            out = tape.dropout(out, dropout_mask(rng, out.shape, config.dropout))
        h = out if l == 0 else h + out
    logit = tape.matmul(h, p["head.W"]) + p["head.b"]
    prob = tape.reshape(tape.sigmoid(logit), (-1,))
    return prob, records


def network_forward(graph, model, train=False, seed=None):
    """Per-node probabilities for a single graph, with attention records.

    Numpy in, numpy out; use :func:`forward_tensors` for training.
    """
    levels = graph.levels
    if model.config.layers < min_layers(levels):
        raise ValueError(
            f"{model.config.layers} layers cannot reach all {levels} magnification levels"
        )
    tape = Tape()
    rng = np.random.default_rng(seed) if train else None
    prob, records = forward_tensors(
        tape, model, tape.const(graph.features()), tape.const(graph.positions),
        graph.arcs(), train=train, rng=rng,
    )
    return prob.values, records


def layer_forward(graph, features, model, layer=0):
    """Apply a single layer of ``model`` to explicit ``features`` (numpy)."""
    tape = Tape()
    h = tape.const(features)
    arcs = graph if isinstance(graph, Arcs) else graph.arcs()
    pos = tape.const(np.zeros((arcs.n_nodes, 3)) if isinstance(graph, Arcs) else graph.positions)
    p = {k: tape.const(v) for k, v in model.params.items()}
    if model.config.aggregator == "gat":
        out, alpha = gat_layer(tape, h, pos, arcs, p, layer, model.config)
        return out.values, alpha
    return gcn_layer(tape, h, arcs, p, layer, model.config).values, None
