import json
import math
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from npgat.autodiff import ShapeError, Tape, finite_difference_check
from npgat.gat import (
    GatModel, ModelConfig, attention_logits, forward_tensors, gat_layer, gcn_norm, init_model,
    layer_forward, min_layers, network_forward,
)
from npgat.graph import Arcs, build_base_graph, graph_from_image

GOLDEN = os.path.join(os.path.dirname(__file__), "golden", "gat_8x8.json")


def leaky(x):
    return x if x > 0 else 0.2 * x


def test_logit_examples():
    z_i, z_j = np.array([2.0, -1.0]), np.array([0.5, 3.0])
    pos = np.array([0.3, 0.2, 0.1])
    a = np.array([1.0, 0, 0, 0, 0, 0, 0])
    assert attention_logits(z_i, z_j, pos, pos, a) == 2.0
    a = np.random.default_rng(0).normal(size=7)
    plain = leaky(a[:4] @ np.concatenate([z_i, z_j]))
    assert attention_logits(z_i, z_j, pos, pos, a) == pytest.approx(plain, abs=1e-15)
    assert attention_logits(z_i, z_j, pos, pos * 2, np.zeros(7)) == 0.0
    with pytest.raises(ShapeError):
        attention_logits(z_i, z_j, pos, pos, np.zeros(6))


def one_layer_model(fin, fout, seed=0, **kw):
    return init_model(ModelConfig(in_dim=fin, hidden=fout, layers=1, dropout=0.0, **kw), seed)


def test_zero_attention_vector_gives_uniform():
    g = graph_from_image(np.random.default_rng(1).random((4, 4, 3)), 2)
    model = one_layer_model(7, 5)
    model.params["gat0.0.a"][:] = 0
    _, alpha = layer_forward(g, g.features(), model)
    deg = g.arcs().in_degree()
    np.testing.assert_allclose(alpha, 1.0 / deg[g.arcs().dst], atol=1e-15)


def test_singleton_graph():
    arcs = Arcs.from_edges(np.zeros((0, 2), int), 1)
    model = one_layer_model(3, 4)
    h = np.array([[0.3, -1.0, 2.0]])
    out, alpha = layer_forward(arcs, h, model)
    assert alpha.tolist() == [1.0]
    np.testing.assert_allclose(out, np.maximum(h @ model.params["gat0.0.W"], 0), atol=1e-15)


def test_two_node_symmetry():
    arcs = Arcs.from_edges(np.array([[0, 1]]), 2)
    model = one_layer_model(3, 4, seed=4)
    h = np.tile([[0.2, 0.5, -0.3]], (2, 1))
    out, _ = layer_forward(arcs, h, model)
    np.testing.assert_array_equal(out[0], out[1])


def test_three_node_path_hand_computation():
    # path 0 - 1 - 2, positions on the x axis
    arcs = Arcs.from_edges(np.array([[0, 1], [1, 2]]), 3)
    model = one_layer_model(2, 2, positional_attention=True)
    W = np.array([[1.0, -1.0], [0.5, 2.0]])
    a = np.array([0.3, -0.2, 0.1, 0.4, 1.0, 0.0, 0.0])
    b = np.array([0.05, -0.1])
    model.params.update({"gat0.0.W": W, "gat0.0.a": a, "gat0.b": b})
    h = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    pos = np.array([[0.0, 0, 0], [0.5, 0, 0], [1.0, 0, 0]])
    tape = Tape()
    p = {k: tape.const(v) for k, v in model.params.items()}
    out, alpha = gat_layer(tape, tape.const(h), tape.const(pos), arcs, p, 0, model.config)

    z = h @ W
    nbrs = {0: [0, 1], 1: [0, 1, 2], 2: [1, 2]}
    expect = np.zeros((3, 2))
    for i, js in nbrs.items():
        e = [leaky(a @ np.concatenate([z[i], z[j], pos[i] - pos[j]])) for j in js]
        w = np.exp(e) / np.sum(np.exp(e))
        expect[i] = np.maximum(sum(wk * z[j] for wk, j in zip(w, js)) + b, 0)
    np.testing.assert_allclose(out.values, expect, atol=1e-14)


def test_attention_logit_gradcheck_three_nodes():
    arcs = Arcs.from_edges(np.array([[0, 1], [1, 2]]), 3)
    rng = np.random.default_rng(0)
    z = rng.normal(size=(3, 4))
    pos = rng.random((3, 3))

    def f(tape, a):
        zt = tape.const(z)
        s_dst = tape.reshape(tape.matmul(zt, tape.reshape(a[0:4], (4, 1))), (-1,))
        s_src = tape.reshape(tape.matmul(zt, tape.reshape(a[4:8], (4, 1))), (-1,))
        d = tape.const(pos[arcs.dst] - pos[arcs.src])
        e = tape.gather_rows(s_dst, arcs.dst) + tape.gather_rows(s_src, arcs.src)
        e = e + tape.reshape(tape.matmul(d, tape.reshape(a[8:11], (3, 1))), (-1,))
        return tape.sum(tape.leaky_relu(e) * np.linspace(-1, 1, len(arcs.src)))

    assert finite_difference_check(f, rng.normal(size=11), 1e-5) < 1e-4


def test_gcn_norm_and_hand_case():
    # node 0 joined to 3 others (4 incl. self), node 4 joined to 8 others (9 incl. self)
    edges = [[0, 1], [0, 2], [0, 4]] + [[4, k] for k in range(5, 12)]
    arcs = Arcs.from_edges(np.array(edges), 12)
    deg = arcs.in_degree()
    assert deg[0] == 4 and deg[4] == 9
    c = 1.0 / gcn_norm(arcs)
    k = np.flatnonzero((arcs.dst == 0) & (arcs.src == 4))[0]
    assert c[k] == pytest.approx(6.0, abs=1e-12)

    arcs2 = Arcs.from_edges(np.array([[0, 1]]), 2)
    model = one_layer_model(2, 2, aggregator="gcn")
    W = np.array([[1.0, 2.0], [-1.0, 0.5]])
    b = np.array([0.1, -0.2])
    model.params.update({"gat0.0.W": W, "gat0.b": b})
    h = np.array([[0.3, 0.7], [1.0, -0.5]])
    out, _ = layer_forward(arcs2, h, model)
    # both nodes have 2 neighbours (self + other): c = 2 everywhere
    expect = np.maximum(b + (h[0] @ W + h[1] @ W) / 2.0, 0)
    np.testing.assert_allclose(out, np.tile(expect, (2, 1)), atol=1e-15)
    model.params["gat0.0.W"][:] = 0
    out, _ = layer_forward(arcs2, h, model)
    np.testing.assert_allclose(out, np.tile(np.maximum(b, 0), (2, 1)))


def test_init_properties():
    cfg = ModelConfig()
    m1, m2 = init_model(cfg, 3), init_model(cfg, 3)
    for k, v in m1.params.items():
        assert np.array_equal(v, m2.params[k])
        if k.endswith(".b"):
            assert not v.any()
    for l in range(cfg.layers):
        W = m1.params[f"gat{l}.0.W"]
        fin, fout = W.shape
        assert np.abs(W).max() <= math.sqrt(6 / (fin + fout))
        assert m1.params[f"gat{l}.0.a"].shape == (2 * fout + 3,)


def test_min_layers_enforced():
    g = graph_from_image(np.zeros((8, 8, 3)), 3)
    assert min_layers(3) == 5
    with pytest.raises(ValueError):
        network_forward(g, init_model(ModelConfig(layers=4)))


def test_feature_dim_mismatch():
    g = graph_from_image(np.zeros((4, 4, 3)), 2)
    tape = Tape()
    model = init_model(ModelConfig(in_dim=5, layers=3))
    with pytest.raises(ShapeError):
        forward_tensors(tape, model, tape.const(g.features()), tape.const(g.positions), g.arcs())


def test_eval_forward_deterministic():
    g = graph_from_image(np.random.default_rng(0).random((8, 8, 3)), 3)
    model = init_model(ModelConfig(dropout=0.0), 1)
    a, _ = network_forward(g, model)
    b, _ = network_forward(g, model)
    assert a.tobytes() == b.tobytes()
    c, _ = network_forward(g, init_model(ModelConfig(dropout=0.3), 1), train=True, seed=5)
    d, _ = network_forward(g, init_model(ModelConfig(dropout=0.3), 1), train=True, seed=5)
    assert c.tobytes() == d.tobytes()
    assert np.all((a >= 0) & (a <= 1))


def test_zero_image_grid_symmetry():
    # the raw position columns break every spatial symmetry, so neutralise them
    n = 8
    g = graph_from_image(np.zeros((n, n, 3)), 3)
    model = init_model(ModelConfig(dropout=0.0), 2)
    model.params["gat0.0.W"][4:7] = 0
    for l in range(model.config.layers):
        model.params[f"gat{l}.0.a"][-3:] = 0
    prob, _ = network_forward(g, model)
    base = prob[g.level_slice(0)].reshape(n, n)
    for t in (base.T, base[::-1], base[:, ::-1], np.rot90(base)):
        np.testing.assert_allclose(t, base, atol=1e-12)


def golden_inputs():
    rng = np.random.default_rng(20240607)
    g = graph_from_image(rng.random((8, 8, 3)), 3)
    return g, init_model(ModelConfig(dropout=0.0), seed=11)


def test_golden_output():
    g, model = golden_inputs()
    prob, records = network_forward(g, model)
    with open(GOLDEN) as fh:
        ref = json.load(fh)
    np.testing.assert_allclose(prob, ref["prob"], rtol=0, atol=1e-12)
    np.testing.assert_allclose(records.alpha[0], ref["alpha0"], rtol=0, atol=1e-12)


def random_graph(rng):
    n0 = int(rng.choice([2, 4, 8]))
    L = int(rng.integers(1, 1 + int(math.log2(n0)) + 1))
    L = min(L, 3)
    g = graph_from_image(rng.random((n0, n0, 3)), L)
    g.positions[g.mobile] = rng.random((int(g.mobile.sum()), 3))
    return g


def test_alpha_normalisation_100_graphs():
    rng = np.random.default_rng(0)
    for trial in range(100):
        g = random_graph(rng)
        cfg = ModelConfig(hidden=8, layers=min_layers(g.levels) + int(rng.integers(0, 2)),
                          heads=int(rng.integers(1, 3)), dropout=0.0)
        model = init_model(cfg, seed=trial)
        for k in model.params:
            model.params[k] = model.params[k] * rng.uniform(0.5, 5)
        _, rec = network_forward(g, model)
        for l in range(cfg.layers):
            np.testing.assert_allclose(rec.incoming_sums(l), 1.0, atol=1e-6)
            assert rec.alpha[l].min() >= 0 and rec.alpha[l].max() <= 1


def test_permutation_equivariance():
    rng = np.random.default_rng(3)
    g = graph_from_image(rng.random((4, 4, 3)), 2)
    model = init_model(ModelConfig(hidden=8, layers=3, dropout=0.0), 0)
    n = g.n_nodes
    perm = rng.permutation(n)  # new index of old node k is inv[k]
    inv = np.argsort(perm)
    arcs_p = Arcs.from_edges(inv[g.edges], n)

    def run(arcs, feats, pos):
        tape = Tape()
        prob, _ = forward_tensors(tape, model, tape.const(feats), tape.const(pos), arcs)
        return prob.values

    ref = run(g.arcs(), g.features(), g.positions)
    out = run(arcs_p, g.features()[perm], g.positions[perm])
    np.testing.assert_allclose(out, ref[perm], atol=1e-9)


def test_positional_slots_zero_gives_position_invariance():
    rng = np.random.default_rng(4)
    g = graph_from_image(rng.random((4, 4, 3)), 2)
    model = init_model(ModelConfig(hidden=8, layers=3, dropout=0.0), 0)
    for l in range(3):
        model.params[f"gat{l}.0.a"][-3:] = 0

    def run(pos):
        tape = Tape()
        prob, _ = forward_tensors(tape, model, tape.const(g.features()), tape.const(pos), g.arcs())
        return prob.values

    np.testing.assert_allclose(run(g.positions), run(rng.random(g.positions.shape)), atol=1e-14)


def test_receptive_field():
    rng = np.random.default_rng(5)
    g = graph_from_image(rng.random((4, 4, 3)), 2)
    model = init_model(ModelConfig(hidden=16, layers=min_layers(2), dropout=0.0), 1)
    f0 = g.features()

    def run(f):
        tape = Tape()
        prob, _ = forward_tensors(tape, model, tape.const(f), tape.const(g.positions), g.arcs())
        return prob.values

    ref = run(f0)
    top = np.flatnonzero(g.level == 1)
    for k in np.flatnonzero(g.level == 0):
        f = f0.copy()
        f[k, :3] += 0.5
        assert np.all(np.abs(run(f)[top] - ref[top]) > 0), k


def test_model_dict_roundtrip():
    m = init_model(ModelConfig(), 0)
    back = GatModel.from_dict(json.loads(json.dumps(m.to_dict())))
    for k in m.params:
        assert m.params[k].tobytes() == back.params[k].tobytes()
