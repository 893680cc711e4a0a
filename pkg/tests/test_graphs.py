import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from egointeract import tensor as tt
from egointeract.gradcheck import check_tensors, rel_error
from egointeract.graphs import (
    GcnLayer, GraphParams, NodeSet, appearance_relation, block_mask, ego_stuff_affinity, ego_stuff_forward,
    ego_thing_affinity, ego_thing_forward, gcn_layer, graph_forward, init_graph_params, stuff_mask, thing_mask,
)
from egointeract.tensor import Tensor

D = 8


def params(rng, n_layers=2, D=D):
    return init_graph_params(D, n_layers, rng)


def identity_params(D, n_layers=1):
    eye = lambda: Tensor(np.eye(D))  # noqa: E731
    return GraphParams(eye(), eye(), [GcnLayer(eye(), Tensor(np.ones(D)), Tensor(np.zeros(D))) for _ in range(n_layers)])


def random_nodes(rng, n, spread=4.0, D=D):
    locs = rng.uniform(-spread, spread, size=(n, 3))
    return NodeSet(rng.normal(size=(n, D)), locs)


def affinity_oracle(X, locs, w, wp, mu):
    """Direct evaluation: gated exponentials of the scaled bilinear relation, normalised per row."""
    n, d = X.shape
    G = np.zeros((n, n))
    for i in range(n):
        terms = []
        for j in range(n):
            gate = 1.0 if (i == j or math.dist(locs[i], locs[j]) <= mu) else 0.0
            fa = float(np.dot(w @ X[i], wp @ X[j])) / math.sqrt(d)
            terms.append(gate * math.exp(fa))
        G[i] = np.array(terms) / sum(terms)
    return G


def stuff_oracle(X, dists, w, wp, mu):
    n, d = X.shape
    G = np.eye(n)
    e = n - 1
    terms = []
    for j in range(n):
        gate = 1.0 if (j == e or dists[j] <= mu) else 0.0
        terms.append(gate * math.exp(float(np.dot(w @ X[e], wp @ X[j])) / math.sqrt(d)))
    G[e] = np.array(terms) / sum(terms)
    return G


# --- appearance relation ------------------------------------------------

def test_appearance_relation_unit_vectors():
    x = np.zeros((2, 4))
    x[:, 0] = 1.0
    assert appearance_relation(x, identity_params(4)).data[0, 1] == 0.5


def test_appearance_relation_orthogonal():
    x = np.eye(4)[:2]
    assert appearance_relation(x, identity_params(4)).data[0, 1] == 0.0


def test_appearance_relation_matches_pairwise_loop(rng):
    p = params(rng)
    X = rng.normal(size=(6, D))
    w, wp = p.w.data, p.w_prime.data
    expect = np.array([[np.dot(w @ X[i], wp @ X[j]) / math.sqrt(D) for j in range(6)] for i in range(6)])
    assert np.max(np.abs(appearance_relation(X, p).data - expect)) <= 1e-10


def test_appearance_relation_shape_error(rng):
    with pytest.raises(tt.ShapeError):
        appearance_relation(np.zeros((3, D + 1)), params(rng))


# --- node sets ----------------------------------------------------------

def test_nodeset_requires_single_trailing_ego():
    with pytest.raises(ValueError):
        NodeSet(np.zeros((2, 3)), np.zeros((2, 3)), ["ego", "car"])
    with pytest.raises(ValueError):
        NodeSet(np.zeros((0, 3)), np.zeros((0, 3)))
    assert NodeSet(np.zeros((3, 2)), np.zeros((3, 3))).ego == 2


# --- thing affinity -----------------------------------------------------

def test_thing_two_equal_nodes_split_evenly(rng):
    nodes = NodeSet(np.ones((2, D)), np.zeros((2, 3)))
    assert np.allclose(ego_thing_affinity(nodes, 3.0, params(rng)).values, 0.5)


def test_thing_isolated_node_column(rng):
    locs = np.zeros((4, 3))
    locs[1] = (100.0, 0, 0)
    nodes = NodeSet(rng.normal(size=(4, D)), locs)
    G = ego_thing_affinity(nodes, 3.0, params(rng)).values
    assert G[1, 1] == 1.0
    assert np.all(G[[0, 2, 3], 1] == 0.0)


def test_thing_affinity_matches_direct_formula(rng):
    for _ in range(20):
        p = params(rng)
        nodes = random_nodes(rng, 4)
        got = ego_thing_affinity(nodes, 3.0, p).values
        expect = affinity_oracle(nodes.features, nodes.locations, p.w.data, p.w_prime.data, 3.0)
        assert np.max(np.abs(got - expect)) <= 1e-9


@given(st.integers(0, 2**32 - 1), st.integers(1, 21))
def test_thing_rows_are_distributions(seed, n):
    rng = np.random.default_rng(seed)
    G = ego_thing_affinity(random_nodes(rng, n, spread=6.0), 3.0, params(rng)).values
    assert np.allclose(G.sum(axis=1), 1.0, atol=1e-6)
    assert np.all((G >= 0) & (G <= 1)) and np.all(np.diag(G) > 0)


def test_infinite_gate_with_uniform_features_is_uniform(rng):
    n = 7
    nodes = NodeSet(np.tile(rng.normal(size=(1, D)), (n, 1)), rng.uniform(-50, 50, (n, 3)))
    G = ego_thing_affinity(nodes, 1e12, params(rng)).values
    assert np.allclose(G, 1.0 / n, atol=1e-12)


def test_disabled_gate_opens_everything(rng):
    nodes = random_nodes(rng, 5, spread=100.0)
    assert thing_mask(nodes, 3.0, use_gate=False).all()


# --- stuff affinity -----------------------------------------------------

def test_stuff_all_far_gives_self_loop(rng):
    nodes = random_nodes(rng, 5)
    G = ego_stuff_affinity(nodes, [0.9, 2.0, 5.0, 0.81], 0.8, params(rng)).values
    assert np.array_equal(G, np.eye(5))


def test_stuff_one_in_range_with_zero_relation():
    X = np.zeros((4, 4))
    G = ego_stuff_affinity(NodeSet(X, np.zeros((4, 3))), [0.5, 1.0, 2.0], 0.8, identity_params(4)).values
    assert np.allclose(G[3], [0.5, 0.0, 0.0, 0.5])


def test_stuff_affinity_matches_direct_formula(rng):
    for _ in range(20):
        p = params(rng)
        nodes = random_nodes(rng, 6)
        dists = rng.uniform(0, 1.6, size=5)
        got = ego_stuff_affinity(nodes, dists, 0.8, p).values
        expect = stuff_oracle(nodes.features, dists, p.w.data, p.w_prime.data, 0.8)
        assert np.max(np.abs(got - expect)) <= 1e-9


def test_stuff_non_ego_rows_are_identity(rng):
    nodes = random_nodes(rng, 8)
    G = ego_stuff_affinity(nodes, rng.uniform(0, 1.6, 7), 0.8, params(rng)).values
    assert np.array_equal(G[:-1], np.eye(8)[:-1])
    assert abs(G[-1].sum() - 1.0) <= 1e-6


def test_stuff_mask_length_check():
    with pytest.raises(ValueError):
        stuff_mask(4, [0.1, 0.2], 0.8)


# --- GCN layers ---------------------------------------------------------

def test_gcn_zero_weight_is_residual_only(rng):
    Z = Tensor(rng.normal(size=(5, D)))
    G = Tensor(np.full((5, 5), 0.2))
    layer = GcnLayer(Tensor(np.zeros((D, D))), Tensor(rng.normal(size=D)), Tensor(rng.normal(size=D)))
    expect = tt.relu(tt.layer_norm(Z, layer.gain, layer.bias)).data
    assert np.array_equal(gcn_layer(G, Z, layer).data, expect)


def test_gcn_single_node(rng):
    Z = Tensor(rng.normal(size=(1, D)))
    layer = params(rng, 1).layers[0]
    expect = tt.relu(tt.layer_norm(tt.add(tt.matmul(Z, layer.W), Z), layer.gain, layer.bias)).data
    assert np.allclose(gcn_layer(Tensor(np.eye(1)), Z, layer).data, expect, atol=1e-12)


def _numpy_layer(G, Z, W, gain, bias, eps=1e-5):
    h = G @ Z @ W + Z
    mu = h.mean(axis=1, keepdims=True)
    var = ((h - mu) ** 2).mean(axis=1, keepdims=True)
    return np.maximum((h - mu) / np.sqrt(var + eps) * gain + bias, 0)


def test_gcn_matches_composed_oracle(rng):
    G = rng.random((6, 6))
    G /= G.sum(axis=1, keepdims=True)
    Z = rng.normal(size=(6, D))
    layer = params(rng, 1).layers[0]
    expect = _numpy_layer(G, Z, layer.W.data, layer.gain.data, layer.bias.data)
    assert np.max(np.abs(gcn_layer(Tensor(G), Tensor(Z), layer).data - expect)) <= 1e-10


def test_gcn_shape_error(rng):
    with pytest.raises(tt.ShapeError):
        gcn_layer(Tensor(np.eye(3)), Tensor(np.zeros((4, D))), params(rng, 1).layers[0])


# --- forward passes -----------------------------------------------------

def test_ego_only_graph_depends_on_ego_feature_only(rng):
    p = params(rng)
    x = rng.normal(size=(1, D))
    a = ego_thing_forward(NodeSet(x, rng.normal(size=(1, 3))), 3.0, p).data
    b = ego_thing_forward(NodeSet(x, rng.normal(size=(1, 3)) * 100), 3.0, p).data
    assert np.array_equal(a, b)


def test_thing_forward_matches_layer_oracle(rng):
    p = params(rng)
    nodes = random_nodes(rng, 6)
    G = affinity_oracle(nodes.features, nodes.locations, p.w.data, p.w_prime.data, 3.0)
    Z = nodes.features
    for layer in p.layers:
        Z = _numpy_layer(G, Z, layer.W.data, layer.gain.data, layer.bias.data)
    assert np.max(np.abs(ego_thing_forward(nodes, 3.0, p).data - Z[-1:])) <= 1e-10


def test_stuff_forward_matches_layer_oracle(rng):
    p = params(rng, 1)
    nodes = random_nodes(rng, 5)
    dists = rng.uniform(0, 1.6, 4)
    G = stuff_oracle(nodes.features, dists, p.w.data, p.w_prime.data, 0.8)
    layer = p.layers[0]
    Z = _numpy_layer(G, nodes.features, layer.W.data, layer.gain.data, layer.bias.data)
    assert np.max(np.abs(ego_stuff_forward(nodes, dists, 0.8, p).data - Z[-1:])) <= 1e-10


def test_all_gated_out_equals_ego_only(rng):
    p = params(rng)
    X = rng.normal(size=(5, D))
    locs = np.array([[100.0 * (i + 1), 0, 0] for i in range(4)] + [[0.0, 0, 0]])
    full = ego_thing_forward(NodeSet(X, locs), 3.0, p).data
    alone = ego_thing_forward(NodeSet(X[-1:], locs[-1:]), 3.0, p).data
    assert np.array_equal(full, alone)
    sp = params(rng, 1)
    s_full = ego_stuff_forward(NodeSet(X, locs), [5.0] * 4, 0.8, sp).data
    s_alone = ego_stuff_forward(NodeSet(X[-1:], locs[-1:]), [], 0.8, sp).data
    assert np.array_equal(s_full, s_alone)


@given(st.integers(0, 2**32 - 1))
def test_isolation_invariance_is_bit_exact(seed):
    rng = np.random.default_rng(seed)
    p = params(rng)
    nodes = random_nodes(rng, int(rng.integers(3, 21)), spread=2.0)
    k = int(rng.integers(0, nodes.n - 1))
    nodes.locations[k] = (500.0, 500.0, 500.0)
    with_k = ego_thing_forward(nodes, 3.0, p).data
    without_k = ego_thing_forward(nodes.without(k), 3.0, p).data
    assert with_k.tobytes() == without_k.tobytes()


def test_permuting_non_ego_nodes(rng):
    p = params(rng)
    nodes = random_nodes(rng, 7, spread=2.0)
    perm = np.r_[rng.permutation(6), 6]
    shuffled = NodeSet(nodes.features[perm], nodes.locations[perm])
    G = ego_thing_affinity(nodes, 3.0, p).values
    Gp = ego_thing_affinity(shuffled, 3.0, p).values
    assert np.allclose(Gp, G[np.ix_(perm, perm)], atol=1e-12)
    assert np.allclose(ego_thing_forward(shuffled, 3.0, p).data, ego_thing_forward(nodes, 3.0, p).data, atol=1e-12)


def test_block_graph_equals_per_frame(rng):
    p = params(rng)
    frames = [random_nodes(rng, int(n), spread=2.0) for n in (3, 1, 6, 4)]
    mask, rows = block_mask([thing_mask(f, 3.0) for f in frames])
    X = np.concatenate([f.features for f in frames])
    out, _ = graph_forward(X, mask, p, rows)
    per_frame = np.concatenate([ego_thing_forward(f, 3.0, p).data for f in frames])
    assert out.data.tobytes() == per_frame.tobytes()


def test_graph_gradients_pass_finite_differences(rng):
    p = params(rng)
    nodes = random_nodes(rng, 6, spread=2.0)
    sp = params(rng, 1)
    s_nodes = random_nodes(rng, 5)
    dists = [0.1, 0.5, 1.2, 0.3]
    w = Tensor(rng.normal(size=(1, D)))

    def build():
        e = tt.add(ego_thing_forward(nodes, 3.0, p), ego_stuff_forward(s_nodes, dists, 0.8, sp))
        return tt.sum_all(tt.mul(e, w))

    tensors = {**p.named("thing"), **sp.named("stuff")}
    for name, (a, n) in check_tensors(build, tensors).items():
        assert rel_error(a, n) < 1e-3, name
