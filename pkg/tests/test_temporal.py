import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from egointeract import tensor as tt
from egointeract.gradcheck import check_tensors, rel_error
from egointeract.temporal import ClassifierHead, classify, fuse_graphs, init_mlp, temporal_fuse
from egointeract.tensor import Tensor

D = 6


def test_fuse_graphs_examples(rng):
    a = Tensor(rng.normal(size=(1, D)))
    assert np.array_equal(fuse_graphs(a, Tensor(np.zeros((1, D)))).data, a.data)
    assert np.array_equal(fuse_graphs(a, a).data, 2 * a.data)
    b = rng.normal(size=(1, D))
    assert np.array_equal(fuse_graphs(a, Tensor(b)).data, a.data + b)


def test_fuse_graphs_shape_error():
    with pytest.raises(tt.ShapeError):
        fuse_graphs(Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 4))))


@pytest.mark.parametrize("mode", ["max", "avg"])
def test_single_frame_passes_through(mode, rng):
    x = rng.normal(size=(1, D))
    assert np.array_equal(temporal_fuse(Tensor(x), mode).data, x)


def test_max_example():
    assert temporal_fuse(Tensor([[1.0, 5.0], [3.0, 2.0]]), "max").data.tolist() == [[3.0, 5.0]]


def test_avg_matches_summation(rng):
    x = rng.normal(size=(20, D))
    expect = np.zeros(D)
    for row in x:
        expect += row
    assert np.max(np.abs(temporal_fuse(Tensor(x), "avg").data[0] - expect / 20)) <= 1e-12


def test_mlp_output_dim_and_order_sensitivity(rng):
    mlp = init_mlp(5, D, rng)
    assert mlp.W1.shape == (5 * D, 2 * D) and mlp.W2.shape == (2 * D, D)
    x = rng.normal(size=(5, D))
    out = temporal_fuse(Tensor(x), "mlp", mlp).data
    assert out.shape == (1, D)
    perm = temporal_fuse(Tensor(x[::-1].copy()), "mlp", mlp).data
    assert not np.allclose(out, perm)


def test_fusion_errors(rng):
    with pytest.raises(ValueError):
        temporal_fuse(Tensor(np.zeros((0, D))), "max")
    with pytest.raises(ValueError):
        temporal_fuse(Tensor(np.zeros((2, D))), "mlp")
    with pytest.raises(ValueError):
        temporal_fuse(Tensor(np.zeros((2, D))), "median")
    with pytest.raises(ValueError):
        ClassifierHead("mlp", {})


@given(st.integers(0, 2**32 - 1))
def test_max_and_avg_ignore_frame_order(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(8, D))
    perm = rng.permutation(8)
    assert np.array_equal(temporal_fuse(Tensor(x), "max").data, temporal_fuse(Tensor(x[perm]), "max").data)
    assert np.allclose(temporal_fuse(Tensor(x), "avg").data, temporal_fuse(Tensor(x[perm]), "avg").data, atol=1e-14)


@given(st.integers(0, 2**32 - 1))
def test_max_dominates_avg_on_nonnegative_input(seed):
    x = np.abs(np.random.default_rng(seed).normal(size=(20, D)))
    assert np.all(temporal_fuse(Tensor(x), "max").data >= temporal_fuse(Tensor(x), "avg").data)


def _head(rng, classes=(3, 2)):
    heads = {f"h{i}": (Tensor(rng.normal(size=(2 * D, c))), Tensor(rng.normal(size=c))) for i, c in enumerate(classes)}
    return ClassifierHead("max", heads)


def test_classify_zero_weights_gives_bias(rng):
    b = rng.normal(size=4)
    head = ClassifierHead("avg", {"goal": (Tensor(np.zeros((2 * D, 4))), Tensor(b))})
    out = classify(Tensor(rng.normal(size=(1, D))), Tensor(rng.normal(size=(1, D))), head)
    assert np.array_equal(out["goal"].data[0], b)


def test_classify_single_class_linear():
    head = ClassifierHead("avg", {"goal": (Tensor(np.ones((2, 1))), Tensor([0.5]))})
    assert classify(Tensor([[2.0]]), Tensor([[3.0]]), head)["goal"].data.tolist() == [[5.5]]


def test_classify_two_heads_match_matmul(rng):
    head = _head(rng)
    e, g = rng.normal(size=(1, D)), rng.normal(size=(1, D))
    out = classify(Tensor(e), Tensor(g), head)
    joint = np.concatenate([e, g], axis=1)
    for name, (W, b) in head.heads.items():
        expect = np.array([[sum(joint[0, k] * W.data[k, c] for k in range(2 * D)) + b.data[c]
                            for c in range(W.shape[1])]])
        assert np.max(np.abs(out[name].data - expect)) <= 1e-10


def test_classify_shape_error(rng):
    with pytest.raises(tt.ShapeError):
        classify(Tensor(np.zeros((1, D + 1))), Tensor(np.zeros((1, D))), _head(rng))


@pytest.mark.parametrize("mode", ["max", "avg", "mlp"])
def test_head_gradients(mode, rng):
    seq = Tensor(rng.normal(size=(4, D)), requires_grad=True)
    g = Tensor(rng.normal(size=(1, D)), requires_grad=True)
    mlp = init_mlp(4, D, rng)
    head = _head(rng)
    head.mlp = mlp

    def build():
        logits = classify(temporal_fuse(seq, mode, mlp), g, head)
        return tt.add(tt.cross_entropy(logits["h0"], 2), tt.cross_entropy(logits["h1"], 0))

    tensors = {"seq": seq, "g": g, "W1": mlp.W1, "b1": mlp.b1, "W2": mlp.W2, "b2": mlp.b2}
    for k, (W, b) in head.heads.items():
        tensors[k + ".W"], tensors[k + ".b"] = W, b
    if mode != "mlp":
        for k in ("W1", "b1", "W2", "b2"):
            tensors.pop(k)
    for name, (a, n) in check_tensors(build, tensors).items():
        assert rel_error(a, n) < 1e-3, name
