import dataclasses
import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.metrics import average_precision_score

from egointeract.checkpoint import Checkpoint, CheckpointError
from egointeract.config import ConfigError, RunConfig, TrainConfig
from egointeract.metrics import average_precision, head_map, report_from_scores
from egointeract.model import prepare_clip
from egointeract.synthetic import make_dataset
from egointeract.tensor import Tensor
from egointeract.train import (
    Adam, batch_order, evaluate, model_from_checkpoint, predict, stage2_init, train_stage1, train_stage2,
)

S1 = TrainConfig(stage=1, lr=1e-3, iterations=30, batch_size=4)
S2 = TrainConfig(stage=2, lr=2e-4, iterations=60, batch_size=4)


@pytest.fixture(scope="module")
def data():
    tr, ev, _ = make_dataset(16, 10, seed=4)
    return [prepare_clip(c, S1) for c in tr.clips()], [prepare_clip(c, S1) for c in ev.clips()]


@pytest.fixture(scope="module")
def stage1(data):
    return train_stage1(S1, data[0])


# --- Adam ---------------------------------------------------------------

def test_adam_zero_grad_leaves_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=0.1)
    p.grad = np.zeros(2)
    opt.step()
    assert p.data.tolist() == [1.0, -2.0]


def test_adam_first_step_hand_computed():
    p = Tensor(np.array([0.5, 0.5, 0.5]), requires_grad=True)
    g = np.array([0.2, -3.0, 1e-3])
    opt = Adam({"p": p}, lr=0.01)
    p.grad = g
    opt.step()
    # bias-corrected first step: m_hat = g, v_hat = g^2
    expect = 0.5 - 0.01 * g / (np.abs(g) + 1e-8)
    assert np.allclose(p.data, expect, atol=1e-15)


def test_adam_decreases_quadratic():
    target = np.array([3.0, -1.0, 2.0])
    p = Tensor(np.zeros(3), requires_grad=True)
    opt = Adam({"p": p}, lr=0.05)
    losses = []
    for _ in range(100):
        losses.append(float(((p.data - target) ** 2).sum()))
        p.grad = 2 * (p.data - target)
        opt.step()
    assert all(b < a for a, b in zip(losses[5:], losses[6:]))


# --- average precision --------------------------------------------------

def _ap_oracle(scores, labels):
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    hits, total = 0, 0.0
    for k, i in enumerate(order, 1):
        if labels[i]:
            hits += 1
            total += hits / k
    return total / sum(labels) if sum(labels) else None


def test_ap_examples():
    assert average_precision([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    assert average_precision([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == pytest.approx(0.5 * (1 / 3 + 2 / 4), abs=1e-12)
    assert average_precision([0.3, 0.1], [0, 0]) is None


def test_ap_matches_exhaustive_definition(rng):
    for _ in range(100):
        n = int(rng.integers(1, 60))
        s = np.round(rng.random(n), 1)  # ties are frequent
        y = rng.random(n) < 0.4
        y[0] = True
        assert abs(average_precision(s, y) - _ap_oracle(list(s), list(y))) <= 1e-12


def test_ap_matches_sklearn_without_ties(rng):
    for _ in range(20):
        s = rng.random(50)
        y = rng.random(50) < 0.3
        y[:2] = True
        assert average_precision(s, y) == pytest.approx(average_precision_score(y, s), abs=1e-12)


@given(st.lists(st.integers(-500, 500), min_size=2, max_size=30), st.integers(0, 2**32 - 1))
def test_ap_invariant_to_monotone_transform(ints, seed):
    # a 0.01 grid keeps the transform strictly monotone in floating point
    y = np.random.default_rng(seed).random(len(ints)) < 0.5
    y[0] = True
    s = np.array(ints) / 100
    assert average_precision(s, y) == average_precision(s ** 3 + s, y)


def test_map_excludes_background_and_skips_empty_classes():
    assert head_map({"background": 0.0, "a": 1.0, "b": None, "c": 0.5}) == 0.75
    rep = report_from_scores({"goal": ["background", "a", "b"]},
                             {"goal": np.array([[0.9, 0.1, 0.0], [0.2, 0.8, 0.0]])},
                             {"goal": np.array([0, 1])})
    assert rep.mAP["goal"] == 1.0 and rep.ap["goal"]["b"] is None
    assert any("goal/b" in n for n in rep.extra["notes"])


# --- checkpoints --------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, stage1):
    ck = stage1.checkpoint
    ck.save(tmp_path / "a.ckpt")
    back = Checkpoint.load(tmp_path / "a.ckpt")
    assert back.config == ck.config and back.iteration == ck.iteration and back.adam_t == ck.adam_t
    assert all(back.params[k].tobytes() == v.tobytes() for k, v in ck.params.items())
    back.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_errors(tmp_path, stage1):
    with pytest.raises(CheckpointError):
        Checkpoint.load(tmp_path / "missing")
    raw = stage1.checkpoint.to_bytes()
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(raw[:-4])


# --- training -----------------------------------------------------------

def test_batch_order_is_fixed_and_covers_data():
    a = batch_order(10, 4, 5, seed=0, stage=1)
    assert [x.tolist() for x in a] == [x.tolist() for x in batch_order(10, 4, 5, seed=0, stage=1)]
    flat = np.concatenate(a)[:10]
    assert sorted(flat.tolist()) == list(range(10))


def test_stage1_trains_and_is_deterministic(data, stage1):
    again = train_stage1(S1, data[0])
    assert [r["loss"] for r in again.history] == [r["loss"] for r in stage1.history]
    assert stage1.checkpoint.to_bytes() == again.checkpoint.to_bytes()
    first, last = np.mean([r["loss"] for r in stage1.history[:5]]), np.mean([r["loss"] for r in stage1.history[-5:]])
    assert last < first
    assert set(stage1.checkpoint.params) == {"global.W", "global.b", "head.goal.W", "head.goal.b",
                                             "head.cause.W", "head.cause.b"}


def test_stage_preconditions(data, stage1):
    with pytest.raises(ValueError):
        train_stage1(S2, data[0])
    with pytest.raises(ValueError):
        train_stage2(S1, data[0], stage1.checkpoint)
    with pytest.raises(ValueError):
        train_stage1(S1, [])
    with pytest.raises(ValueError):
        stage2_init(dataclasses.replace(S2, D=8), stage1.checkpoint)


def test_warm_start_reproduces_stage1(data, stage1):
    m1 = model_from_checkpoint(stage1.checkpoint)
    m2 = stage2_init(S2, stage1.checkpoint)
    assert np.all(m2.params["head.goal.W"].data[: S2.D] == 0)
    for a, b in zip(predict(m1, data[1]).values(), predict(m2, data[1]).values()):
        assert np.array_equal(a, b)
    assert evaluate(m1, data[1]).mAP == evaluate(m2, data[1]).mAP


def test_stage2_trains_all_params(data, stage1):
    r = train_stage2(S2, data[0], stage1.checkpoint)
    again = train_stage2(S2, data[0], stage1.checkpoint)
    assert r.checkpoint.to_bytes() == again.checkpoint.to_bytes()
    assert np.any(r.checkpoint.params["head.goal.W"][: S2.D] != 0)
    assert "thing.W2" in r.checkpoint.params and "stuff.W1" in r.checkpoint.params
    first, last = np.mean([x["loss"] for x in r.history[:8]]), np.mean([x["loss"] for x in r.history[-8:]])
    assert last < first


def test_evaluate_dump_matches_reference_scorer(data, stage1):
    model = model_from_checkpoint(stage1.checkpoint)
    rep = evaluate(model, data[1], dump=True)
    assert rep.to_json() == evaluate(model, data[1], dump=True).to_json()
    assert rep.n_frames == 10 * 20
    for h, classes in rep.classes.items():
        s = np.array(rep.extra["scores"][h])
        y = np.array(rep.extra["labels"][h])
        for k, c in enumerate(classes):
            expect = _ap_oracle(list(s[:, k]), list(y == k))
            got = rep.ap[h][c]
            assert (got is None and expect is None) or abs(got - expect) <= 1e-12
            assert got is None or 0.0 <= got <= 1.0
        vals = [rep.ap[h][c] for c in classes[1:] if rep.ap[h][c] is not None]
        assert rep.mAP[h] == pytest.approx(np.mean(vals), abs=1e-15)


def test_separable_toy_set_scores_perfect_map():
    scores = np.array([[0.9, 0.1], [0.8, 0.2], [0.3, 0.7], [0.1, 0.9]])
    labels = np.array([0, 0, 1, 1])
    assert report_from_scores({"goal": ["background", "a"]}, {"goal": scores}, {"goal": labels}).mAP["goal"] == 1.0


# --- config -------------------------------------------------------------

def test_run_config_round_trip_and_validation(tmp_path):
    cfg = RunConfig()
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.train_config(2).lr == 0.0002 and cfg.train_config(1).lr == 0.001
    assert cfg.train_config(1).iterations == 2000 and cfg.train_config(1).batch_size == 8
    for bad in ({"extra": {}}, {"train": {"learning_rate": 1}}, {"train": {"fusion": "median"}},
                {"data": {"n_train": 2.5}}, {"train": {"lr_stage1": -1.0}}):
        with pytest.raises(ConfigError):
            RunConfig.from_dict(bad)
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        RunConfig.load(p)


def test_train_config_from_dict_round_trip():
    cfg = TrainConfig(stage=2, fusion="mlp", goal_classes=("merge",), cause_classes=())
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert list(cfg.heads) == ["goal"]
