"""Two-stage training, evaluation and the Adam optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as tt
from .checkpoint import Checkpoint
from .config import TrainConfig
from .metrics import EvalReport, report_from_scores
from .model import ClipGraph, EgoModel, stage1_names
from .tensor import Tape, Tensor

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class NumericError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, betas=ADAM_BETAS, eps: float = ADAM_EPS):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            update = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"m/{k}": v for k, v in self.m.items()}
        out.update({f"v/{k}": v for k, v in self.v.items()})
        return out


def batch_order(n: int, batch_size: int, iterations: int, seed: int, stage: int) -> list[np.ndarray]:
    """Fixed sequence of minibatches: reshuffle at each pass over the data."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, stage, 0xBA7C]))
    out, perm, pos = [], rng.permutation(n), 0
    for _ in range(iterations):
        idx = []
        while len(idx) < batch_size:
            if pos == n:
                perm, pos = rng.permutation(n), 0
            take = min(batch_size - len(idx), n - pos)
            idx.extend(perm[pos:pos + take])
            pos += take
        out.append(np.asarray(idx))
    return out


@dataclass
class TrainResult:
    model: EgoModel
    checkpoint: Checkpoint
    history: list[dict] = field(default_factory=list)


def _fit(model: EgoModel, names: Sequence[str], data: Sequence[ClipGraph], cfg: TrainConfig,
         log: Callable[[dict], None] | None) -> tuple[Adam, list[dict]]:
    if len(data) == 0:
        raise ValueError("no training clips")
    trainable = {k: model.params[k] for k in names}
    for k, p in model.params.items():
        p.requires_grad = k in trainable
    opt = Adam(trainable, cfg.lr)
    history = []
    for it, batch in enumerate(batch_order(len(data), cfg.batch_size, cfg.iterations, cfg.seed, cfg.stage), 1):
        parts = {h: 0.0 for h in cfg.heads}
        with Tape() as tape:
            total = None
            for i in batch:
                l_clip, per_head = model.loss(data[i])
                total = l_clip if total is None else tt.add(total, l_clip)
                for h, v in per_head.items():
                    parts[h] += v / len(batch)
            loss = tt.scale(total, 1.0 / len(batch))
        tape.backward(loss)
        value = loss.item()
        if not np.isfinite(value) or not all(np.all(np.isfinite(p.grad)) for p in trainable.values()):
            raise NumericError(f"non-finite loss or gradient at iteration {it}")
        opt.step()
        row = {"iteration": it, "loss": value, **{f"loss_{h}": v for h, v in parts.items()}}
        history.append(row)
        if log is not None:
            log(row)
    for p in model.params.values():
        p.grad = None
    return opt, history


def _checkpoint(model: EgoModel, cfg: TrainConfig, opt: Adam | None) -> Checkpoint:
    params = {k: p.data.astype(np.float32) for k, p in model.params.items()}
    moments = {k: v.astype(np.float32) for k, v in opt.state().items()} if opt else {}
    return Checkpoint(cfg.stage, opt.t if opt else 0, cfg.to_dict(), params, moments, opt.t if opt else 0)


def train_stage1(cfg: TrainConfig, data: Sequence[ClipGraph], log=None) -> TrainResult:
    """Global path and classifier only; the ego input is held at zero."""
    if cfg.stage != 1:
        raise ValueError("train_stage1 needs a stage-1 config")
    model = EgoModel.initialize(cfg, graphs=False)
    opt, history = _fit(model, stage1_names(cfg), data, cfg, log)
    return TrainResult(model, _checkpoint(model, cfg, opt), history)


def model_from_checkpoint(ckpt: Checkpoint, dtype: str | None = None) -> EgoModel:
    cfg = TrainConfig.from_dict(ckpt.config)
    if dtype is not None:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), "dtype": dtype})
    params = {k: Tensor(v, dtype=cfg.dtype) for k, v in ckpt.params.items()}
    return EgoModel(cfg, params)


def stage2_init(cfg: TrainConfig, stage1: Checkpoint) -> EgoModel:
    """Stage-2 model: stage-1 weights, fresh graphs, zeroed ego block of every head.

    With the ego rows of the head weights at zero, the initial stage-2 model
    predicts exactly what the stage-1 model does.
    """
    s1 = TrainConfig.from_dict(stage1.config)
    for key in ("D", "goal_classes", "cause_classes"):
        if getattr(s1, key) != getattr(cfg, key):
            raise ValueError(f"stage-1 checkpoint has {key}={getattr(s1, key)!r}, config has {getattr(cfg, key)!r}")
    model = EgoModel.initialize(cfg, graphs=True)
    for k in stage1_names(cfg):
        model.params[k].data = stage1.params[k].astype(model.dtype)
    for h in cfg.heads:
        model.params[f"head.{h}.W"].data[: cfg.D] = 0
    return model


def train_stage2(cfg: TrainConfig, data: Sequence[ClipGraph], stage1: Checkpoint, log=None) -> TrainResult:
    if cfg.stage != 2:
        raise ValueError("train_stage2 needs a stage-2 config")
    model = stage2_init(cfg, stage1)
    opt, history = _fit(model, list(model.params), data, cfg, log)
    return TrainResult(model, _checkpoint(model, cfg, opt), history)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def predict(model: EgoModel, data: Sequence[ClipGraph]) -> dict[str, np.ndarray]:
    """Clip-level class probabilities per head, ``(clips, C)``."""
    out: dict[str, list] = {h: [] for h in model.cfg.heads}
    for cg in data:
        for h, z in model.forward(cg).items():
            out[h].append(_softmax(z.data.reshape(-1).astype(np.float64)))
    return {h: np.array(v) for h, v in out.items()}


def evaluate(model: EgoModel, data: Sequence[ClipGraph], dump: bool = False) -> EvalReport:
    """Per-frame AP: every frame carries its clip's prediction."""
    probs = predict(model, data)
    scores = {h: np.repeat(p, [cg.T for cg in data], axis=0) for h, p in probs.items()}
    labels = {h: np.concatenate([cg.frame_labels[h] for cg in data]) for h in probs}
    report = report_from_scores({h: list(c) for h, c in model.cfg.heads.items()}, scores, labels)
    if dump:
        report.extra["scores"] = {h: s.tolist() for h, s in scores.items()}
        report.extra["labels"] = {h: y.tolist() for h, y in labels.items()}
    return report


def attention_recovery(model: EgoModel, data: Sequence[ClipGraph]) -> tuple[float, int]:
    """Share of causal frames whose strongest non-self ego attention lands on the causal thing.

    Only frames where the causal thing is kept and within the gate count.
    """
    hits = total = 0
    for cg in data:
        if cg.causal_thing < 0 or not cg.causal_near.any():
            continue
        G = model.thing_affinity(cg)
        start = 0
        for t in range(cg.T):
            n = cg.thing_nodes[t].n
            if cg.causal_near[t]:
                row = G[start + n - 1, start:start + n].copy()
                row[n - 1] = -np.inf
                total += 1
                hits += int(np.argmax(row) == cg.causal_node(t))
            start += n
    return (hits / total if total else float("nan")), total
