"""Temporal fusion of per-frame ego features and the multi-head classifier."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .graphs import glorot
from .tensor import Tensor

FUSION_MODES = ("max", "avg", "mlp")


@dataclass
class MlpParams:
    W1: Tensor  # (T * D, H)
    b1: Tensor
    W2: Tensor  # (H, D)
    b2: Tensor


@dataclass
class ClassifierHead:
    """Fusion mode, optional temporal MLP and one linear layer per task head.

    Each head maps ``concat(ego, global)`` (``2D`` wide) to its class logits;
    index 0 of every head is the background class.
    """

    fusion: str
    heads: dict[str, tuple[Tensor, Tensor]]
    mlp: MlpParams | None = None
    classes: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.fusion!r}; pick one of {FUSION_MODES}")
        if self.fusion == "mlp" and self.mlp is None:
            raise ValueError("mlp fusion needs MLP parameters")


def init_mlp(T: int, D: int, rng: np.random.Generator, dtype=np.float64, hidden: int | None = None) -> MlpParams:
    H = 2 * D if hidden is None else hidden

    def p(a):
        return Tensor(a, requires_grad=True, dtype=dtype)

    return MlpParams(p(glorot(rng, T * D, H, dtype)), p(np.zeros(H)), p(glorot(rng, H, D, dtype)), p(np.zeros(D)))


def fuse_graphs(thing_ego: Tensor, stuff_ego: Tensor) -> Tensor:
    return tt.add(thing_ego, stuff_ego)


def temporal_fuse(seq: Tensor, mode: str, mlp: MlpParams | None = None) -> Tensor:
    """Reduce a ``(T, D)`` sequence of ego features to ``(1, D)``."""
    if seq.shape[0] == 0:
        raise ValueError("temporal_fuse: empty sequence")
    if mode == "max":
        return tt.reduce_max(seq, axis=0, keepdims=True)
    if mode == "avg":
        return tt.reduce_mean(seq, axis=0, keepdims=True)
    if mode == "mlp":
        if mlp is None:
            raise ValueError("mlp fusion needs MLP parameters")
        if mlp.W1.shape[0] != seq.size:
            raise tt.ShapeError(f"MLP expects {mlp.W1.shape[0]} inputs, sequence has {seq.size}")
        flat = tt.reshape(seq, (1, seq.size))
        return tt.linear(tt.relu(tt.linear(flat, mlp.W1, mlp.b1)), mlp.W2, mlp.b2)
    raise ValueError(f"unknown fusion mode {mode!r}")


def classify(ego_feat: Tensor, global_feat: Tensor, head: ClassifierHead) -> dict[str, Tensor]:
    joint = tt.concat_lastdim(ego_feat, global_feat)
    out = {}
    for name, (W, b) in head.heads.items():
        if W.shape[0] != joint.shape[1]:
            raise tt.ShapeError(f"head {name!r} expects {W.shape[0]} inputs, got {joint.shape[1]}")
        out[name] = tt.linear(joint, W, b)
    return out
