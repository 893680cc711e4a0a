"""Clip preparation and the full ego-interaction model.

:func:`prepare_clip` does all the non-learned work once per clip (top-K
selection, pooling, unprojection, gating) and packs the result into a
:class:`ClipGraph`. Both graphs of a clip are stored block-diagonally so
that a forward pass touches every frame with a handful of matrix products.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .config import TrainConfig
from .features import BoundingBox, downsample_mask, mask_align, roi_align_lite, top_k_indices
from .geometry import DepthMap, ego_location, stuff_nearest, thing_location
from .graphs import GraphParams, NodeSet, block_mask, glorot, graph_forward, init_graph_params, stuff_mask, thing_mask
from .synthetic import SceneClip
from .temporal import ClassifierHead, MlpParams, classify, fuse_graphs, init_mlp, temporal_fuse
from .tensor import Tensor

THING_LAYERS = 2
STUFF_LAYERS = 1


@dataclass
class ClipGraph:
    """Precomputed, parameter-free inputs of one clip."""

    thing_nodes: list[NodeSet]
    stuff_nodes: list[NodeSet]
    stuff_dists: list[np.ndarray]
    thing_index: list[list[int]]  # per frame, source object index of each non-ego thing node
    global_mean: np.ndarray  # (1, D)
    labels: dict[str, int]
    frame_labels: dict[str, np.ndarray]
    causal_thing: int = -1
    causal_near: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))
    thing_X: np.ndarray = None
    thing_mask: np.ndarray = None
    thing_rows: np.ndarray = None
    stuff_X: np.ndarray = None
    stuff_mask: np.ndarray = None
    stuff_rows: np.ndarray = None

    @property
    def T(self) -> int:
        return len(self.thing_nodes)

    def causal_node(self, t: int) -> int:
        """Node index of the causal thing in frame ``t``, or -1 when it was not kept."""
        try:
            return self.thing_index[t].index(self.causal_thing)
        except ValueError:
            return -1


def prepare_clip(clip: SceneClip, cfg: TrainConfig) -> ClipGraph:
    dtype = np.dtype(cfg.dtype)
    fm = clip.features
    if fm.D != cfg.D:
        raise ValueError(f"clip has D={fm.D}, model expects D={cfg.D}")
    if fm.T != cfg.T:
        raise ValueError(f"clip has T={fm.T}, model expects T={cfg.T}")
    W, H = fm.frame_width, fm.frame_height
    full_frame = BoundingBox(0.0, 0.0, float(W), float(H), "ego")
    coarse_cache: dict[int, np.ndarray] = {}

    thing_nodes, stuff_nodes, stuff_dists, thing_index = [], [], [], []
    causal_near = np.zeros(fm.T, dtype=bool)
    for t in range(fm.T):
        depth = DepthMap(clip.depth[t])
        ego_loc = ego_location(depth, clip.intrinsics)
        ego_feat = roi_align_lite(fm, t, full_frame, cfg.grid)

        dets = clip.detections(t)
        keep = top_k_indices(dets, cfg.K)
        feats = [roi_align_lite(fm, t, dets[i], cfg.grid) for i in keep] + [ego_feat]
        locs = [thing_location(dets[i], depth, clip.intrinsics) for i in keep] + [ego_loc]
        kinds = [dets[i].cls for i in keep] + ["ego"]
        nodes = NodeSet(np.concatenate(feats).astype(dtype), np.array(locs), kinds, t)
        thing_nodes.append(nodes)
        thing_index.append(list(keep))
        if clip.causal_thing in keep:
            j = keep.index(clip.causal_thing)
            causal_near[t] = np.linalg.norm(nodes.locations[j] - nodes.locations[-1]) <= cfg.mu_thing

        s_feats, s_locs, s_kinds, dists = [], [], [], []
        for i, sm in enumerate(clip.stuff_masks(t)):
            key = id(sm.mask)
            if key not in coarse_cache:
                coarse_cache[key] = downsample_mask(sm.mask, fm.width, fm.height)
            coarse = coarse_cache[key]
            if not coarse.any():
                continue
            d, p = stuff_nearest(coarse, depth, clip.intrinsics, ego_loc)
            s_feats.append(mask_align(fm, t, coarse))
            s_locs.append(p)
            s_kinds.append(sm.cls)
            dists.append(d)
        stuff_nodes.append(NodeSet(np.concatenate(s_feats + [ego_feat]).astype(dtype), np.array(s_locs + [ego_loc]),
                                   s_kinds + ["ego"], t))
        stuff_dists.append(np.asarray(dists, dtype=np.float64))

    cg = ClipGraph(
        thing_nodes=thing_nodes,
        stuff_nodes=stuff_nodes,
        stuff_dists=stuff_dists,
        thing_index=thing_index,
        global_mean=fm.values.astype(np.float64).mean(axis=(0, 1, 2)).reshape(1, -1).astype(dtype),
        labels={"goal": clip.goal, "cause": clip.cause},
        frame_labels={"goal": clip.goal_labels.copy(), "cause": clip.cause_labels.copy()},
        causal_thing=clip.causal_thing,
        causal_near=causal_near,
    )
    rebuild_blocks(cg, cfg)
    return cg


def rebuild_blocks(cg: ClipGraph, cfg: TrainConfig) -> None:
    """(Re)compute the block-diagonal inputs for the gate settings in ``cfg``."""
    masks = [thing_mask(n, cfg.mu_thing, cfg.use_spatial_gate) for n in cg.thing_nodes]
    cg.thing_mask, cg.thing_rows = block_mask(masks)
    cg.thing_X = np.concatenate([n.features for n in cg.thing_nodes])
    masks = [stuff_mask(n.n, d, cfg.mu_stuff, cfg.use_spatial_gate) for n, d in zip(cg.stuff_nodes, cg.stuff_dists)]
    cg.stuff_mask, cg.stuff_rows = block_mask(masks)
    cg.stuff_X = np.concatenate([n.features for n in cg.stuff_nodes])


def stage1_names(cfg: TrainConfig) -> list[str]:
    names = ["global.W", "global.b"]
    for h in cfg.heads:
        names += [f"head.{h}.W", f"head.{h}.b"]
    return names


def init_params(cfg: TrainConfig, seed: int, graphs: bool = True) -> dict[str, Tensor]:
    """Fresh parameters; each group draws from its own seeded stream."""
    dtype = np.dtype(cfg.dtype)
    D = cfg.D

    def rng(group: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([seed, 0x9A7A, group]))

    def p(a) -> Tensor:
        return Tensor(a, requires_grad=True, dtype=dtype)

    params = {"global.W": p(glorot(rng(0), D, D, dtype)), "global.b": p(np.zeros(D))}
    for k, (name, classes) in enumerate(cfg.heads.items()):
        params[f"head.{name}.W"] = p(glorot(rng(1 + k), 2 * D, len(classes), dtype))
        params[f"head.{name}.b"] = p(np.zeros(len(classes)))
    if graphs:
        if cfg.use_thing_graph:
            params.update(init_graph_params(D, THING_LAYERS, rng(10), dtype).named("thing"))
        if cfg.use_stuff_graph:
            params.update(init_graph_params(D, STUFF_LAYERS, rng(11), dtype).named("stuff"))
        if cfg.fusion == "mlp":
            mlp = init_mlp(cfg.T, D, rng(12), dtype)
            params.update({"temporal.mlp.W1": mlp.W1, "temporal.mlp.b1": mlp.b1,
                           "temporal.mlp.W2": mlp.W2, "temporal.mlp.b2": mlp.b2})
    return params


class EgoModel:
    """Global path plus (optionally) the two interaction graphs and temporal fusion.

    A model without graph parameters is the global-only baseline: its ego
    input to the classifier is all zeros.
    """

    def __init__(self, cfg: TrainConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params
        self.has_graphs = any(k.startswith(("thing.", "stuff.")) for k in params)
        self.thing = GraphParams.from_named("thing", params, THING_LAYERS) if "thing.w" in params else None
        self.stuff = GraphParams.from_named("stuff", params, STUFF_LAYERS) if "stuff.w" in params else None
        mlp = None
        if "temporal.mlp.W1" in params:
            mlp = MlpParams(*(params[f"temporal.mlp.{k}"] for k in ("W1", "b1", "W2", "b2")))
        heads = {h: (params[f"head.{h}.W"], params[f"head.{h}.b"]) for h in cfg.heads}
        fusion = cfg.fusion if self.has_graphs else "avg"
        self.head = ClassifierHead(fusion, heads, mlp, {h: list(c) for h, c in cfg.heads.items()})

    @classmethod
    def initialize(cls, cfg: TrainConfig, seed: int | None = None, graphs: bool | None = None) -> "EgoModel":
        graphs = cfg.stage == 2 if graphs is None else graphs
        return cls(cfg, init_params(cfg, cfg.seed if seed is None else seed, graphs))

    @property
    def dtype(self):
        return np.dtype(self.cfg.dtype)

    def global_feature(self, cg: ClipGraph) -> Tensor:
        return tt.linear(Tensor(cg.global_mean, dtype=self.dtype), self.params["global.W"], self.params["global.b"])

    def ego_sequence(self, cg: ClipGraph) -> Tensor | None:
        """Per-frame graph-enhanced ego features ``(T, D)``; None when no graph is enabled."""
        parts = []
        if self.thing is not None:
            parts.append(graph_forward(cg.thing_X, cg.thing_mask, self.thing, cg.thing_rows)[0])
        if self.stuff is not None:
            parts.append(graph_forward(cg.stuff_X, cg.stuff_mask, self.stuff, cg.stuff_rows)[0])
        if not parts:
            return None
        return parts[0] if len(parts) == 1 else fuse_graphs(parts[0], parts[1])

    def ego_feature(self, cg: ClipGraph) -> Tensor:
        seq = self.ego_sequence(cg) if self.has_graphs else None
        if seq is None:
            return Tensor(np.zeros((1, self.cfg.D)), dtype=self.dtype)
        return temporal_fuse(seq, self.head.fusion, self.head.mlp)

    def forward(self, cg: ClipGraph) -> dict[str, Tensor]:
        return classify(self.ego_feature(cg), self.global_feature(cg), self.head)

    def loss(self, cg: ClipGraph) -> tuple[Tensor, dict[str, float]]:
        """Cross-entropy summed over heads, plus the per-head values."""
        logits = self.forward(cg)
        total, parts = None, {}
        for h, z in logits.items():
            l_h = tt.cross_entropy(z, cg.labels[h])
            parts[h] = float(l_h.item())
            total = l_h if total is None else tt.add(total, l_h)
        return total, parts

    def thing_affinity(self, cg: ClipGraph) -> np.ndarray:
        """Block-diagonal Ego-Thing affinity of the whole clip (no gradient)."""
        if self.thing is None:
            raise ValueError("model has no Ego-Thing graph")
        return graph_forward(cg.thing_X, cg.thing_mask, self.thing, cg.thing_rows)[1].data

    def stuff_affinity(self, cg: ClipGraph) -> np.ndarray:
        if self.stuff is None:
            raise ValueError("model has no Ego-Stuff graph")
        return graph_forward(cg.stuff_X, cg.stuff_mask, self.stuff, cg.stuff_rows)[1].data


def frame_block(G: np.ndarray, rows: np.ndarray, t: int) -> np.ndarray:
    """Frame ``t``'s square block of a block-diagonal clip affinity."""
    start = 0 if t == 0 else int(rows[t - 1]) + 1
    stop = int(rows[t]) + 1
    return G[start:stop, start:stop]
