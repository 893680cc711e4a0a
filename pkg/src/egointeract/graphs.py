"""Ego-Thing and Ego-Stuff affinity graphs with GCN message passing.

Node ``n - 1`` of every graph is the ego vehicle. The affinity of a frame is
built once from the input node features and shared by all GCN layers of
that graph.

Besides the per-frame API, :func:`block_mask` and :func:`graph_forward`
let a whole clip run as one block-diagonal graph: frames never exchange
messages because cross-frame entries are masked, so the result matches the
frame-by-frame computation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tt
from .geometry import MU_STUFF, MU_THING, gate_matrix
from .tensor import Tensor


@dataclass
class NodeSet:
    """Nodes of one frame; the ego node is the last row."""

    features: np.ndarray  # (n, D)
    locations: np.ndarray  # (n, 3)
    kinds: list[str] = field(default_factory=list)
    t: int = 0

    def __post_init__(self):
        self.features = np.asarray(self.features)
        self.locations = np.asarray(self.locations, dtype=np.float64).reshape(-1, 3)
        n = self.features.shape[0]
        if n < 1 or self.locations.shape[0] != n:
            raise ValueError("node features and locations must describe the same n >= 1 nodes")
        if not self.kinds:
            self.kinds = ["node"] * (n - 1) + ["ego"]
        if len(self.kinds) != n or self.kinds[-1] != "ego" or self.kinds.count("ego") != 1:
            raise ValueError("exactly one ego node is required, in the last position")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def ego(self) -> int:
        return self.n - 1

    def without(self, index: int) -> "NodeSet":
        if index == self.ego:
            raise ValueError("cannot remove the ego node")
        keep = [i for i in range(self.n) if i != index]
        return NodeSet(self.features[keep], self.locations[keep], [self.kinds[i] for i in keep], self.t)


@dataclass
class AffinityMatrix:
    G: Tensor
    variant: str  # "thing" | "stuff"
    t: int = 0

    @property
    def values(self) -> np.ndarray:
        return self.G.data


@dataclass
class GcnLayer:
    W: Tensor
    gain: Tensor
    bias: Tensor


@dataclass
class GraphParams:
    """Relation projections ``w``, ``w_prime`` and the stacked GCN layers of one graph."""

    w: Tensor
    w_prime: Tensor
    layers: list[GcnLayer]

    @property
    def D(self) -> int:
        return self.w.shape[0]

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.w": self.w, f"{prefix}.w_prime": self.w_prime}
        for i, layer in enumerate(self.layers, start=1):
            out[f"{prefix}.W{i}"] = layer.W
            out[f"{prefix}.ln{i}.gain"] = layer.gain
            out[f"{prefix}.ln{i}.bias"] = layer.bias
        return out

    @classmethod
    def from_named(cls, prefix: str, named: dict[str, Tensor], n_layers: int) -> "GraphParams":
        layers = [
            GcnLayer(named[f"{prefix}.W{i}"], named[f"{prefix}.ln{i}.gain"], named[f"{prefix}.ln{i}.bias"])
            for i in range(1, n_layers + 1)
        ]
        return cls(named[f"{prefix}.w"], named[f"{prefix}.w_prime"], layers)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float64) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def init_graph_params(D: int, n_layers: int, rng: np.random.Generator, dtype=np.float64) -> GraphParams:
    def p(a):
        return Tensor(a, requires_grad=True, dtype=dtype)

    w, w_prime = p(glorot(rng, D, D, dtype)), p(glorot(rng, D, D, dtype))
    layers = [GcnLayer(p(glorot(rng, D, D, dtype)), p(np.ones(D)), p(np.zeros(D))) for _ in range(n_layers)]
    return GraphParams(w, w_prime, layers)


def _as_input(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def appearance_relation(X, params: GraphParams) -> Tensor:
    """Scaled bilinear similarity ``(w x_i) . (w' x_j) / sqrt(D)`` for all node pairs."""
    X = _as_input(X, params.w.dtype)
    if X.shape[1] != params.D:
        raise tt.ShapeError(f"node features have D={X.shape[1]}, params expect D={params.D}")
    phi = tt.matmul(X, tt.transpose(params.w))
    phi_prime = tt.matmul(X, tt.transpose(params.w_prime))
    return tt.scale(tt.matmul(phi, tt.transpose(phi_prime)), 1.0 / math.sqrt(params.D))


def thing_mask(nodes: NodeSet, mu: float = MU_THING, use_gate: bool = True) -> np.ndarray:
    if not use_gate:
        return np.ones((nodes.n, nodes.n), dtype=np.int8)
    mask = gate_matrix(nodes.locations, mu)
    np.fill_diagonal(mask, 1)
    return mask


def stuff_mask(n: int, stuff_dists: Sequence[float], mu: float = MU_STUFF, use_gate: bool = True) -> np.ndarray:
    """Identity rows for stuff nodes; the ego row opens to stuff within ``mu``."""
    if len(stuff_dists) != n - 1:
        raise ValueError(f"expected {n - 1} stuff distances, got {len(stuff_dists)}")
    mask = np.eye(n, dtype=np.int8)
    if use_gate:
        mask[n - 1, : n - 1] = np.asarray(stuff_dists, dtype=np.float64) <= mu
    else:
        mask[n - 1, :] = 1
    return mask


def affinity(X, mask: np.ndarray, params: GraphParams) -> Tensor:
    return tt.softmax_row(appearance_relation(X, params), mask)


def ego_thing_affinity(nodes: NodeSet, mu: float, params: GraphParams, use_gate: bool = True) -> AffinityMatrix:
    G = affinity(nodes.features, thing_mask(nodes, mu, use_gate), params)
    return AffinityMatrix(G, "thing", nodes.t)


def ego_stuff_affinity(nodes: NodeSet, stuff_dists: Sequence[float], mu: float, params: GraphParams,
                       use_gate: bool = True) -> AffinityMatrix:
    G = affinity(nodes.features, stuff_mask(nodes.n, stuff_dists, mu, use_gate), params)
    return AffinityMatrix(G, "stuff", nodes.t)


def gcn_layer(G, Z: Tensor, layer: GcnLayer) -> Tensor:
    """``relu(layer_norm(G Z W + Z))``."""
    G = G.G if isinstance(G, AffinityMatrix) else G
    if G.shape != (Z.shape[0], Z.shape[0]):
        raise tt.ShapeError(f"affinity {G.shape} does not match {Z.shape[0]} nodes")
    msg = tt.matmul(tt.matmul(G, Z), layer.W)
    return tt.relu(tt.layer_norm(tt.add(msg, Z), layer.gain, layer.bias))


def graph_forward(X, mask: np.ndarray, params: GraphParams, ego_rows) -> tuple[Tensor, Tensor]:
    """Run all layers of one graph; returns (ego rows of the output, affinity)."""
    X = _as_input(X, params.w.dtype)
    G = affinity(X, mask, params)
    Z = X
    for layer in params.layers:
        Z = gcn_layer(G, Z, layer)
    return tt.take_rows(Z, ego_rows), G


def ego_thing_forward(nodes: NodeSet, mu: float, params: GraphParams, use_gate: bool = True) -> Tensor:
    out, _ = graph_forward(nodes.features, thing_mask(nodes, mu, use_gate), params, [nodes.ego])
    return out


def ego_stuff_forward(nodes: NodeSet, stuff_dists: Sequence[float], mu: float, params: GraphParams,
                      use_gate: bool = True) -> Tensor:
    out, _ = graph_forward(nodes.features, stuff_mask(nodes.n, stuff_dists, mu, use_gate), params, [nodes.ego])
    return out


def block_mask(masks: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Stack per-frame masks block-diagonally; returns (mask, ego row index per frame)."""
    sizes = [m.shape[0] for m in masks]
    total = sum(sizes)
    out = np.zeros((total, total), dtype=np.int8)
    ego_rows = np.empty(len(masks), dtype=np.intp)
    start = 0
    for i, m in enumerate(masks):
        out[start:start + sizes[i], start:start + sizes[i]] = m
        start += sizes[i]
        ego_rows[i] = start - 1
    return out, ego_rows
