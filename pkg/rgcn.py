"""
Relational graph convolution over a fully connected person graph.

Node embeddings are kept as row stacks H (N x F), so W·h_i for every node is a
single product M = H Wᵀ. Edge features for all unordered pairs i < j are
gathered from M, and the gated neighbour sum of the node update is scattered
back to nodes through two constant incidence matrices:

    r_ij^t    = relu(W^t h_i^t + W^t h_j^t)
    h_i^{t+1} = h_i^t + relu(W^t h_i^t + sum_j r_ij^t * W^t h_j^t)
    r_ij      = max_t r_ij^t,   t = 0..T

h^0 = w x_i. Layer T only produces edge features (with W^T), which is why
there are T+1 layer matrices.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from dataset.records import ImageRecord, Pair, all_pairs, canonical_pair
from errors import DimensionError, EmptyImageError
from numeric import (
    Tensor,
    add,
    as_tensor,
    matmul,
    max_over_list,
    mul,
    relu,
    take_rows,
    transpose,
    zeros,
)
from utils.seeding import make_rng

logger = logging.getLogger(__name__)

PARAM_PREFIX = "rgcn"


@dataclass
class PersonGraph:
    n_persons: int
    node_features: np.ndarray  # (N, F) rows are x_i
    edge_list: List[Pair]

    @property
    def feature_dim(self) -> int:
        return int(self.node_features.shape[1])

    def permuted(self, perm: Sequence[int]) -> "PersonGraph":
        """Relabel persons so that new node perm[k] is old node k."""
        perm = list(perm)
        inverse = np.argsort(perm)
        return PersonGraph(
            n_persons=self.n_persons,
            node_features=self.node_features[inverse],
            edge_list=list(self.edge_list),
        )


@dataclass
class RgcnParams:
    w: Tensor  # F x F input projection
    layer_weights: List[Tensor]  # W^0..W^T

    @property
    def depth(self) -> int:
        return len(self.layer_weights) - 1

    @property
    def feature_dim(self) -> int:
        return int(self.w.shape[0])

    def named(self) -> Dict[str, Tensor]:
        params = {f"{PARAM_PREFIX}.w": self.w}
        for t, W in enumerate(self.layer_weights):
            params[f"{PARAM_PREFIX}.W.{t}"] = W
        return params

    @classmethod
    def from_named(cls, params: Mapping[str, Tensor]) -> "RgcnParams":
        depth = sum(1 for name in params if name.startswith(f"{PARAM_PREFIX}.W."))
        if f"{PARAM_PREFIX}.w" not in params or depth == 0:
            raise DimensionError("parameter store has no RGCN weights")
        return cls(
            w=params[f"{PARAM_PREFIX}.w"],
            layer_weights=[params[f"{PARAM_PREFIX}.W.{t}"] for t in range(depth)],
        )

    def check(self) -> None:
        F = self.feature_dim
        for name, p in self.named().items():
            if p.shape != (F, F):
                raise DimensionError(f"{name} must be ({F}, {F}), got {p.shape}")


@dataclass
class GraphState:
    pairs: List[Pair]
    node_embeddings: List[Tensor] = field(default_factory=list)  # h^0..h^T, each (N, F)
    edge_features: List[Tensor] = field(default_factory=list)  # r^0..r^T, each (E, F)
    fused: Optional[Tensor] = None  # (E, F)

    def _edge_row(self, i: int, j: int) -> int:
        return self.pairs.index(canonical_pair(i, j))

    def edge(self, i: int, j: int, t: int) -> np.ndarray:
        return self.edge_features[t].data[self._edge_row(i, j)]

    def fused_edge(self, i: int, j: int) -> np.ndarray:
        return self.fused.data[self._edge_row(i, j)]

    def node(self, i: int, t: int) -> np.ndarray:
        return self.node_embeddings[t].data[i]


def init_rgcn_params(feature_dim: int, depth: int, seed: int) -> RgcnParams:
    """Uniform in ±sqrt(6 / 2F) for w and every W^t."""
    if feature_dim < 1 or depth < 0:
        raise DimensionError(f"need F >= 1 and T >= 0, got F={feature_dim}, T={depth}")
    rng = make_rng(seed, "rgcn", "init")
    bound = np.sqrt(6.0 / (2.0 * feature_dim))

    def draw(name: str) -> Tensor:
        return Tensor(rng.uniform(-bound, bound, size=(feature_dim, feature_dim)), requires_grad=True, name=name)

    return RgcnParams(
        w=draw(f"{PARAM_PREFIX}.w"),
        layer_weights=[draw(f"{PARAM_PREFIX}.W.{t}") for t in range(depth + 1)],
    )


def build_graph(record: ImageRecord, feature_dim: Optional[int] = None) -> PersonGraph:
    if record.n_persons < 1:
        raise EmptyImageError("image has no persons", record_id=record.image_id, field="n_persons")
    feats = np.asarray(record.person_features)
    dim = feature_dim if feature_dim is not None else feats.shape[-1]
    if feats.shape != (record.n_persons, dim):
        raise DimensionError(
            f"expected person features of shape ({record.n_persons}, {dim}), got {feats.shape}",
            record_id=record.image_id,
            field="person_features",
        )
    return PersonGraph(n_persons=record.n_persons, node_features=feats, edge_list=all_pairs(record.n_persons))


def edge_update(h_i: Tensor, h_j: Tensor, W_t: Tensor) -> Tensor:
    """r_ij = relu(W h_i + W h_j) for one pair of node vectors."""
    h_i, h_j, W_t = as_tensor(h_i), as_tensor(h_j), as_tensor(W_t)
    if h_i.shape != h_j.shape:
        raise DimensionError(f"edge_update node shapes differ: {h_i.shape} vs {h_j.shape}")
    return relu(add(matmul(W_t, h_i), matmul(W_t, h_j)))


def node_update(h_i: Tensor, neighbors: Sequence[Tuple[Tensor, Tensor]], W_t: Tensor) -> Tensor:
    """
    h_i + relu(W h_i + sum_j r_ij * W h_j) for one node; `neighbors` holds the
    (h_j, r_ij) pairs of every other node. The sum is not normalised.
    """
    h_i, W_t = as_tensor(h_i), as_tensor(W_t)
    pre = matmul(W_t, h_i)
    for h_j, r_ij in neighbors:
        h_j, r_ij = as_tensor(h_j), as_tensor(r_ij)
        if h_j.shape != h_i.shape or r_ij.shape != h_i.shape:
            raise DimensionError(f"neighbor shapes {h_j.shape}, {r_ij.shape} do not match node {h_i.shape}")
        pre = add(pre, mul(r_ij, matmul(W_t, h_j)))
    return add(h_i, relu(pre))


def _incidence(pairs: Sequence[Pair], n: int) -> Tuple[np.ndarray, np.ndarray]:
    first = np.zeros((n, len(pairs)))
    second = np.zeros((n, len(pairs)))
    for e, (i, j) in enumerate(pairs):
        first[i, e] = 1.0
        second[j, e] = 1.0
    return first, second


def rgcn_forward(graph: PersonGraph, params: RgcnParams) -> GraphState:
    params.check()
    F = params.feature_dim
    if graph.feature_dim != F:
        raise DimensionError(f"graph has feature dim {graph.feature_dim}, params expect {F}")

    pairs = list(graph.edge_list)
    first = [i for i, _ in pairs]
    second = [j for _, j in pairs]
    to_first, to_second = _incidence(pairs, graph.n_persons)
    to_first_t = Tensor(to_first, dtype=params.w.dtype)
    to_second_t = Tensor(to_second, dtype=params.w.dtype)

    X = Tensor(graph.node_features, dtype=params.w.dtype)
    H = matmul(X, transpose(params.w))
    state = GraphState(pairs=pairs, node_embeddings=[H])

    for t, W in enumerate(params.layer_weights):
        M = matmul(H, transpose(W))
        if pairs:
            R = relu(add(take_rows(M, first), take_rows(M, second)))
        else:
            R = zeros((0, F), dtype=params.w.dtype)
        state.edge_features.append(R)
        if t == params.depth:
            break
        pre = M
        if pairs:
            # node i hears r_ij * W h_j, node j hears r_ij * W h_i
            heard_by_first = mul(R, take_rows(M, second))
            heard_by_second = mul(R, take_rows(M, first))
            pre = add(pre, add(matmul(to_first_t, heard_by_first), matmul(to_second_t, heard_by_second)))
        H = add(H, relu(pre))
        state.node_embeddings.append(H)

    state.fused = max_over_list(state.edge_features) if pairs else zeros((0, F), dtype=params.w.dtype)
    return state


def encode_record(record: ImageRecord, params: RgcnParams) -> GraphState:
    return rgcn_forward(build_graph(record, feature_dim=params.feature_dim), params)
