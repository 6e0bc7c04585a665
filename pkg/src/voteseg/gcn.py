"""Proposal consolidation with edge convolutions on a radius graph.

Proposals within the connection radius exchange information: each node i
aggregates h(a_i, a_j - a_i) over neighbors j by channel-wise max, where
a = [position, feature] and h is a two-layer MLP. Nodes without
neighbors fall back to h(a_i, 0), which the implementation realizes as a
self-edge (the difference term vanishes). The first affine layer is
evaluated per node and combined per edge, so only the second layer pays
the per-edge cost.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import MlpParams, Tensor


class GraphError(ValueError):
    pass


@dataclass
class ProposalGraph:
    """Undirected radius graph with precomputed directed edge arrays."""

    n_nodes: int
    radius: float
    pairs: np.ndarray      # (E, 2) undirected, i < j, lexicographically sorted
    src: np.ndarray = field(repr=False)     # directed (+ self-edges on isolated nodes)
    dst: np.ndarray = field(repr=False)
    node_starts: np.ndarray = field(repr=False)  # segment starts per node in src order
    _plans: tuple = field(default=None, repr=False, compare=False)

    def degree(self, i: int) -> int:
        return int(np.sum(self.pairs == i))

    def neighbors(self, i: int) -> np.ndarray:
        out = np.concatenate([self.pairs[self.pairs[:, 0] == i, 1],
                              self.pairs[self.pairs[:, 1] == i, 0]])
        return np.sort(out)

    def edge_plans(self) -> tuple[ad.ScatterPlan, ad.ScatterPlan]:
        """Scatter layouts for (src, dst), shared by every layer on this graph."""
        if self._plans is None:
            self._plans = (ad.ScatterPlan(self.src, self.n_nodes),
                           ad.ScatterPlan(self.dst, self.n_nodes))
        return self._plans


def build_graph(positions: np.ndarray, radius: float = 2.0) -> ProposalGraph:
    """Connect proposals strictly closer than `radius`; no self-loops."""
    if radius <= 0:
        raise GraphError(f"connection radius must be positive, got {radius}")
    pos = np.asarray(positions, dtype=float)
    if pos.ndim != 2 or pos.shape[1] != 3:
        raise GraphError(f"positions must be (K, 3), got {pos.shape}")
    k = pos.shape[0]
    if k == 0:
        raise GraphError("graph over zero proposals")
    diff = pos[:, None, :] - pos[None, :, :]
    close = np.einsum("ijk,ijk->ij", diff, diff) < radius * radius
    iu, ju = np.triu_indices(k, 1)
    hit = close[iu, ju]
    pairs = np.stack([iu[hit], ju[hit]], axis=1).astype(np.int64)

    src = np.concatenate([pairs[:, 0], pairs[:, 1]])
    dst = np.concatenate([pairs[:, 1], pairs[:, 0]])
    isolated = np.setdiff1d(np.arange(k, dtype=np.int64), src)
    src = np.concatenate([src, isolated])
    dst = np.concatenate([dst, isolated])
    order = np.lexsort((dst, src))
    src, dst = src[order], dst[order]
    node_starts = np.searchsorted(src, np.arange(k))
    return ProposalGraph(n_nodes=k, radius=float(radius), pairs=pairs,
                         src=src, dst=dst, node_starts=node_starts)


def edgeconv_layer(graph: ProposalGraph, positions: Tensor, feats: Tensor,
                   params: MlpParams) -> Tensor:
    """One edge convolution: max over incident edges of h([a_i, a_j - a_i]).

    `params` is a two-layer MLP on concatenated [a_i, a_j - a_i]; its first
    affine splits into per-node halves so the per-edge work is one 128-wide
    affine. Self-edges on isolated nodes reduce to h([a_i, 0]) exactly.
    """
    if len(params.weights) != 2:
        raise GraphError("edge convolution expects a two-layer MLP")
    a = ad.concat_cols([positions, feats])
    d = a.data.shape[1]
    if params.widths[0] != 2 * d:
        raise GraphError(f"edge MLP input width {params.widths[0]} != 2*{d}")
    if a.data.shape[0] != graph.n_nodes:
        raise GraphError("feature count does not match graph")
    w1, b1 = params.weights[0], params.biases[0]
    w1_self = ad.slice_rows(w1, 0, d)
    w1_diff = ad.slice_rows(w1, d, 2 * d)
    u = ad.add(ad.matmul(a, w1_self), b1)   # contribution of a_i
    v = ad.matmul(a, w1_diff)               # contribution of a_j - a_i, split
    src_plan, dst_plan = graph.edge_plans()
    hidden = ad.relu(ad.edge_combine(u, v, src_plan, dst_plan))
    edge_out = ad.add(ad.matmul(hidden, params.weights[1]), params.biases[1])
    return ad.segment_max(edge_out, graph.node_starts)


@dataclass
class GcnParams:
    layers: list[MlpParams]

    @classmethod
    def create(cls, n_layers: int, rng: np.random.Generator, pos_dim: int = 3,
               feat_dim: int = 128, dtype=np.float64) -> "GcnParams":
        """Rectified-identity edge MLPs.

        Stacked max-aggregated edge layers gain roughly 1.4x per layer under
        plain He weights, which blows up activations and eats the whole
        gradient-clip budget by depth 10. Each layer therefore starts as
        ReLU(g_i) on the feature block of the node descriptor: lossless from
        the second layer on, and without a bias lift, so no hidden unit
        carries a large constant. A constant hidden component is what lets
        the optimizer slide per-column weight sums in lockstep toward
        constant node features, which the channel max over the (dense,
        desk-scale) graph then locks in. Small random weights everywhere
        else keep the neighbor-difference term learnable.
        """
        d = pos_dim + feat_dim
        layers = []
        for _ in range(n_layers):
            mlp = MlpParams.create((2 * d, feat_dim, feat_dim), rng, dtype=dtype)
            w1, w2 = mlp.weights
            w1.data *= 0.1
            w2.data *= 0.1
            idx = np.arange(feat_dim)
            w1.data[pos_dim + idx, idx] += 1.0
            w2.data[idx, idx] += 1.0
            layers.append(mlp)
        return cls(layers=layers)

    def named(self) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named(f"gcn.layer{i}"))
        return out

    def parameters(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out.extend(layer.parameters())
        return out


def consolidate(graph: ProposalGraph, positions: Tensor, feats: Tensor,
                params: GcnParams) -> Tensor:
    """Refine proposal features through the edge-conv stack; 0 layers is identity."""
    h = feats
    for layer in params.layers:
        h = edgeconv_layer(graph, positions, h, layer)
    return h
