"""Dynamic graph feature refinement.

Feature rows are treated as graph nodes.  A small MLP scores every node pair,
the midpoint of the score range prunes weak edges, surviving weights
aggregate neighbor features, and a row-stochastic alignment matrix ties the
refined object nodes to the refined scene rows before a multi-head attention
block produces the decoder context.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .ssff import glorot


@dataclass
class EdgeMLPParams:
    """Two-layer scorer: sigmoid(w2 . relu(W1 pair + b1) + b2).

    The hidden layer is square; a separate learned head reduces it to the
    scalar edge weight.  Biases start at small random values to break
    symmetry.
    """

    W1: Tensor     # d x d (product mode) or 2d x d (concat mode)
    b1: Tensor     # 1 x d
    w2: Tensor     # d x 1
    b2: Tensor     # 1 x 1

    @classmethod
    def init(cls, rng: np.random.Generator, d: int,
             edge_mode: str = "product") -> "EdgeMLPParams":
        in_dim = d if edge_mode == "product" else 2 * d
        return cls(
            W1=glorot(rng, in_dim, d),
            b1=Tensor(rng.normal(0.0, 0.01, (1, d)), requires_grad=True),
            w2=glorot(rng, d, 1),
            b2=Tensor(rng.normal(0.0, 0.01, (1, 1)), requires_grad=True),
        )


@dataclass
class GraphParams:
    edge: EdgeMLPParams
    W_v: Tensor    # d x d neighbor aggregation map

    @classmethod
    def init(cls, rng: np.random.Generator, d: int,
             edge_mode: str = "product") -> "GraphParams":
        return cls(edge=EdgeMLPParams.init(rng, d, edge_mode), W_v=glorot(rng, d, d))

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.edge.W1": self.edge.W1,
            f"{prefix}.edge.b1": self.edge.b1,
            f"{prefix}.edge.w2": self.edge.w2,
            f"{prefix}.edge.b2": self.edge.b2,
            f"{prefix}.W_v": self.W_v,
        }


@dataclass
class AttentionParams:
    W_q: Tensor
    W_k: Tensor
    W_v: Tensor
    W_o: Tensor
    heads: int

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, heads: int) -> "AttentionParams":
        if d % heads:
            raise ValueError(f"model dim {d} not divisible by {heads} heads")
        return cls(W_q=glorot(rng, d, d), W_k=glorot(rng, d, d),
                   W_v=glorot(rng, d, d), W_o=glorot(rng, d, d), heads=heads)

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.W_q": self.W_q, f"{prefix}.W_k": self.W_k,
                f"{prefix}.W_v": self.W_v, f"{prefix}.W_o": self.W_o}


@dataclass
class RefinedGraph:
    nodes: Tensor            # k x d input nodes
    edge_weights: Tensor     # k x k in (0, 1)
    threshold: float
    adjacency: np.ndarray    # binary, self-loops forced
    masked_weights: Tensor   # edge_weights * adjacency
    refined: Tensor          # k x d


def edge_weights(nodes: Tensor, params: EdgeMLPParams,
                 edge_mode: str = "product") -> Tensor:
    """Score every ordered node pair with the edge MLP.

    Product mode combines a pair elementwise, which makes the score matrix
    symmetric by construction; concat mode does not guarantee symmetry.
    """
    k = nodes.shape[0]
    idx_i = np.repeat(np.arange(k), k)
    idx_j = np.tile(np.arange(k), k)
    vi = ad.gather_rows(nodes, idx_i)
    vj = ad.gather_rows(nodes, idx_j)
    if edge_mode == "product":
        pair = ad.mul(vi, vj)
    elif edge_mode == "concat":
        pair = ad.concat_cols([vi, vj])
    else:
        raise ValueError(f"unknown edge mode {edge_mode!r}")
    hidden = ad.relu(ad.add(ad.matmul(pair, params.W1), params.b1))
    scores = ad.add(ad.matmul(hidden, params.w2), params.b2)
    return ad.reshape(ad.sigmoid(scores), (k, k))


def threshold(W_o: Tensor) -> float:
    """Midpoint of the score range: min + 0.5 * (max - min)."""
    lo = float(np.min(W_o.data))
    hi = float(np.max(W_o.data))
    return lo + 0.5 * (hi - lo)


def adjacency(W_o: Tensor, t: float,
              self_loops: bool = True) -> tuple[np.ndarray, Tensor]:
    """Keep edges scoring at least t; optionally force self-loops.

    The binary mask is constant during backward, so gradients flow through
    the retained scores only.
    """
    if not np.isfinite(t):
        raise ValueError(f"threshold must be finite, got {t}")
    mask = (W_o.data >= t).astype(np.float64)
    if self_loops:
        np.fill_diagonal(mask, 1.0)
    return mask, ad.mul_mask(W_o, mask)


def refine(nodes: Tensor, W_n: Tensor, A: np.ndarray, W_v: Tensor) -> Tensor:
    """Aggregate each node's retained neighbors: sum_j w_ij (v_j W_v)."""
    if not A.any(axis=1).all():
        raise ValueError("refine needs degree >= 1 for every node")
    return ad.matmul(W_n, ad.matmul(nodes, W_v))


def refine_graph(nodes: Tensor, params: GraphParams,
                 edge_mode: str = "product",
                 self_loops: bool = True) -> RefinedGraph:
    W_o = edge_weights(nodes, params.edge, edge_mode)
    t = threshold(W_o)
    A, W_n = adjacency(W_o, t, self_loops)
    refined = refine(nodes, W_n, A, params.W_v)
    return RefinedGraph(nodes=nodes, edge_weights=W_o, threshold=t,
                        adjacency=A, masked_weights=W_n, refined=refined)


def knowledge_matrix(roi_refined: Tensor, fusion_refined: Tensor) -> Tensor:
    """Row-stochastic object-to-scene alignment: softmax(R F^T / sqrt(d))."""
    d = roi_refined.shape[1]
    if fusion_refined.shape[1] != d:
        raise ad.DimensionError(
            f"model dims disagree: {roi_refined.shape} vs {fusion_refined.shape}")
    logits = ad.matmul(roi_refined, ad.transpose(fusion_refined))
    return ad.softmax_rows(logits, scale=1.0 / np.sqrt(d))


def scene_object_attention(roi_refined: Tensor, Z: Tensor,
                           fusion_refined: Tensor,
                           params: AttentionParams) -> Tensor:
    """Multi-head attention of object queries over scene-aligned context.

    The alignment matrix pools the refined scene rows into one context row
    per object (S = Z F'); keys and values come from S, queries from the
    refined objects.
    """
    d = roi_refined.shape[1]
    heads = params.heads
    if d % heads:
        raise ValueError(f"model dim {d} not divisible by {heads} heads")
    aligned = ad.matmul(Z, fusion_refined)                  # m x d
    q = ad.matmul(roi_refined, params.W_q)
    k = ad.matmul(aligned, params.W_k)
    v = ad.matmul(aligned, params.W_v)
    d_head = d // heads
    outputs = []
    for h in range(heads):
        j0, j1 = h * d_head, (h + 1) * d_head
        qh, kh, vh = (ad.slice_cols(t, j0, j1) for t in (q, k, v))
        weights = ad.softmax_rows(ad.matmul(qh, ad.transpose(kh)),
                                  scale=1.0 / np.sqrt(d_head))
        outputs.append(ad.matmul(weights, vh))
    return ad.matmul(ad.concat_cols(outputs), params.W_o)
