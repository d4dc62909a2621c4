"""Attention layers over the heterogeneous POI/Query graph.

Per layer: edge embeddings are ``sigmoid(max(W n_u, W n_v))`` over each
edge's two endpoints; every node fuses its incident edges of each type with
a cross attention keyed by its own embedding and scaled by the stored edge
weights; the node is then updated residually from the fused edges and its
multi-source (text + location) representation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graphbuild import HeteroGraph
from .numerics import ParamStore, Tensor, dropout, ops, uniform_init
from .numerics.tensor import DimensionError

EDGE_TYPES = ("pp", "pq")


class GraphIntegrityError(ValueError):
    pass


@dataclass
class Incidence:
    """Edges of one type plus the (node, edge) incidence pairs."""

    ends: tuple[np.ndarray, np.ndarray]  # global node ids of both endpoints
    weight: np.ndarray
    node: np.ndarray  # receiving node of each incidence pair
    edge: np.ndarray  # edge of each incidence pair

    @property
    def num_edges(self) -> int:
        return len(self.weight)


def incidences(graph: HeteroGraph, masked_zero_weight: bool = False) -> dict[str, Incidence]:
    P = graph.num_pois
    raw = {
        "pp": (graph.app_src, graph.app_dst, graph.app_w),
        "pq": (graph.apq_poi, graph.apq_query + P, graph.apq_w),
    }
    out = {}
    for r, (a, b, w) in raw.items():
        a = np.asarray(a, dtype=np.int64)
        b = np.asarray(b, dtype=np.int64)
        if len(a) and (a.min() < 0 or b.max() >= graph.num_nodes or a.max() >= graph.num_nodes):
            raise GraphIntegrityError(f"{r} edge endpoint outside the node table")
        if r == "pp" and np.any(a == b):
            raise GraphIntegrityError("self-loop in POI-POI edges")
        m = len(w)
        node = np.concatenate([a, b])
        edge = np.concatenate([np.arange(m), np.arange(m)])
        if masked_zero_weight:
            keep = np.asarray(w)[edge] != 0
            node, edge = node[keep], edge[keep]
        order = np.lexsort((edge, node))
        out[r] = Incidence((a, b), np.asarray(w, dtype=np.float64), node[order], edge[order])
    return out


@dataclass
class GraphLayer:
    w_agg: Tensor | None  # (d_n, d_e); None when the graph has no edges
    w_r: dict[str, Tensor]  # (d_e, K * d_n) per edge type
    w_1: dict[str, Tensor]  # (d_e, d_n); one shared entry under "*" unless per-type
    w_2: Tensor  # (d, d_n)
    heads: int

    @property
    def d_n(self) -> int:
        return self.w_2.shape[1]

    def w1_for(self, r: str) -> Tensor:
        return self.w_1.get(r, self.w_1.get("*"))


@dataclass
class GraphParams:
    layers: list[GraphLayer] = field(default_factory=list)

    @classmethod
    def create(cls, store: ParamStore, rng, d: int = 128, d_n: int = 128, widths=(128, 256),
               heads: int = 4, edge_types=EDGE_TYPES, per_type_w1: bool = False,
               prefix: str = "hgl") -> "GraphParams":
        layers = []
        for k, d_e in enumerate(widths):
            p = f"{prefix}.{k}"
            w_agg = store.add(f"{p}.w_agg", uniform_init(rng, (d_n, d_e))) if edge_types else None
            w_r = {r: store.add(f"{p}.w_r.{r}", uniform_init(rng, (d_e, heads * d_n))) for r in edge_types}
            w1_keys = (list(edge_types) if per_type_w1 else ["*"]) if edge_types else []
            w_1 = {r: store.add(f"{p}.w_1.{r}", uniform_init(rng, (d_e, d_n))) for r in w1_keys}
            w_2 = store.add(f"{p}.w_2", uniform_init(rng, (d, d_n)))
            layers.append(GraphLayer(w_agg, w_r, w_1, w_2, heads))
        return cls(layers)


@dataclass
class NodeReps:
    P_tilde: Tensor
    Q_tilde: Tensor


def edge_embed(nodes: Tensor, ends: tuple[np.ndarray, np.ndarray], w_agg: Tensor) -> Tensor:
    """``sigmoid(max(n_u W, n_v W))`` for each edge ``(u, v)``; shape ``(m, d_e)``."""
    t = ops.matmul(nodes, w_agg)
    return ops.sigmoid(ops.maximum(ops.take(t, ends[0]), ops.take(t, ends[1])))


def attention_weights(nodes: Tensor, edges: Tensor, inc: Incidence, w_r: Tensor, heads: int) -> Tensor:
    """Per incidence pair and head: softmax over the node's edges of
    ``(n_i . tanh(W_r e_j)) * A_j``. Shape ``(len(inc.node), heads)``."""
    d_n = nodes.shape[1]
    u = ops.tanh(ops.matmul(edges, w_r))  # (m, K*d_n)
    u = ops.reshape(u, (edges.shape[0], heads, d_n))
    ni = ops.reshape(ops.take(nodes, inc.node), (len(inc.node), 1, d_n))
    s = ops.sum(ni * ops.take(u, inc.edge), axis=2)  # (I, K)
    s = s * inc.weight[inc.edge].astype(s.dtype)[:, None]
    seg = (inc.node[:, None] * heads + np.arange(heads)[None, :]).ravel()
    a = ops.segment_softmax(ops.reshape(s, (-1,)), seg, nodes.shape[0] * heads)
    return ops.reshape(a, (len(inc.node), heads))


def fuse_edges(nodes: Tensor, edges: Tensor, inc: Incidence, w_r: Tensor, heads: int) -> Tensor:
    """Head-averaged attention-weighted sum of incident edge embeddings, ``(num_nodes, d_e)``.

    Nodes without incident edges of this type get a zero row.
    """
    alpha = attention_weights(nodes, edges, inc, w_r, heads)
    e_inc = ops.take(edges, inc.edge)  # (I, d_e)
    weighted = ops.reshape(alpha, (len(inc.node), heads, 1)) * ops.reshape(e_inc, (len(inc.node), 1, edges.shape[1]))
    fused = ops.segment_sum(ops.mean(weighted, axis=1), inc.node, nodes.shape[0])
    return fused


def node_update(nodes: Tensor, fused: dict[str, Tensor], multi_source: Tensor, layer: GraphLayer) -> Tensor:
    """``n + sum_r fused_r W_1 + n' W_2``."""
    out = nodes + ops.matmul(multi_source, layer.w_2)
    shared = "*" in layer.w_1
    if shared and fused:
        total = None
        for f in fused.values():
            total = f if total is None else total + f
        out = out + ops.matmul(total, layer.w_1["*"])
    else:
        for r, f in fused.items():
            out = out + ops.matmul(f, layer.w1_for(r))
    return out


def graph_layer(nodes: Tensor, inc: dict[str, Incidence], multi_source: Tensor, layer: GraphLayer) -> Tensor:
    if nodes.shape[1] != layer.d_n or multi_source.shape[0] != nodes.shape[0]:
        raise DimensionError(f"graph_layer: nodes {nodes.shape}, multi-source {multi_source.shape}")
    fused = {}
    for r, ic in inc.items():
        if ic.num_edges == 0 or len(ic.node) == 0:
            continue
        if r not in layer.w_r:
            raise GraphIntegrityError(f"no attention weights for edge type {r!r}")
        edges = edge_embed(nodes, ic.ends, layer.w_agg)
        fused[r] = fuse_edges(nodes, edges, ic, layer.w_r[r], layer.heads)
    return node_update(nodes, fused, multi_source, layer)


def run_graph(graph: HeteroGraph, node_emb: Tensor, multi_source: Tensor, params: GraphParams,
              inc: dict[str, Incidence] | None = None, dropout_rate: float = 0.0,
              training: bool = False, rng=None) -> NodeReps:
    """Stack the graph layers; ``multi_source`` rows are ``[P_i ...; q_tilde ...]``."""
    if inc is None:
        inc = incidences(graph)
    if node_emb.shape[0] != graph.num_nodes or multi_source.shape[0] != graph.num_nodes:
        raise DimensionError("node tables and graph disagree in size")
    h = node_emb
    for layer in params.layers:
        ms = dropout(multi_source, dropout_rate, training, rng)
        h = graph_layer(h, inc, ms, layer)
    P = graph.num_pois
    return NodeReps(ops.take(h, np.arange(P)), ops.take(h, np.arange(P, graph.num_nodes)))
