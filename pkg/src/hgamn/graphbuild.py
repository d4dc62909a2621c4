"""Heterogeneous POI/Query graph from search sessions.

POI-POI edges carry PMI weights over 2-gram windows of each session's click
sequence; POI-Query edges link every POI to its most frequent queries with
frequency-normalised weights.
"""
from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .datamodel import Dataset, Session, normalize_query
from .numerics import load_container, rng_stream, save_container, uniform_init
from .numerics.container import ContainerError

GRAPH_KIND = "hgamn-graph"
GRAPH_VERSION = 1


class EmptyCorpusError(ValueError):
    pass


@dataclass
class CooccurrenceCounts:
    total: int = 0
    single: Counter = field(default_factory=Counter)
    pair: Counter = field(default_factory=Counter)  # keys are sorted (a, b), a != b

    def merge(self, other: "CooccurrenceCounts") -> "CooccurrenceCounts":
        return CooccurrenceCounts(self.total + other.total, self.single + other.single, self.pair + other.pair)


def _click_sequences(sessions) -> Iterable[list]:
    for s in sessions:
        yield s.clicked_pois if isinstance(s, Session) else list(s)


def count_windows(sessions, multiplicity: bool = False) -> CooccurrenceCounts:
    """Width-2, stride-1 windows over each click sequence.

    A window ``[A, A]`` counts once toward ``#W(A)`` (or twice with
    ``multiplicity``) and never toward a pair.
    """
    counts = CooccurrenceCounts()
    for seq in _click_sequences(sessions):
        for a, b in zip(seq, seq[1:]):
            counts.total += 1
            if a == b:
                counts.single[a] += 2 if multiplicity else 1
            else:
                counts.single[a] += 1
                counts.single[b] += 1
                counts.pair[(a, b) if a < b else (b, a)] += 1
    return counts


def pmi_edges(counts: CooccurrenceCounts, keep_nonpositive: bool = False) -> dict[tuple, float]:
    """``{(a, b): ln(#W(a,b) #W / (#W(a) #W(b)))}`` for co-occurring pairs, a < b."""
    if counts.total <= 0:
        raise EmptyCorpusError("no sliding windows: PMI is undefined")
    W = counts.total
    edges = {}
    for (a, b), n_ab in sorted(counts.pair.items()):
        w = math.log((n_ab / W) / ((counts.single[a] / W) * (counts.single[b] / W)))
        if keep_nonpositive or w > 0:
            edges[(a, b)] = w
    return edges


def query_pair_counts(sessions) -> Counter:
    """Frequency of (normalized query, clicked POI) pairs."""
    c: Counter = Counter()
    for s in sessions:
        for r in s.records:
            if r.clicked_poi_id is not None:
                c[(normalize_query(r.query_text), r.clicked_poi_id)] += 1
    return c


def query_edges(sessions, k: int = 4) -> tuple[list[str], dict[str, list[tuple[str, float]]]]:
    """Top-``k`` queries per POI (ties: lexicographic) with weights summing to 1.

    Returns the sorted list of linked query strings and, per POI, its
    ``(query, weight)`` list ordered by weight desc then query asc.
    """
    per_poi: dict[str, list[tuple[str, int]]] = defaultdict(list)
    for (q, poi), n in query_pair_counts(sessions).items():
        per_poi[poi].append((q, n))
    out = {}
    nodes: set[str] = set()
    for poi in sorted(per_poi):
        kept = sorted(per_poi[poi], key=lambda qn: (-qn[1], qn[0]))[:k]
        total = sum(n for _, n in kept)
        out[poi] = [(q, n / total) for q, n in kept]
        nodes.update(q for q, _ in kept)
    return sorted(nodes), out


@dataclass
class HeteroGraph:
    poi_ids: list[str]
    query_texts: list[str]
    query_locs: np.ndarray  # (|Q|, 2) lat, lon
    app_src: np.ndarray  # POI index, src < dst
    app_dst: np.ndarray
    app_w: np.ndarray
    apq_poi: np.ndarray  # POI index
    apq_query: np.ndarray  # query index
    apq_w: np.ndarray
    node_emb: np.ndarray  # (|P| + |Q|, d_n); POIs first
    config: dict = field(default_factory=dict)
    seed: int = 0

    @property
    def num_pois(self) -> int:
        return len(self.poi_ids)

    @property
    def num_queries(self) -> int:
        return len(self.query_texts)

    @property
    def num_nodes(self) -> int:
        return self.num_pois + self.num_queries

    def poi_index(self) -> dict[str, int]:
        return {p: i for i, p in enumerate(self.poi_ids)}

    def top_queries(self) -> list[list[int]]:
        """Per POI, linked query indices in stored (weight-desc) order."""
        out: list[list[int]] = [[] for _ in self.poi_ids]
        for p, q in zip(self.apq_poi, self.apq_query):
            out[int(p)].append(int(q))
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "query_locs": self.query_locs,
            "app_src": self.app_src,
            "app_dst": self.app_dst,
            "app_w": self.app_w,
            "apq_poi": self.apq_poi,
            "apq_query": self.apq_query,
            "apq_w": self.apq_w,
            "node_emb": self.node_emb,
        }

    def equals(self, other: "HeteroGraph") -> bool:
        if (self.poi_ids, self.query_texts, self.config, self.seed) != (
            other.poi_ids, other.query_texts, other.config, other.seed
        ):
            return False
        a, b = self.arrays(), other.arrays()
        return all(a[k].dtype == b[k].dtype and a[k].shape == b[k].shape
                   and a[k].tobytes() == b[k].tobytes() for k in a)

    def without(self, app: bool = False, apq: bool = False) -> "HeteroGraph":
        """Copy with one or both edge types removed (ablations)."""
        empty_i = np.zeros(0, dtype=np.int64)
        empty_w = np.zeros(0, dtype=np.float64)
        return HeteroGraph(
            self.poi_ids, self.query_texts, self.query_locs,
            empty_i if app else self.app_src, empty_i if app else self.app_dst, empty_w if app else self.app_w,
            empty_i if apq else self.apq_poi, empty_i if apq else self.apq_query, empty_w if apq else self.apq_w,
            self.node_emb, dict(self.config), self.seed,
        )


def build_graph(dataset: Dataset, d_n: int = 128, top_k: int = 4, seed: int = 0,
                keep_nonpositive_pmi: bool = False, window_multiplicity: bool = False) -> HeteroGraph:
    """Graph over every catalog POI plus the linked historical queries of ``dataset``.

    Pass the training split only. Node embeddings are drawn from
    U(-1/sqrt(d_n), 1/sqrt(d_n)) with a stream derived from ``seed``.
    """
    poi_ids = list(dataset.catalog)
    pidx = {p: i for i, p in enumerate(poi_ids)}

    counts = count_windows(dataset.sessions, multiplicity=window_multiplicity)
    app = pmi_edges(counts, keep_nonpositive_pmi) if counts.total else {}
    app_src = np.array([pidx[a] for a, _ in app], dtype=np.int64)
    app_dst = np.array([pidx[b] for _, b in app], dtype=np.int64)
    swap = app_src > app_dst
    app_src[swap], app_dst[swap] = app_dst[swap], app_src[swap].copy()
    app_w = np.array(list(app.values()), dtype=np.float64)
    order = np.lexsort((app_dst, app_src))
    app_src, app_dst, app_w = app_src[order], app_dst[order], app_w[order]

    queries, per_poi = query_edges(dataset.sessions, top_k)
    qidx = {q: i for i, q in enumerate(queries)}
    apq_poi, apq_query, apq_w = [], [], []
    for poi in poi_ids:
        for q, w in per_poi.get(poi, []):
            apq_poi.append(pidx[poi])
            apq_query.append(qidx[q])
            apq_w.append(w)

    locs: dict[str, list[tuple[float, float]]] = defaultdict(list)
    for r in dataset.clicked_records():
        q = normalize_query(r.query_text)
        if q in qidx:
            locs[q].append((r.user_lat, r.user_lon))
    query_locs = np.array([np.median(np.array(locs[q]), axis=0) for q in queries],
                          dtype=np.float64).reshape(-1, 2)

    n_nodes = len(poi_ids) + len(queries)
    node_emb = uniform_init(rng_stream(seed, "graph", "node_emb"), (n_nodes, d_n),
                            1.0 / np.sqrt(d_n), dtype=np.float64)
    config = {"d_n": d_n, "top_k": top_k, "keep_nonpositive_pmi": keep_nonpositive_pmi,
              "window_multiplicity": window_multiplicity}
    return HeteroGraph(poi_ids, queries, query_locs, app_src, app_dst, app_w,
                       np.array(apq_poi, dtype=np.int64), np.array(apq_query, dtype=np.int64),
                       np.array(apq_w, dtype=np.float64), node_emb, config, seed)


def save_graph(graph: HeteroGraph, path) -> None:
    meta = {"poi_ids": graph.poi_ids, "query_texts": graph.query_texts, "config": graph.config, "seed": graph.seed}
    save_container(path, graph.arrays(), meta, GRAPH_KIND, GRAPH_VERSION)


def load_graph(path) -> HeteroGraph:
    arrays, meta = load_container(path, GRAPH_KIND, GRAPH_VERSION)
    try:
        g = HeteroGraph(meta["poi_ids"], meta["query_texts"], config=meta["config"], seed=meta["seed"], **arrays)
    except (KeyError, TypeError) as exc:
        raise ContainerError(f"{path}: incomplete graph container ({exc})") from None
    if g.node_emb.shape[0] != g.num_nodes or g.query_locs.shape[0] != g.num_queries:
        raise ContainerError(f"{path}: node tables disagree with array sizes")
    return g
