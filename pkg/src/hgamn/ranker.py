"""Query-conditioned POI scoring, the full model, and in-batch training."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .datamodel import PoiRecord, SearchRecord
from .geocode import LocationEncoder
from .graphbuild import HeteroGraph
from .hgl import EDGE_TYPES, GraphParams, NodeReps, incidences, run_graph
from .numerics import (
    AdamState,
    ParamStore,
    Tape,
    Tensor,
    adam_step,
    dropout,
    linear_decay,
    load_container,
    ops,
    precision,
    rng_stream,
    save_container,
    uniform_init,
)
from .textenc import CharVocab, TextEncoder, make_poi_reps, make_query_reps

MODEL_KIND = "hgamn-model"
MODEL_VERSION = 1
VARIANTS = ("full", "no_pp", "no_pq", "no_graph")


class BatchError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d: int = 128
    d_c: int = 64
    d_n: int = 128
    widths: tuple[int, ...] = (128, 256)
    heads: int = 4
    max_len: int = 30
    top_k: int = 4
    geohash_precision: int = 10
    backward_state: str = "terminal"
    dropout: float = 0.5
    variant: str = "full"
    score_mode: str = "full"  # "full": ranker head on every pair; "dot": q . m
    per_type_w1: bool = False
    masked_attention: bool = False
    dtype: str = "float32"
    seed: int = 0

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.score_mode not in ("full", "dot"):
            raise ValueError("score_mode must be 'full' or 'dot'")
        if self.d != self.d_n:
            raise ValueError("query/POI size d must equal the node size d_n (residual sums)")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    def to_json(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


@dataclass
class RankerParams:
    w3q: Tensor  # (d_n, K*d_n): query half of W_3
    w3m: Tensor  # (d_n, K*d_n): memory-row half of W_3
    b: Tensor  # (K*d_n,)
    w4: Tensor  # (K, d_n)
    wv: Tensor | None  # (2*d_n, 2); absent for dot-product scoring
    heads: int

    @classmethod
    def create(cls, store: ParamStore, rng, d_n: int = 128, heads: int = 4, prefix: str = "ranker",
               with_head: bool = True) -> "RankerParams":
        fan = 2 * d_n
        bound = 1.0 / math.sqrt(fan)
        return cls(
            w3q=store.add(f"{prefix}.w3q", uniform_init(rng, (d_n, heads * d_n), bound)),
            w3m=store.add(f"{prefix}.w3m", uniform_init(rng, (d_n, heads * d_n), bound)),
            b=store.add(f"{prefix}.b", uniform_init(rng, (heads * d_n,), bound)),
            w4=store.add(f"{prefix}.w4", uniform_init(rng, (heads, d_n), 1.0 / math.sqrt(d_n))),
            wv=store.add(f"{prefix}.wv", uniform_init(rng, (fan, 2), bound)) if with_head else None,
            heads=heads,
        )


def fuse_weights(q: Tensor, M: Tensor, mask: np.ndarray, p: RankerParams) -> Tensor:
    """Attention over memory rows, averaged over heads.

    ``q`` is ``(..., d)`` and ``M`` is ``(..., R, d)``; leading axes broadcast.
    ``s_k = W_4 tanh([q; M_k] W_3 + b)`` per head, softmax over valid rows.
    Returns ``(..., R)``.
    """
    d = q.shape[-1]
    K = p.heads
    a = ops.matmul(q, p.w3q)
    a = ops.reshape(a, q.shape[:-1] + (1, K, d))
    c = ops.add(ops.matmul(M, p.w3m), p.b)
    c = ops.reshape(c, M.shape[:-1] + (K, d))
    s = ops.sum(ops.tanh(a + c) * p.w4, axis=-1)  # (..., R, K)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ValueError("fuse: memory without any valid row")
    phi = ops.softmax(s, mask=mask[..., None], axis=-2)
    return ops.mean(phi, axis=-1)


def fuse(q: Tensor, M: Tensor, mask: np.ndarray, p: RankerParams) -> Tensor:
    """Fused POI representation ``m = sum_k phi_k M_k``, shape ``(..., d)``."""
    phi = fuse_weights(q, M, mask, p)
    return ops.sum(ops.reshape(phi, phi.shape + (1,)) * M, axis=-2)


def class_logits(q: Tensor, m: Tensor, p: RankerParams) -> Tensor:
    """``[q; m] W_v`` with ``q`` broadcast against ``m``; shape ``(..., 2)``."""
    d = m.shape[-1]
    wq = ops.take(p.wv, np.arange(d))
    wm = ops.take(p.wv, np.arange(d, 2 * d))
    return ops.matmul(q, wq) + ops.matmul(m, wm)


def relevance_logit(q: Tensor, m: Tensor, p: RankerParams) -> Tensor:
    """log(P(c=1) / P(c=0)), the log-odds of the class-1 probability."""
    lg = class_logits(q, m, p)
    return ops.reshape(ops.matmul(lg, _diff_col(lg)), lg.shape[:-1])


def _diff_col(like: Tensor) -> Tensor:
    return Tensor(np.array([[-1.0], [1.0]], dtype=like.dtype), dtype=like.dtype)


def score(q: Tensor, m: Tensor, p: RankerParams) -> Tensor:
    """Class-1 probability of the two-way softmax."""
    return ops.softmax(class_logits(q, m, p), axis=-1).data[..., 1]


@dataclass
class ScoredCandidate:
    poi_id: str
    score: float
    logit: float
    rank: int = 0
    feature_vector: list[float] | None = None


@dataclass
class StepResult:
    loss: float
    positives: int
    negatives: int
    batch_size: int


class HGAMN:
    """Encoders + graph layers + ranker head, with parameters in one store."""

    def __init__(self, config: ModelConfig, vocab: CharVocab, graph: HeteroGraph, catalog: dict[str, PoiRecord]):
        config.validate()
        self.config = config
        self.vocab = vocab
        self.graph = graph
        missing = [p for p in graph.poi_ids if p not in catalog]
        if missing:
            raise KeyError(f"graph POIs missing from catalog: {missing[:5]}")
        self.pois = [catalog[p] for p in graph.poi_ids]
        self.poi_pos = graph.poi_index()
        self.store = ParamStore()
        rng = rng_stream(config.seed, "init")
        with precision(config.dtype):
            self.text = TextEncoder.create(self.store, rng, vocab, config.d, config.d_c, max_len=config.max_len)
            self.geo = LocationEncoder.create(self.store, rng, config.d, config.d_c,
                                              precision=config.geohash_precision,
                                              backward_state=config.backward_state)
            self.edge_graph = graph
            if config.variant == "no_pp":
                self.edge_graph = graph.without(app=True)
            elif config.variant == "no_pq":
                self.edge_graph = graph.without(apq=True)
            self.node_emb = None
            self.gparams = None
            if config.variant != "no_graph":
                eg = self.edge_graph
                present = {"pp": len(eg.app_w) > 0, "pq": len(eg.apq_w) > 0}
                types = [r for r in EDGE_TYPES if present[r]]
                self.node_emb = self.store.add("graph.node_emb", graph.node_emb.astype(config.dtype))
                self.gparams = GraphParams.create(self.store, rng, config.d, config.d_n, config.widths,
                                                  config.heads, types, config.per_type_w1)
            self.ranker = RankerParams.create(self.store, rng, config.d_n, config.heads,
                                              with_head=config.score_mode == "full")
        self.incidence = incidences(self.edge_graph, config.masked_attention)
        self._memory_index()
        self._poi_symbols = [self.text.poi_symbols(p) for p in self.pois]
        self._cache: NodeReps | None = None

    # -- structure ------------------------------------------------------
    def _memory_index(self) -> None:
        """Row indices of ``[P_i, top-k queries]`` into ``concat(P, Q, zero)``."""
        P, Q, k = self.graph.num_pois, self.graph.num_queries, self.config.top_k
        tq = self.graph.top_queries()
        idx = np.full((P, 1 + k), P + Q, dtype=np.int64)
        mask = np.zeros((P, 1 + k), dtype=bool)
        idx[:, 0] = np.arange(P)
        mask[:, 0] = True
        for i, qs in enumerate(tq):
            qs = qs[:k]
            idx[i, 1:1 + len(qs)] = P + np.asarray(qs, dtype=np.int64)
            mask[i, 1:1 + len(qs)] = True
        self.mem_idx, self.mem_mask = idx, mask

    def fingerprint(self) -> str:
        return config_fingerprint(self.config.to_json(), graph_fingerprint(self.graph))

    # -- forward --------------------------------------------------------
    def multi_source(self) -> tuple[Tensor, Tensor]:
        """``P_i`` for every graph POI and ``q_tilde`` for every query node."""
        P_ms = self.text.encode_symbols(self._poi_symbols) + self.geo.encode_many([(p.lat, p.lon) for p in self.pois])
        g = self.graph
        if g.num_queries:
            Q_ms = make_query_reps(g.query_texts, [tuple(x) for x in g.query_locs], self.text, self.geo)
        else:
            Q_ms = ops.zeros((0, self.config.d))
        return P_ms, Q_ms

    def node_reps(self, training: bool = False, rng=None) -> NodeReps:
        P_ms, Q_ms = self.multi_source()
        if self.config.variant == "no_graph":
            if training:
                P_ms = dropout(P_ms, self.config.dropout, True, rng)
                Q_ms = dropout(Q_ms, self.config.dropout, True, rng)
            return NodeReps(P_ms, Q_ms)
        ms = ops.concat([P_ms, Q_ms], axis=0)
        return run_graph(self.edge_graph, self.node_emb, ms, self.gparams, self.incidence,
                         self.config.dropout, training, rng)

    def memory(self, reps: NodeReps, poi_rows: np.ndarray) -> tuple[Tensor, np.ndarray]:
        """Stacked ``[P~_i; Q~_{P_i}]`` for the given POI rows, plus validity mask."""
        zero = ops.zeros((1, self.config.d_n), dtype=reps.P_tilde.dtype)
        table = ops.concat([reps.P_tilde, reps.Q_tilde, zero], axis=0)
        idx = self.mem_idx[poi_rows]
        return ops.take(table, idx), self.mem_mask[poi_rows]

    def query_reps(self, records: Sequence[SearchRecord]) -> Tensor:
        return make_query_reps([r.query_text for r in records], [(r.user_lat, r.user_lon) for r in records],
                               self.text, self.geo)

    def pair_logits(self, q: Tensor, M: Tensor, mask: np.ndarray) -> tuple[Tensor, Tensor]:
        """Relevance log-odds (and fused ``m``) with ``q`` broadcast against ``M``."""
        m = fuse(q, M, mask, self.ranker)
        if self.config.score_mode == "dot":
            return ops.sum(q * m, axis=-1), m
        return relevance_logit(q, m, self.ranker), m

    def batch_logits(self, records: Sequence[SearchRecord], poi_rows: np.ndarray,
                     training: bool = False, rng=None) -> Tensor:
        """``S[m, n]`` = relevance log-odds of query ``m`` against POI ``n``."""
        reps = self.node_reps(training, rng)
        M, mask = self.memory(reps, poi_rows)
        q = self.query_reps(records)
        B, N = len(records), len(poi_rows)
        q4 = ops.reshape(q, (B, 1, self.config.d))
        M4 = ops.reshape(M, (1, N) + M.shape[1:])
        logits, _ = self.pair_logits(q4, M4, mask[None])
        return logits

    # -- inference ------------------------------------------------------
    def invalidate(self) -> None:
        self._cache = None

    def inference_reps(self) -> NodeReps:
        if self._cache is None:
            with precision(self.config.dtype):
                self._cache = self.node_reps(training=False)
        return self._cache

    def score_candidates(self, records: Sequence[SearchRecord], candidates: Sequence[Sequence[str]],
                         with_features: bool = False):
        """Per record: (logits, probabilities[, features]) over its candidate list."""
        reps = self.inference_reps()
        out = []
        if not records:
            return out
        q_all = self.query_reps(records)
        for i, cands in enumerate(candidates):
            if len(cands) == 0:
                out.append((np.zeros(0), np.zeros(0), None))
                continue
            rows = np.array([self._row(c) for c in cands], dtype=np.int64)
            M, mask = self.memory(reps, rows)
            q = ops.reshape(ops.take(q_all, [i]), (1, self.config.d))
            logits, m = self.pair_logits(q, M, mask)
            lg = logits.data.astype(np.float64)
            if self.config.score_mode == "dot":
                prob = 1.0 / (1.0 + np.exp(-lg))
            else:
                prob = score(q, m, self.ranker).astype(np.float64)
            feats = None
            if with_features:
                qd = np.broadcast_to(q.data, m.shape)
                feats = np.concatenate([qd, m.data], axis=1)
            out.append((lg, prob, feats))
        return out

    def _row(self, poi_id: str) -> int:
        try:
            return self.poi_pos[poi_id]
        except KeyError:
            raise LookupError(f"unknown poi_id {poi_id!r}") from None


def rank(query: SearchRecord, candidates: Sequence[str], model: HGAMN, with_features: bool = False) -> list[ScoredCandidate]:
    """Candidates sorted by relevance (desc), ties by poi_id (asc)."""
    if not candidates:
        return []
    ((lg, prob, feats),) = model.score_candidates([query], [list(candidates)], with_features)
    items = [
        ScoredCandidate(c, float(prob[i]), float(lg[i]), 0,
                        None if feats is None else feats[i].astype(float).tolist())
        for i, c in enumerate(candidates)
    ]
    items.sort(key=lambda s: (-s.logit, s.poi_id))
    for r, it in enumerate(items, 1):
        it.rank = r
    return items


def rank_many(records: Sequence[SearchRecord], candidates: Sequence[Sequence[str]], model: HGAMN,
              chunk: int = 256) -> list[list[ScoredCandidate]]:
    out = []
    for start in range(0, len(records), chunk):
        recs = records[start:start + chunk]
        cands = candidates[start:start + chunk]
        for (lg, prob, _), cs in zip(model.score_candidates(recs, cands), cands):
            items = [ScoredCandidate(c, float(prob[i]), float(lg[i])) for i, c in enumerate(cs)]
            items.sort(key=lambda s: (-s.logit, s.poi_id))
            for r, it in enumerate(items, 1):
                it.rank = r
            out.append(items)
    return out


def export_features(query: SearchRecord, poi_id: str, model: HGAMN, query_id: str | None = None,
                    with_vector: bool = False) -> str:
    """One JSON line ``{query_id, poi_id, probability[, features]}`` for an external LTR model."""
    ((lg, prob, feats),) = model.score_candidates([query], [[poi_id]], with_vector)
    if query_id is None:
        key = f"{query.user_id}|{query.timestamp}|{query.query_text}"
        query_id = hashlib.sha256(key.encode("utf-8")).hexdigest()[:16]
    rec = {"query_id": query_id, "poi_id": poi_id, "probability": float(prob[0])}
    if with_vector:
        rec["features"] = feats[0].astype(float).tolist()
    return json.dumps(rec, ensure_ascii=False, sort_keys=True)


# -- training -----------------------------------------------------------------

def train_step(model: HGAMN, batch: Sequence[SearchRecord], state: AdamState, rng=None) -> StepResult:
    """One in-batch-negatives update.

    Row ``m`` of the ``B x B`` logit matrix scores query ``m`` against every
    positive POI of the batch; the diagonal is the target of a row-wise
    softmax cross-entropy.
    """
    B = len(batch)
    if B < 2:
        raise BatchError("in-batch training needs at least two pairs")
    positives = [r.clicked_poi_id for r in batch]
    if any(p is None for p in positives):
        raise BatchError("every training record needs a clicked POI")
    if len(set(positives)) != B:
        raise BatchError("positive POIs must be distinct within a batch")
    rows = np.array([model._row(p) for p in positives], dtype=np.int64)
    labels = np.eye(B, dtype=bool)
    model.invalidate()
    with precision(model.config.dtype):
        with Tape() as tape:
            S = model.batch_logits(batch, rows, training=True, rng=rng)
            if S.shape != (B, B):
                raise BatchError(f"score matrix has shape {S.shape}, expected {(B, B)}")
            loss = ops.cross_entropy(S, np.argmax(labels, axis=1))
        model.store.zero_grad()
        tape.backward(loss)
        adam_step(model.store, state)
    return StepResult(float(loss.data), int(labels.sum()), int((~labels).sum()), B)


def batch_loss(model: HGAMN, batch: Sequence[SearchRecord], training: bool = False, rng=None) -> Tensor:
    """Differentiable in-batch loss (no update); used for gradient checks."""
    rows = np.array([model._row(r.clicked_poi_id) for r in batch], dtype=np.int64)
    S = model.batch_logits(batch, rows, training=training, rng=rng)
    return ops.cross_entropy(S, np.arange(len(batch)))


def epoch_batches(records: Sequence[SearchRecord], batch_size: int, rng,
                  carry: list[int] | None = None, max_passes: int = 50) -> tuple[list[list[int]], list[int]]:
    """Split a shuffled epoch into batches with distinct positive POIs.

    Pairs whose POI already occurs in a batch are retried in later batches
    of the epoch; what cannot be placed is returned as carry-over and goes
    first in the next epoch. Raises when not even two distinct POIs exist.
    """
    n = len(records)
    distinct = len({r.clicked_poi_id for r in records})
    if distinct < 2:
        raise BatchError("fewer than two distinct positive POIs; in-batch training impossible")
    order = list(carry or []) + [int(i) for i in rng.permutation(n) if int(i) not in set(carry or [])]
    n_batches = max(1, math.ceil(n / batch_size))
    pending = order
    batches = []
    for _ in range(n_batches):
        seen: set[str] = set()
        batch, rest = [], []
        for i in pending:
            poi = records[i].clicked_poi_id
            if len(batch) < batch_size and poi not in seen:
                seen.add(poi)
                batch.append(i)
            else:
                rest.append(i)
        pending = rest
        if len(batch) >= 2:
            batches.append(batch)
        if not pending:
            break
    return batches, pending


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 40
    lr: float = 1e-3
    lr_floor: float = 0.0
    seed: int = 0


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    epoch_loss: list[float] = field(default_factory=list)
    steps: int = 0


def train_model(model: HGAMN, records: Sequence[SearchRecord], cfg: TrainConfig,
                callback: Callable[[int, float, HGAMN], None] | None = None) -> TrainLog:
    """Adam with linearly decaying learning rate over ``cfg.epochs`` epochs."""
    records = [r for r in records if r.clicked_poi_id is not None]
    batch_rng = rng_stream(cfg.seed, "batches")
    drop_rng = rng_stream(cfg.seed, "dropout")
    steps_per_epoch = max(1, math.ceil(len(records) / cfg.batch_size))
    total = steps_per_epoch * cfg.epochs
    state = AdamState(lr=cfg.lr)
    log = TrainLog()
    carry: list[int] = []
    for epoch in range(cfg.epochs):
        batches, carry = epoch_batches(records, cfg.batch_size, batch_rng, carry)
        ep = []
        for b in batches:
            state.lr = linear_decay(cfg.lr, log.steps, total, cfg.lr_floor)
            res = train_step(model, [records[i] for i in b], state, drop_rng)
            log.losses.append(res.loss)
            ep.append(res.loss)
            log.steps += 1
        log.epoch_loss.append(float(np.mean(ep)) if ep else float("nan"))
        if callback is not None:
            callback(epoch, log.epoch_loss[-1], model)
    model.invalidate()
    return log


# -- persistence --------------------------------------------------------------

def graph_fingerprint(graph: HeteroGraph) -> str:
    h = hashlib.sha256()
    h.update(json.dumps({"pois": graph.poi_ids, "queries": graph.query_texts, "config": graph.config,
                         "seed": graph.seed}, sort_keys=True, ensure_ascii=False).encode("utf-8"))
    for k, v in graph.arrays().items():
        h.update(k.encode())
        h.update(np.ascontiguousarray(v).tobytes())
    return h.hexdigest()


def config_fingerprint(config: dict, graph_fp: str) -> str:
    blob = json.dumps({"config": config, "graph": graph_fp}, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


class FingerprintError(ValueError):
    pass


def save_model(model: HGAMN, path, extra_meta: dict | None = None) -> None:
    meta = {
        "config": model.config.to_json(),
        "vocab": model.vocab.to_json(),
        "graph_fingerprint": graph_fingerprint(model.graph),
        "fingerprint": model.fingerprint(),
    }
    if extra_meta:
        meta.update(extra_meta)
    save_container(path, model.store.state_dict(), meta, MODEL_KIND, MODEL_VERSION)


def load_model(path, graph: HeteroGraph, catalog: dict[str, PoiRecord]) -> HGAMN:
    arrays, meta = load_container(path, MODEL_KIND, MODEL_VERSION)
    if meta.get("graph_fingerprint") != graph_fingerprint(graph):
        raise FingerprintError(f"{path}: checkpoint was trained on a different graph")
    cfg = ModelConfig.from_json(meta["config"])
    model = HGAMN(cfg, CharVocab.from_json(meta["vocab"]), graph, catalog)
    model.store.load_state_dict(arrays)
    return model
