"""Offline ranking metrics, baseline scorers and the ablation runner."""
from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .datamodel import DataValidationError, Dataset, PoiRecord, SearchRecord, normalize_query
from .graphbuild import HeteroGraph, build_graph
from .ranker import VARIANTS, HGAMN, ModelConfig, TrainConfig, rank_many, train_model
from .textenc import CharVocab, build_vocab

METRIC_NAMES = ("MRR", "nDCG@1", "nDCG@3", "nDCG@10", "SR@1", "SR@3", "SR@10")
DEFAULT_KS = (1, 3, 10)


# -- metrics ------------------------------------------------------------------

def ground_truth_ranks(ranked: Sequence[Sequence[str]], truth: Sequence[str | None]) -> list[int | None]:
    """1-based rank of each ground-truth item, ``None`` when it is not in the list."""
    if len(ranked) != len(truth):
        raise DataValidationError(f"{len(ranked)} ranked lists but {len(truth)} ground-truth labels")
    out = []
    for i, (lst, gt) in enumerate(zip(ranked, truth)):
        if gt is None:
            raise DataValidationError(f"query {i}: ranked list has no ground-truth annotation")
        if len(lst) == 0:
            raise DataValidationError(f"query {i}: empty ranked list")
        lst = list(lst)
        out.append(lst.index(gt) + 1 if gt in lst else None)
    return out


def metrics_from_ranks(ranks: Sequence[int | None], ks: Sequence[int] = DEFAULT_KS) -> dict[str, float]:
    """MRR, nDCG@K and SR@K under a single binary-relevant item per query.

    An absent ground truth contributes 0 to every metric.
    """
    n = len(ranks)
    if n == 0:
        raise DataValidationError("no queries to evaluate")
    rr = [0.0 if r is None else 1.0 / r for r in ranks]
    out = {"MRR": math.fsum(rr) / n}
    for k in ks:
        gains = [0.0 if r is None or r > k else 1.0 / math.log2(r + 1) for r in ranks]
        out[f"nDCG@{k}"] = math.fsum(gains) / n
    for k in ks:
        out[f"SR@{k}"] = sum(1 for r in ranks if r is not None and r <= k) / n
    return out


def metric_suite(ranked: Sequence[Sequence[str]], truth: Sequence[str | None],
                 ks: Sequence[int] = DEFAULT_KS) -> dict[str, float]:
    return metrics_from_ranks(ground_truth_ranks(ranked, truth), ks)


@dataclass
class EvalReport:
    models: dict[str, dict[str, float]] = field(default_factory=dict)
    num_queries: int = 0
    fingerprint: str = ""
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"models": self.models, "num_queries": self.num_queries,
                "fingerprint": self.fingerprint, **({"extra": self.extra} if self.extra else {})}

    def table(self, metrics: Sequence[str] = METRIC_NAMES) -> str:
        width = max([len("model")] + [len(m) for m in self.models])
        lines = ["  ".join(["model".ljust(width)] + [m.rjust(8) for m in metrics])]
        for name, vals in self.models.items():
            lines.append("  ".join([name.ljust(width)] + [f"{vals.get(m, float('nan')):8.4f}" for m in metrics]))
        return "\n".join(lines)


def write_report(report: EvalReport, path) -> None:
    """Atomic write of ``report.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        json.dump(report.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


# -- scorers ------------------------------------------------------------------

class Scorer(Protocol):
    name: str

    def score(self, records: Sequence[SearchRecord], candidates: Sequence[Sequence[str]]) -> list[np.ndarray]:
        ...


def _grams(text: str, n: int) -> Counter:
    t = f" {text} "
    return Counter(t[i:i + n] for i in range(len(t) - n + 1))


def lexical_score(query: str, poi: PoiRecord, n: int = 2) -> float:
    """Fraction of the query's character n-grams found in name + address (multiset overlap)."""
    q = _grams(normalize_query(query), n)
    total = sum(q.values())
    if total == 0:
        return 0.0
    doc = _grams(normalize_query(f"{poi.name} {poi.address}"), n)
    return sum(min(c, doc[g]) for g, c in q.items()) / total


def lexical_baseline(query: str, candidates: Sequence[PoiRecord], n: int = 2) -> np.ndarray:
    return np.array([lexical_score(query, p, n) for p in candidates], dtype=np.float64)


class LexicalScorer:
    name = "lexical"

    def __init__(self, catalog: dict[str, PoiRecord], n: int = 2):
        self.catalog = catalog
        self.n = n

    def score(self, records, candidates):
        return [lexical_baseline(r.query_text, [self.catalog[c] for c in cs], self.n)
                for r, cs in zip(records, candidates)]


class ModelScorer:
    """Adapter exposing a trained :class:`HGAMN` through the scorer interface."""

    def __init__(self, model: HGAMN, name: str = "hgamn"):
        self.model = model
        self.name = name

    def score(self, records, candidates):
        return [lg for lg, _, _ in self.model.score_candidates(records, candidates)]


def dual_encoder_config(base: ModelConfig | None = None) -> ModelConfig:
    """Stand-in dual encoder: no graph, memory is the POI row alone, score ``q . P_i``."""
    from dataclasses import replace
    base = base or ModelConfig()
    return replace(base, variant="no_graph", score_mode="dot", top_k=0)


def rank_by_scores(candidates: Sequence[str], scores: np.ndarray) -> list[str]:
    """Score descending, ties by id ascending."""
    order = sorted(range(len(candidates)), key=lambda i: (-float(scores[i]), candidates[i]))
    return [candidates[i] for i in order]


def candidate_lists(records: Sequence[SearchRecord], catalog: dict[str, PoiRecord],
                    prefilter_n: int = 10) -> list[list[str]]:
    """Logged shown lists when present, else the lexical top-``prefilter_n`` of the catalog."""
    out = []
    pois = list(catalog.values())
    for r in records:
        if r.shown_poi_ids:
            out.append(list(r.shown_poi_ids))
        else:
            s = lexical_baseline(r.query_text, pois)
            out.append(rank_by_scores([p.poi_id for p in pois], s)[:prefilter_n])
    return out


def evaluate(scorer, records: Sequence[SearchRecord], catalog: dict[str, PoiRecord],
             ks: Sequence[int] = DEFAULT_KS, prefilter_n: int = 10) -> dict[str, float]:
    records = [r for r in records if r.clicked_poi_id is not None]
    cands = candidate_lists(records, catalog, prefilter_n)
    if isinstance(scorer, ModelScorer):
        ranked = [[s.poi_id for s in lst] for lst in rank_many(records, cands, scorer.model)]
    else:
        ranked = [rank_by_scores(cs, s) for cs, s in zip(cands, scorer.score(records, cands))]
    return metric_suite(ranked, [r.clicked_poi_id for r in records], ks)


def cross_script_records(records: Sequence[SearchRecord], catalog: dict[str, PoiRecord]) -> list[SearchRecord]:
    """Queries sharing no letter with their clicked POI's name (digits and spaces ignored)."""
    out = []
    for r in records:
        if r.clicked_poi_id is None:
            continue
        q = {c for c in normalize_query(r.query_text) if c.isalpha()}
        name = {c for c in normalize_query(catalog[r.clicked_poi_id].name) if c.isalpha()}
        if q and not q & name:
            out.append(r)
    return out


# -- ablations ----------------------------------------------------------------

@dataclass
class AblationResult:
    report: EvalReport
    per_seed: dict[str, list[dict[str, float]]]


def train_variant(train: Dataset, graph: HeteroGraph, vocab: CharVocab, config: ModelConfig,
                  train_cfg: TrainConfig) -> HGAMN:
    model = HGAMN(config, vocab, graph, train.catalog)
    train_model(model, train.clicked_records(), train_cfg)
    return model


def run_ablations(train: Dataset, test: Dataset, variants: Sequence[str] = VARIANTS,
                  model_config: ModelConfig | None = None, train_config: TrainConfig | None = None,
                  seeds: Sequence[int] = (0,), graph: HeteroGraph | None = None,
                  progress=None) -> AblationResult:
    """Train each variant under identical seeds and budgets; average test metrics over seeds.

    Variants differ only in which graph edges are present (or whether the
    graph layers run at all).
    """
    from dataclasses import replace
    model_config = model_config or ModelConfig()
    train_config = train_config or TrainConfig()
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}")
    graph = graph or build_graph(train, d_n=model_config.d_n, top_k=model_config.top_k, seed=model_config.seed)
    vocab = build_vocab(train)
    per_seed: dict[str, list[dict[str, float]]] = {v: [] for v in variants}
    test_recs = test.clicked_records()
    for seed in seeds:
        for v in variants:
            cfg = replace(model_config, variant=v, seed=seed)
            model = train_variant(train, graph, vocab, cfg, replace(train_config, seed=seed))
            m = evaluate(ModelScorer(model, v), test_recs, test.catalog)
            per_seed[v].append(m)
            if progress is not None:
                progress(seed, v, m)
    models = {v: {k: float(np.mean([m[k] for m in per_seed[v]])) for k in METRIC_NAMES} for v in variants}
    fp = hashlib.sha256(json.dumps({"config": model_config.to_json(), "train": train_config.__dict__,
                                    "seeds": list(seeds), "variants": list(variants)},
                                   sort_keys=True).encode()).hexdigest()
    report = EvalReport(models, len(test_recs), fp, {"seeds": list(seeds)})
    return AblationResult(report, per_seed)
