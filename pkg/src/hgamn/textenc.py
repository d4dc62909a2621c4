"""Character vocabulary, the character-level BiGRU text encoder, and assembly
of query / POI multi-source representations (text + location)."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .datamodel import Dataset, PoiRecord, SearchRecord
from .geocode import LocationEncoder
from .numerics import GRUParams, ParamStore, Tensor, gru_sequence, ops, uniform_init

PAD, UNK, SEP = 0, 1, 2
RESERVED = ("[PAD]", "[UNK]", "[SEP]")
MAX_LEN = 30
TOP_QUERIES = 4


class VocabError(ValueError):
    pass


@dataclass(frozen=True)
class CharVocab:
    """Codepoint -> index. Index order: reserved, then frequency desc, codepoint asc."""

    index: dict[str, int]
    freq: dict[str, int]

    def __len__(self) -> int:
        return len(RESERVED) + len(self.index)

    def lookup(self, ch: str) -> int:
        return self.index.get(ch, UNK)

    def encode(self, text: str, max_len: int = MAX_LEN) -> list[int]:
        return [self.lookup(c) for c in text[:max_len]]

    def to_json(self) -> str:
        rows = [{"codepoint": ord(c), "index": i, "frequency": self.freq[c]} for c, i in self.index.items()]
        return json.dumps({"reserved": list(RESERVED), "chars": rows}, ensure_ascii=False, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "CharVocab":
        obj = json.loads(text)
        if obj.get("reserved") != list(RESERVED):
            raise VocabError("vocab file has unexpected reserved symbols")
        index = {chr(r["codepoint"]): int(r["index"]) for r in obj["chars"]}
        freq = {chr(r["codepoint"]): int(r["frequency"]) for r in obj["chars"]}
        return cls(index, freq)


def vocab_corpus(dataset: Dataset) -> list[str]:
    """Texts a vocabulary is built from: POI names/addresses and clicked queries."""
    texts = []
    for p in dataset.catalog.values():
        texts += [p.name, p.address]
    texts += [r.query_text for r in dataset.records()]
    return texts


def build_vocab(texts: Iterable[str] | Dataset, min_freq: int = 1, max_size: int | None = None) -> CharVocab:
    if isinstance(texts, Dataset):
        texts = vocab_corpus(texts)
    counts: Counter[str] = Counter()
    for t in texts:
        counts.update(t)
    if not counts:
        raise VocabError("cannot build a vocabulary from an empty corpus")
    items = sorted(((c, n) for c, n in counts.items() if n >= min_freq), key=lambda cn: (-cn[1], ord(cn[0])))
    if max_size is not None:
        items = items[: max(0, max_size - len(RESERVED))]
    index = {c: len(RESERVED) + i for i, (c, _) in enumerate(items)}
    return CharVocab(index, {c: n for c, n in items})


def _pack(seqs: Sequence[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad index lists into ``(N, T)`` plus a validity mask; empty -> one [PAD]."""
    seqs = [s if s else [PAD] for s in seqs]
    T = max(len(s) for s in seqs)
    idx = np.zeros((len(seqs), T), dtype=np.int64)
    mask = np.zeros((len(seqs), T), dtype=bool)
    for i, s in enumerate(seqs):
        idx[i, : len(s)] = s
        mask[i, : len(s)] = True
    return idx, mask


@dataclass
class TextEncoder:
    """Per-codepoint embeddings summarised by a masked BiGRU into ``d`` dims.

    Padding positions leave the recurrent state untouched, so an encoding
    does not depend on how far a batch is padded.
    """

    vocab: CharVocab
    table: Tensor
    fwd: GRUParams
    bwd: GRUParams
    max_len: int = MAX_LEN

    @classmethod
    def create(cls, store: ParamStore, rng, vocab: CharVocab, d: int = 128, d_c: int = 64,
               prefix: str = "text", max_len: int = MAX_LEN) -> "TextEncoder":
        if d % 2:
            raise ValueError("text embedding size d must be even")
        table = store.add(f"{prefix}.char_emb", uniform_init(rng, (len(vocab), d_c), 1.0 / np.sqrt(d_c)))
        fwd = GRUParams.create(store, f"{prefix}.gru_fwd", d_c, d // 2, rng)
        bwd = GRUParams.create(store, f"{prefix}.gru_bwd", d_c, d // 2, rng)
        return cls(vocab, table, fwd, bwd, max_len)

    @property
    def dim(self) -> int:
        return 2 * self.fwd.hidden

    def symbols(self, text: str) -> list[int]:
        return self.vocab.encode(text, self.max_len)

    def poi_symbols(self, poi: PoiRecord) -> list[int]:
        """name ‖ [SEP] ‖ address, each side truncated separately."""
        return self.symbols(poi.name) + [SEP] + self.symbols(poi.address)

    def encode_symbols(self, seqs: Sequence[list[int]]) -> Tensor:
        idx, mask = _pack(seqs)
        h_f = gru_sequence(self.table, idx, self.fwd, mask)
        h_b = gru_sequence(self.table, idx, self.bwd, mask, reverse=True)
        return ops.concat([h_f, h_b], axis=1)

    def encode_many(self, texts: Sequence[str]) -> Tensor:
        return self.encode_symbols([self.symbols(t) for t in texts])


def encode_text(s: str, encoder: TextEncoder) -> Tensor:
    return ops.reshape(encoder.encode_many([s]), (encoder.dim,))


@dataclass
class QueryRep:
    q: Tensor
    q_tilde: Tensor


@dataclass
class PoiRep:
    P: Tensor  # (d,)
    Q_P: Tensor  # (TOP_QUERIES, d), zero rows beyond the valid count
    mask: np.ndarray  # (TOP_QUERIES,) bool


def make_query_rep(record: SearchRecord, text: TextEncoder, geo: LocationEncoder) -> QueryRep:
    q = encode_text(record.query_text, text)
    g = ops.reshape(geo.encode_many([(record.user_lat, record.user_lon)]), (geo.dim,))
    return QueryRep(q, q + g)


def make_query_reps(texts: Sequence[str], coords: Sequence[tuple[float, float]],
                    text: TextEncoder, geo: LocationEncoder) -> Tensor:
    """Batched ``q_tilde`` rows, shape ``(N, d)``."""
    return text.encode_many(texts) + geo.encode_many(coords)


def make_poi_reps(pois: Sequence[PoiRecord], text: TextEncoder, geo: LocationEncoder) -> Tensor:
    """Batched ``P_i = text(name ‖ address) + G_i``, shape ``(N, d)``."""
    t = text.encode_symbols([text.poi_symbols(p) for p in pois])
    return t + geo.encode_many([(p.lat, p.lon) for p in pois])


def make_poi_rep(poi: PoiRecord, top_queries: Sequence[tuple[str, float, float]],
                 text: TextEncoder, geo: LocationEncoder, k: int = TOP_QUERIES) -> PoiRep:
    """``top_queries`` holds up to ``k`` ``(text, lat, lon)`` triples."""
    if len(top_queries) > k:
        raise ValueError(f"at most {k} historical queries per POI")
    P = ops.reshape(make_poi_reps([poi], text, geo), (text.dim,))
    mask = np.zeros(k, dtype=bool)
    mask[: len(top_queries)] = True
    if top_queries:
        rows = make_query_reps([t for t, _, _ in top_queries], [(a, b) for _, a, b in top_queries], text, geo)
        pad = k - len(top_queries)
        if pad:
            rows = ops.concat([rows, ops.zeros((pad, text.dim), dtype=rows.dtype)], axis=0)
    else:
        rows = ops.zeros((k, text.dim), dtype=P.dtype)
    return PoiRep(P, rows, mask)
