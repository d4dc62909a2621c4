"""Independent reference implementations used as test oracles.

These are deliberately naive (direct enumeration, exact rational arithmetic)
and share no code with the package beyond plain data types.
"""
from __future__ import annotations

import math
import unicodedata
from fractions import Fraction

ALPHABET = "0123456789bcdefghjkmnpqrstuvwxyz"


def ref_geohash(lat: float, lon: float, precision: int) -> str:
    """Cell index per axis from exact rationals, then bit interleaving."""
    nbits = 5 * precision
    lon_bits = (nbits + 1) // 2
    lat_bits = nbits // 2

    def cell(x, lo, hi, bits):
        frac = (Fraction(x) - lo) / (hi - lo)
        idx = math.floor(frac * (1 << bits))
        return min(idx, (1 << bits) - 1)

    ix = cell(lon, -180, 180, lon_bits)
    iy = cell(lat, -90, 90, lat_bits)
    bits = []
    for i in range(nbits):
        if i % 2 == 0:
            k = i // 2
            bits.append((ix >> (lon_bits - 1 - k)) & 1)
        else:
            k = i // 2
            bits.append((iy >> (lat_bits - 1 - k)) & 1)
    out = []
    for j in range(precision):
        v = 0
        for b in bits[5 * j:5 * j + 5]:
            v = 2 * v + b
        out.append(ALPHABET[v])
    return "".join(out)


def ref_windows(sequences):
    """(#W, {poi: #W(poi)}, {(a, b): #W(a, b)}) by direct enumeration.

    A window contributes once to each *distinct* member; pairs are unordered
    and need two distinct members.
    """
    windows = []
    for seq in sequences:
        for i in range(len(seq) - 1):
            windows.append((seq[i], seq[i + 1]))
    pois = sorted({p for w in windows for p in w})
    single = {}
    for p in pois:
        single[p] = sum(1 for w in windows if p in w)
    pair = {}
    for i, a in enumerate(pois):
        for b in pois[i + 1:]:
            n = sum(1 for w in windows if a in w and b in w and a != b)
            if n:
                pair[(a, b)] = n
    return len(windows), single, pair


def ref_pmi(sequences, keep_nonpositive=False):
    W, single, pair = ref_windows(sequences)
    out = {}
    for (a, b), n in pair.items():
        v = math.log((n / W) / ((single[a] / W) * (single[b] / W)))
        if keep_nonpositive or v > 0:
            out[(a, b)] = v
    return out


def ref_normalize(text: str) -> str:
    return " ".join(unicodedata.normalize("NFKC", text).lower().split())


def ref_query_edges(pairs, k=4):
    """``pairs`` is a list of (query text, poi). Returns {poi: [(q, w), ...]}."""
    counts = {}
    for q, p in pairs:
        key = (ref_normalize(q), p)
        counts[key] = counts.get(key, 0) + 1
    out = {}
    for p in sorted({p for _, p in counts}):
        items = [(q, n) for (q, pp), n in counts.items() if pp == p]
        # selection sort on (-count, query) to avoid relying on sort stability
        chosen = []
        while items and len(chosen) < k:
            best = items[0]
            for it in items[1:]:
                if it[1] > best[1] or (it[1] == best[1] and it[0] < best[0]):
                    best = it
            chosen.append(best)
            items.remove(best)
        total = sum(n for _, n in chosen)
        out[p] = [(q, n / total) for q, n in chosen]
    return out


def ref_metrics(ranked, truth, ks=(1, 3, 10)):
    n = len(ranked)
    rr = 0.0
    ndcg = {k: 0.0 for k in ks}
    sr = {k: 0 for k in ks}
    for lst, gt in zip(ranked, truth):
        pos = None
        for i, x in enumerate(lst):
            if x == gt:
                pos = i + 1
                break
        if pos is None:
            continue
        rr += 1.0 / pos
        for k in ks:
            if pos <= k:
                sr[k] += 1
                # DCG over the top-k list with a single relevant item; IDCG = 1
                ndcg[k] += sum((1.0 if lst[i] == gt else 0.0) / math.log2(i + 2) for i in range(min(k, len(lst))))
    out = {"MRR": rr / n}
    out.update({f"nDCG@{k}": ndcg[k] / n for k in ks})
    out.update({f"SR@{k}": sr[k] / n for k in ks})
    return out
