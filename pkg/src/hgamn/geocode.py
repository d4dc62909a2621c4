"""Geohash strings and the bidirectional-GRU location encoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datamodel import DataValidationError
from .numerics import GRUParams, ParamStore, Tensor, gru_sequence, ops, uniform_init

BASE32 = "0123456789bcdefghjkmnpqrstuvwxyz"
_DECODE = {c: i for i, c in enumerate(BASE32)}
MAX_PRECISION = 12
DEFAULT_PRECISION = 10
PAD = 0  # symbol 0 is [PAD]; alphabet characters are 1..32


class GeohashError(ValueError):
    pass


def geohash_encode(lat: float, lon: float, precision: int = DEFAULT_PRECISION) -> str:
    if not -90.0 <= lat <= 90.0 or not -180.0 <= lon <= 180.0:
        raise DataValidationError(f"coordinates out of range: ({lat}, {lon})")
    if not 1 <= precision <= MAX_PRECISION:
        raise DataValidationError(f"precision must be in [1, {MAX_PRECISION}], got {precision}")
    lat_lo, lat_hi = -90.0, 90.0
    lon_lo, lon_hi = -180.0, 180.0
    chars = []
    bits = 0
    nbits = 0
    even = True  # longitude first
    while len(chars) < precision:
        if even:
            mid = (lon_lo + lon_hi) / 2
            if lon >= mid:
                bits = (bits << 1) | 1
                lon_lo = mid
            else:
                bits <<= 1
                lon_hi = mid
        else:
            mid = (lat_lo + lat_hi) / 2
            if lat >= mid:
                bits = (bits << 1) | 1
                lat_lo = mid
            else:
                bits <<= 1
                lat_hi = mid
        even = not even
        nbits += 1
        if nbits == 5:
            chars.append(BASE32[bits])
            bits = 0
            nbits = 0
    return "".join(chars)


def validate_geohash(g: str) -> None:
    if not isinstance(g, str) or not 1 <= len(g) <= MAX_PRECISION:
        raise GeohashError(f"geohash length must be in [1, {MAX_PRECISION}]: {g!r}")
    bad = [c for c in g if c not in _DECODE]
    if bad:
        raise GeohashError(f"invalid geohash character(s) {bad!r} in {g!r}")


def geohash_bounds(g: str) -> tuple[float, float, float, float]:
    """Cell of ``g`` as ``(lat_min, lat_max, lon_min, lon_max)``."""
    validate_geohash(g)
    lat = [-90.0, 90.0]
    lon = [-180.0, 180.0]
    even = True
    for c in g:
        v = _DECODE[c]
        for shift in range(4, -1, -1):
            bit = (v >> shift) & 1
            rng = lon if even else lat
            mid = (rng[0] + rng[1]) / 2
            rng[1 - bit] = mid
            even = not even
    return lat[0], lat[1], lon[0], lon[1]


def pad_and_index(g: str) -> list[int]:
    """Left-pad to 12 symbols with [PAD] and map to indices (PAD=0, alphabet 1..32)."""
    validate_geohash(g)
    return [PAD] * (MAX_PRECISION - len(g)) + [_DECODE[c] + 1 for c in g]


def index_batch(geohashes) -> np.ndarray:
    return np.array([pad_and_index(g) for g in geohashes], dtype=np.int64).reshape(-1, MAX_PRECISION)


@dataclass
class LocationEncoder:
    """Embeds the 12 padded geohash symbols and summarises them with a BiGRU.

    ``backward_state`` selects which backward-direction state is used:
    ``"terminal"`` (after the whole reversed sequence, i.e. aligned with
    position 1) or ``"aligned"`` (the backward state at position 12, which
    has only consumed the last symbol).
    """

    table: Tensor
    fwd: GRUParams
    bwd: GRUParams
    precision: int = DEFAULT_PRECISION
    backward_state: str = "terminal"

    @classmethod
    def create(cls, store: ParamStore, rng, d: int = 128, d_c: int = 64, prefix: str = "geo",
               precision: int = DEFAULT_PRECISION, backward_state: str = "terminal") -> "LocationEncoder":
        if d % 2:
            raise ValueError("location embedding size d must be even")
        if backward_state not in ("terminal", "aligned"):
            raise ValueError(f"unknown backward_state {backward_state!r}")
        table = store.add(f"{prefix}.char_emb", uniform_init(rng, (len(BASE32) + 1, d_c), 1.0 / np.sqrt(d_c)))
        fwd = GRUParams.create(store, f"{prefix}.gru_fwd", d_c, d // 2, rng)
        bwd = GRUParams.create(store, f"{prefix}.gru_bwd", d_c, d // 2, rng)
        return cls(table, fwd, bwd, precision, backward_state)

    @property
    def dim(self) -> int:
        return 2 * self.fwd.hidden

    def geohash(self, lat: float, lon: float) -> str:
        return geohash_encode(lat, lon, self.precision)

    def encode_indices(self, idx: np.ndarray) -> Tensor:
        """``(N, 12)`` symbol indices -> ``(N, d)`` embeddings."""
        h_f = gru_sequence(self.table, idx, self.fwd)
        stop = 1 if self.backward_state == "aligned" else None
        h_b = gru_sequence(self.table, idx, self.bwd, reverse=True, stop=stop)
        return ops.concat([h_f, h_b], axis=1)

    def encode_many(self, coords) -> Tensor:
        """Encode a sequence of ``(lat, lon)`` pairs; duplicates are encoded once."""
        hashes = [self.geohash(lat, lon) for lat, lon in coords]
        uniq = sorted(set(hashes))
        pos = {g: i for i, g in enumerate(uniq)}
        emb = self.encode_indices(index_batch(uniq))
        return ops.take(emb, [pos[g] for g in hashes])


def encode_location(lat: float, lon: float, encoder: LocationEncoder) -> Tensor:
    """Location embedding of one coordinate pair, shape ``(d,)``."""
    return ops.reshape(encoder.encode_indices(index_batch([encoder.geohash(lat, lon)])), (encoder.dim,))
