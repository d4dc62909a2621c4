"""POI catalog and search-log records, JSONL ingestion, sessionization, and a
synthetic multilingual log generator for desk-scale experiments."""
from __future__ import annotations

import json
import math
import unicodedata
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numerics import rng_stream

DEFAULT_SESSION_TIMEOUT = 1800.0


class DataValidationError(ValueError):
    """A record failed validation; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class ParseError(DataValidationError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PoiRecord:
    poi_id: str
    name: str
    address: str
    lat: float
    lon: float

    def validate(self) -> None:
        if not isinstance(self.poi_id, str) or not self.poi_id:
            raise DataValidationError("poi_id must be a non-empty string")
        if not isinstance(self.name, str) or not self.name.strip():
            raise DataValidationError(f"poi {self.poi_id}: name must be non-empty")
        if not isinstance(self.address, str):
            raise DataValidationError(f"poi {self.poi_id}: address must be a string")
        _check_coords(self.lat, self.lon, f"poi {self.poi_id}")


@dataclass(frozen=True)
class SearchRecord:
    user_id: str
    timestamp: float
    query_text: str
    user_lat: float
    user_lon: float
    clicked_poi_id: str | None = None
    shown_poi_ids: tuple[str, ...] | None = None

    def validate(self) -> None:
        if not isinstance(self.user_id, str) or not self.user_id:
            raise DataValidationError("user_id must be a non-empty string")
        if not isinstance(self.query_text, str):
            raise DataValidationError("query_text must be a string")
        if not _is_number(self.timestamp) or self.timestamp < 0:
            raise DataValidationError(f"timestamp must be >= 0, got {self.timestamp!r}")
        _check_coords(self.user_lat, self.user_lon, "user location")
        if (
            self.clicked_poi_id is not None
            and self.shown_poi_ids is not None
            and self.clicked_poi_id not in self.shown_poi_ids
        ):
            raise DataValidationError(f"clicked poi {self.clicked_poi_id!r} not among shown pois")

    def to_json(self) -> dict:
        d = asdict(self)
        if self.shown_poi_ids is not None:
            d["shown_poi_ids"] = list(self.shown_poi_ids)
        return d


@dataclass
class Session:
    user_id: str
    records: list[SearchRecord]

    @property
    def clicked_pois(self) -> list[str]:
        """Clicked POI ids in time order; records without a click are skipped."""
        return [r.clicked_poi_id for r in self.records if r.clicked_poi_id is not None]


@dataclass
class Dataset:
    catalog: dict[str, PoiRecord]
    sessions: list[Session]
    split: str = "all"

    def records(self) -> list[SearchRecord]:
        return [r for s in self.sessions for r in s.records]

    def clicked_records(self) -> list[SearchRecord]:
        return [r for s in self.sessions for r in s.records if r.clicked_poi_id is not None]

    def validate(self) -> None:
        for s in self.sessions:
            for r in s.records:
                if r.clicked_poi_id is not None and r.clicked_poi_id not in self.catalog:
                    raise DataValidationError(f"clicked poi {r.clicked_poi_id!r} missing from catalog")


def _is_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def _check_coords(lat, lon, what: str) -> None:
    if not _is_number(lat) or not -90.0 <= lat <= 90.0:
        raise DataValidationError(f"{what}: latitude {lat!r} outside [-90, 90]")
    if not _is_number(lon) or not -180.0 <= lon <= 180.0:
        raise DataValidationError(f"{what}: longitude {lon!r} outside [-180, 180]")


# -- ingestion ---------------------------------------------------------------

def _iter_json_lines(path) -> Iterable[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed JSON ({exc.msg})", lineno) from None
            if not isinstance(obj, dict):
                raise ParseError("expected a JSON object", lineno)
            yield lineno, obj


_POI_FIELDS = ("poi_id", "name", "address", "lat", "lon")


def poi_from_json(obj: dict, lineno: int | None = None) -> PoiRecord:
    missing = [k for k in _POI_FIELDS if k not in obj]
    if missing:
        raise ParseError(f"missing field(s) {missing}", lineno)
    rec = PoiRecord(obj["poi_id"], obj["name"], obj["address"], obj["lat"], obj["lon"])
    try:
        rec.validate()
    except DataValidationError as exc:
        raise DataValidationError(str(exc), lineno) from None
    return rec


def search_from_json(obj: dict, lineno: int | None = None) -> SearchRecord:
    required = ("user_id", "timestamp", "query_text", "user_lat", "user_lon")
    missing = [k for k in required if k not in obj]
    if missing:
        raise ParseError(f"missing field(s) {missing}", lineno)
    shown = obj.get("shown_poi_ids")
    rec = SearchRecord(
        user_id=obj["user_id"],
        timestamp=obj["timestamp"],
        query_text=obj["query_text"],
        user_lat=obj["user_lat"],
        user_lon=obj["user_lon"],
        clicked_poi_id=obj.get("clicked_poi_id"),
        shown_poi_ids=tuple(shown) if shown is not None else None,
    )
    try:
        rec.validate()
    except DataValidationError as exc:
        raise DataValidationError(str(exc), lineno) from None
    return rec


def ingest_catalog(path) -> dict[str, PoiRecord]:
    """Read ``catalog.jsonl``; raises on the first malformed, invalid or duplicate line."""
    catalog: dict[str, PoiRecord] = {}
    for lineno, obj in _iter_json_lines(path):
        rec = poi_from_json(obj, lineno)
        if rec.poi_id in catalog:
            raise DataValidationError(f"duplicate poi_id {rec.poi_id!r}", lineno)
        catalog[rec.poi_id] = rec
    return catalog


def ingest_logs(path, catalog: dict[str, PoiRecord] | None = None) -> list[SearchRecord]:
    out = []
    for lineno, obj in _iter_json_lines(path):
        rec = search_from_json(obj, lineno)
        if catalog is not None and rec.clicked_poi_id is not None and rec.clicked_poi_id not in catalog:
            raise DataValidationError(f"clicked poi {rec.clicked_poi_id!r} not in catalog", lineno)
        out.append(rec)
    return out


def validation_report(catalog_path, logs_path=None) -> dict:
    """Counts and error lines for the given files, without stopping at the first error."""
    report: dict = {"catalog": {"path": str(catalog_path), "valid": 0, "errors": []}}
    ids: set[str] = set()
    try:
        for lineno, obj in _iter_json_lines_lenient(catalog_path, report["catalog"]["errors"]):
            try:
                rec = poi_from_json(obj, lineno)
            except DataValidationError as exc:
                report["catalog"]["errors"].append({"line": lineno, "error": str(exc)})
                continue
            if rec.poi_id in ids:
                report["catalog"]["errors"].append({"line": lineno, "error": f"duplicate poi_id {rec.poi_id!r}"})
                continue
            ids.add(rec.poi_id)
            report["catalog"]["valid"] += 1
    except FileNotFoundError:
        report["catalog"]["errors"].append({"line": None, "error": "file not found"})
    if logs_path is not None:
        section = {"path": str(logs_path), "valid": 0, "clicked": 0, "errors": []}
        report["logs"] = section
        try:
            for lineno, obj in _iter_json_lines_lenient(logs_path, section["errors"]):
                try:
                    rec = search_from_json(obj, lineno)
                except DataValidationError as exc:
                    section["errors"].append({"line": lineno, "error": str(exc)})
                    continue
                if rec.clicked_poi_id is not None and rec.clicked_poi_id not in ids:
                    section["errors"].append({"line": lineno, "error": f"unknown poi {rec.clicked_poi_id!r}"})
                    continue
                section["valid"] += 1
                section["clicked"] += rec.clicked_poi_id is not None
        except FileNotFoundError:
            section["errors"].append({"line": None, "error": "file not found"})
    return report


def _iter_json_lines_lenient(path, errors: list):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                errors.append({"line": lineno, "error": f"malformed JSON ({exc.msg})"})
                continue
            if not isinstance(obj, dict):
                errors.append({"line": lineno, "error": "expected a JSON object"})
                continue
            yield lineno, obj


def _dump_line(obj: dict) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True) + "\n"


def write_catalog(path, catalog: dict[str, PoiRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in catalog.values():
            fh.write(_dump_line(asdict(rec)))


def write_logs(path, records: Iterable[SearchRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(_dump_line(rec.to_json()))


# -- sessionization ----------------------------------------------------------

def sessionize(records: Sequence[SearchRecord], timeout_s: float = DEFAULT_SESSION_TIMEOUT) -> list[Session]:
    """Group records per user and cut wherever the gap between consecutive
    records exceeds ``timeout_s``.

    Output is ordered by (user_id, session start); records with equal
    timestamps keep their input order.
    """
    if not timeout_s > 0:
        raise ConfigError("session timeout must be positive")
    by_user: dict[str, list[tuple[float, int, SearchRecord]]] = defaultdict(list)
    for i, r in enumerate(records):
        by_user[r.user_id].append((r.timestamp, i, r))
    sessions = []
    for user in sorted(by_user):
        rows = sorted(by_user[user], key=lambda t: (t[0], t[1]))
        current = [rows[0][2]]
        for (t_prev, _, _), (t, _, r) in zip(rows, rows[1:]):
            if t - t_prev > timeout_s:
                sessions.append(Session(user, current))
                current = []
            current.append(r)
        sessions.append(Session(user, current))
    return sessions


def split_dataset(dataset: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> dict[str, Dataset]:
    """Random split by session into train/valid/test."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ConfigError(f"bad split fractions {fractions}")
    n = len(dataset.sessions)
    order = rng_stream(seed, "split").permutation(n)
    n_train = int(round(fractions[0] * n))
    n_valid = int(round(fractions[1] * n))
    parts = {
        "train": order[:n_train],
        "valid": order[n_train:n_train + n_valid],
        "test": order[n_train + n_valid:],
    }
    return {
        name: Dataset(dataset.catalog, [dataset.sessions[i] for i in sorted(idx)], split=name)
        for name, idx in parts.items()
    }


def normalize_query(text: str) -> str:
    """NFKC, lowercase, collapse whitespace."""
    return " ".join(unicodedata.normalize("NFKC", text).lower().split())


# -- synthetic generator -----------------------------------------------------

# Each synthetic script is a one-to-one letter map applied to the base
# (latin) rendering of a name, so cross-script queries share no characters
# with the POI text but are recoverable by a character-level model.
_LATIN = "abcdefghijklmnopqrstuvwxyz"
SCRIPTS: dict[str, str] = {
    "latin": _LATIN,
    "cyrillic": "абцдефгхийклмнопярстужвьыз",
    "greek": "αβψδεφγηιξκλμνοπϙρστθωςχυζ",
    "kana": "アベチデエフガハイジカルマナオパクラサタウヴワシヤザ",
}
_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"
_CATEGORY_WORDS = ("tower", "park", "cafe", "museum", "station", "market", "hotel", "temple")
_STREET_WORDS = ("street", "road", "avenue", "lane")


def transliterate(text: str, script: str) -> str:
    table = SCRIPTS[script]
    return "".join(table[_LATIN.index(c)] if c in _LATIN else c for c in text)


@dataclass(frozen=True)
class SynthConfig:
    num_pois: int = 200
    num_queries: int = 1000
    languages: tuple[str, ...] = ("latin", "kana")
    popularity_skew: float = 1.1
    noise_rate: float = 0.05
    seed: int = 0
    num_cities: int = 10
    cross_language_rate: float = 0.5
    mixed_language_rate: float = 0.15
    truncate_rate: float = 0.2
    no_click_rate: float = 0.0
    num_shown: int = 10
    mean_session_clicks: float = 2.5
    query_variants: int = 3
    city_radius_deg: float = 0.05

    def validate(self) -> None:
        if self.num_pois < 1 or self.num_queries < 1 or self.num_cities < 1:
            raise ConfigError("num_pois, num_queries and num_cities must be >= 1")
        if len(self.languages) < 2:
            raise ConfigError("at least two languages are required")
        for lang in self.languages:
            if lang not in SCRIPTS:
                raise ConfigError(f"unknown language {lang!r}; choose from {sorted(SCRIPTS)}")
        for name in ("noise_rate", "cross_language_rate", "mixed_language_rate", "truncate_rate", "no_click_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.popularity_skew < 0:
            raise ConfigError("popularity_skew must be >= 0")
        if self.num_shown < 1 or self.query_variants < 1:
            raise ConfigError("num_shown and query_variants must be >= 1")


def _word(rng, syllables: int) -> str:
    return "".join(rng.choice(list(_CONSONANTS)) + rng.choice(list(_VOWELS)) for _ in range(syllables))


def _typo(text: str, rate: float, rng) -> str:
    chars = list(text)
    for i, c in enumerate(chars):
        if c in _LATIN and rng.random() < rate:
            chars[i] = _LATIN[rng.integers(len(_LATIN))]
    return "".join(chars)


def synth_generate(config: SynthConfig) -> Dataset:
    """Deterministic synthetic catalog + search sessions.

    POIs sit in ``num_cities`` clusters; each POI has a base (latin) name and a
    home script it is listed in. Query strings are renderings of the clicked
    POI's name in the user's script (sometimes a mix of two scripts),
    optionally truncated to a prefix and perturbed with typos. Each POI has a
    few habitual query variants, so the same strings recur in the log. POI
    popularity is Zipf-distributed with exponent ``popularity_skew``; sessions
    stay inside one city, so successive clicks co-occur with nearby POIs.
    """
    config.validate()
    rng = rng_stream(config.seed, "synth")
    langs = list(config.languages)

    centers = [(rng.uniform(-50, 60), rng.uniform(-170, 170)) for _ in range(config.num_cities)]
    base_names: list[str] = []
    used: set[str] = set()
    catalog: dict[str, PoiRecord] = {}
    poi_city = np.empty(config.num_pois, dtype=np.int64)
    poi_home = []
    for i in range(config.num_pois):
        while True:
            words = [_word(rng, int(rng.integers(2, 4)))]
            if rng.random() < 0.5:
                words.append(_word(rng, int(rng.integers(1, 3))))
            words.append(str(rng.choice(_CATEGORY_WORDS)))
            base = " ".join(words)
            if base not in used:
                used.add(base)
                break
        city = int(rng.integers(config.num_cities))
        home = langs[int(rng.integers(len(langs)))]
        lat = float(np.clip(centers[city][0] + rng.normal(0, config.city_radius_deg), -90, 90))
        lon = float(np.clip(centers[city][1] + rng.normal(0, config.city_radius_deg), -180, 180))
        street = f"{int(rng.integers(1, 300))} {_word(rng, 2)} {rng.choice(_STREET_WORDS)}"
        poi_id = f"p{i:05d}"
        catalog[poi_id] = PoiRecord(
            poi_id, transliterate(base, home), transliterate(street, home), round(lat, 6), round(lon, 6)
        )
        base_names.append(base)
        poi_city[i] = city
        poi_home.append(home)

    # Zipf popularity over a random permutation of POIs
    ranks = rng.permutation(config.num_pois) + 1
    weights = 1.0 / ranks.astype(np.float64) ** config.popularity_skew
    weights /= weights.sum()
    city_members = [np.flatnonzero(poi_city == c) for c in range(config.num_cities)]
    city_weight = np.array([weights[m].sum() for m in city_members])
    city_weight /= city_weight.sum()

    # habitual query variants per POI: (script, truncated?, mixed second script)
    variants: list[list[tuple[str, float]]] = []
    for i in range(config.num_pois):
        vs = []
        for _ in range(config.query_variants):
            vs.append(_make_query(base_names[i], poi_home[i], langs, config, rng))
        vs_w = rng.dirichlet(np.ones(len(vs)))
        variants.append(list(zip(vs, vs_w)))

    poi_ids = list(catalog)
    records: list[SearchRecord] = []
    t = 1_600_000_000.0
    user_n = 0
    while len(records) < config.num_queries:
        city = int(rng.choice(config.num_cities, p=city_weight))
        members = city_members[city]
        if len(members) == 0:
            continue
        user = f"u{user_n:05d}"
        user_n += 1
        n_clicks = min(1 + int(rng.poisson(config.mean_session_clicks - 1)), config.num_queries - len(records))
        p_local = weights[members] / weights[members].sum()
        ulat = centers[city][0] + rng.normal(0, config.city_radius_deg)
        ulon = centers[city][1] + rng.normal(0, config.city_radius_deg)
        for _ in range(n_clicks):
            target = int(rng.choice(members, p=p_local))
            if rng.random() < 0.3:
                text = _make_query(base_names[target], poi_home[target], langs, config, rng)
            else:
                vs, vw = zip(*variants[target])
                text = vs[int(rng.choice(len(vs), p=np.array(vw)))]
            text = _typo(text, config.noise_rate, rng)
            shown = _shown_list(target, members, weights, config.num_shown, rng, config.num_pois)
            clicked = poi_ids[target]
            if rng.random() < config.no_click_rate:
                clicked = None
            records.append(SearchRecord(
                user_id=user,
                timestamp=round(t, 3),
                query_text=text,
                user_lat=round(float(np.clip(ulat, -90, 90)), 6),
                user_lon=round(float(np.clip(ulon, -180, 180)), 6),
                clicked_poi_id=clicked,
                shown_poi_ids=tuple(poi_ids[j] for j in shown),
            ))
            t += float(rng.uniform(5, 600))
        t += float(rng.uniform(3 * DEFAULT_SESSION_TIMEOUT, 10 * DEFAULT_SESSION_TIMEOUT))
    dataset = Dataset(catalog, sessionize(records, DEFAULT_SESSION_TIMEOUT))
    dataset.validate()
    return dataset


def _make_query(base: str, home: str, langs: list[str], config: SynthConfig, rng) -> str:
    words = base.split()
    if rng.random() < config.truncate_rate and len(words) > 1:
        words = words[: int(rng.integers(1, len(words)))]
    if rng.random() < config.cross_language_rate:
        others = [l for l in langs if l != home]
        script = others[int(rng.integers(len(others)))]
    else:
        script = home
    out = [transliterate(w, script) for w in words]
    if len(words) > 1 and rng.random() < config.mixed_language_rate:
        alt = langs[int(rng.integers(len(langs)))]
        k = int(rng.integers(len(words)))
        out[k] = transliterate(words[k], alt)
    return " ".join(out)


def _shown_list(target: int, members: np.ndarray, weights: np.ndarray, k: int, rng, num_pois: int) -> list[int]:
    """Engine-style candidate list: the target plus popular POIs from the same city."""
    others = members[members != target]
    if len(others) < k - 1:
        pool = np.setdiff1d(np.arange(num_pois), np.append(others, target))
        extra = rng.choice(pool, size=min(k - 1 - len(others), len(pool)), replace=False)
        others = np.concatenate([others, extra])
        picked = list(others)
    else:
        p = weights[others] + 1.0 / num_pois
        p = p / p.sum()
        picked = list(rng.choice(others, size=k - 1, replace=False, p=p))
    shown = picked + [target]
    order = rng.permutation(len(shown))
    return [int(shown[i]) for i in order]


def dataset_fingerprint_payload(dataset: Dataset) -> bytes:
    """Canonical bytes of a dataset (catalog then records), for determinism checks."""
    lines = [_dump_line(asdict(p)) for p in dataset.catalog.values()]
    lines += [_dump_line(r.to_json()) for r in dataset.records()]
    return "".join(lines).encode("utf-8")
