import json
from collections import Counter

import pytest
from hypothesis import given
from hypothesis import strategies as st

from hgamn.datamodel import (
    ConfigError,
    DataValidationError,
    ParseError,
    PoiRecord,
    SearchRecord,
    SynthConfig,
    dataset_fingerprint_payload,
    ingest_catalog,
    ingest_logs,
    normalize_query,
    sessionize,
    split_dataset,
    synth_generate,
    transliterate,
    validation_report,
    write_catalog,
    write_logs,
)


def _poi(i, **kw):
    d = {"poi_id": f"p{i}", "name": f"name {i}", "address": "1 main st", "lat": 10.0 + i, "lon": 20.0}
    d.update(kw)
    return d


def _write_lines(path, objs):
    path.write_text("".join(json.dumps(o, ensure_ascii=False) + "\n" for o in objs), encoding="utf-8")
    return path


def _rec(user, t, clicked="p1", **kw):
    return SearchRecord(user, t, "q", 0.0, 0.0, clicked, **kw)


# -- ingestion ----------------------------------------------------------------

def test_ingest_three_lines(tmp_path):
    cat = ingest_catalog(_write_lines(tmp_path / "c.jsonl", [_poi(i) for i in range(3)]))
    assert list(cat) == ["p0", "p1", "p2"]
    assert cat["p1"] == PoiRecord("p1", "name 1", "1 main st", 11.0, 20.0)


def test_ingest_duplicate_names_line(tmp_path):
    path = _write_lines(tmp_path / "c.jsonl", [_poi(0), _poi(0)])
    with pytest.raises(DataValidationError, match="line 2"):
        ingest_catalog(path)


@pytest.mark.parametrize("field,value", [("lat", 91), ("lat", -90.5), ("lon", 180.1), ("name", ""), ("lat", "x")])
def test_ingest_invalid_values(tmp_path, field, value):
    path = _write_lines(tmp_path / "c.jsonl", [_poi(0, **{field: value})])
    with pytest.raises(DataValidationError, match="line 1"):
        ingest_catalog(path)


def test_ingest_malformed_json(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text(json.dumps(_poi(0)) + "\n{not json\n")
    with pytest.raises(ParseError, match="line 2"):
        ingest_catalog(path)


def test_ingest_missing_field(tmp_path):
    obj = _poi(0)
    del obj["address"]
    with pytest.raises(ParseError, match="address"):
        ingest_catalog(_write_lines(tmp_path / "c.jsonl", [obj]))


def test_logs_click_must_be_shown(tmp_path):
    row = {"user_id": "u", "timestamp": 1.0, "query_text": "q", "user_lat": 0, "user_lon": 0,
           "clicked_poi_id": "p9", "shown_poi_ids": ["p1", "p2"]}
    with pytest.raises(DataValidationError, match="not among shown"):
        ingest_logs(_write_lines(tmp_path / "l.jsonl", [row]))


def test_logs_unknown_poi(tmp_path):
    cat = ingest_catalog(_write_lines(tmp_path / "c.jsonl", [_poi(0)]))
    row = {"user_id": "u", "timestamp": 1.0, "query_text": "q", "user_lat": 0, "user_lon": 0, "clicked_poi_id": "zz"}
    with pytest.raises(DataValidationError, match="not in catalog"):
        ingest_logs(_write_lines(tmp_path / "l.jsonl", [row]), cat)


def test_negative_timestamp():
    with pytest.raises(DataValidationError):
        _rec("u", -1.0).validate()


def test_validation_report_collects_all_errors(tmp_path):
    cat = tmp_path / "c.jsonl"
    cat.write_text(json.dumps(_poi(0)) + "\n[1]\n" + json.dumps(_poi(1, lat=99)) + "\n" + json.dumps(_poi(0)) + "\n")
    rep = validation_report(cat)
    assert rep["catalog"]["valid"] == 1
    assert [e["line"] for e in rep["catalog"]["errors"]] == [2, 3, 4]


def test_ingest_round_trip(tmp_path):
    ds = synth_generate(SynthConfig(num_pois=15, num_queries=40, seed=3))
    write_catalog(tmp_path / "c.jsonl", ds.catalog)
    write_logs(tmp_path / "l.jsonl", ds.records())
    cat = ingest_catalog(tmp_path / "c.jsonl")
    logs = ingest_logs(tmp_path / "l.jsonl", cat)
    assert cat == ds.catalog
    assert logs == ds.records()
    write_catalog(tmp_path / "c2.jsonl", cat)
    write_logs(tmp_path / "l2.jsonl", logs)
    assert (tmp_path / "c2.jsonl").read_bytes() == (tmp_path / "c.jsonl").read_bytes()
    assert (tmp_path / "l2.jsonl").read_bytes() == (tmp_path / "l.jsonl").read_bytes()


# -- sessionize ---------------------------------------------------------------

def test_sessionize_small_gaps():
    s = sessionize([_rec("u", 0), _rec("u", 10), _rec("u", 20)], 1800)
    assert [len(x.records) for x in s] == [3]


def test_sessionize_gap_cut():
    s = sessionize([_rec("u", 0), _rec("u", 10), _rec("u", 3610)], 1800)
    assert [len(x.records) for x in s] == [2, 1]


def test_sessionize_gap_equal_timeout_stays():
    s = sessionize([_rec("u", 0), _rec("u", 1800)], 1800)
    assert len(s) == 1


def test_sessionize_interleaved_users():
    recs = [_rec("a", 0), _rec("b", 1), _rec("a", 2), _rec("b", 3)]
    s = sessionize(recs, 1800)
    assert [(x.user_id, len(x.records)) for x in s] == [("a", 2), ("b", 2)]


def test_sessionize_empty_and_bad_timeout():
    assert sessionize([], 10) == []
    with pytest.raises(ConfigError):
        sessionize([_rec("u", 0)], 0)


def test_clicked_pois_skip_unclicked():
    s = sessionize([_rec("u", 0, "a"), _rec("u", 1, None), _rec("u", 2, "b")])
    assert s[0].clicked_pois == ["a", "b"]


@given(st.lists(st.tuples(st.sampled_from("abc"), st.integers(0, 20_000)), max_size=60),
       st.integers(1, 5000))
def test_sessionize_is_partition(rows, timeout):
    recs = [_rec(u, float(t), f"p{i}") for i, (u, t) in enumerate(rows)]
    sessions = sessionize(recs, timeout)
    flat = [r for s in sessions for r in s.records]
    assert Counter(flat) == Counter(recs)
    for s in sessions:
        ts = [r.timestamp for r in s.records]
        assert ts == sorted(ts)
        assert all(b - a <= timeout for a, b in zip(ts, ts[1:]))
        assert {r.user_id for r in s.records} == {s.user_id}
    # consecutive sessions of one user are separated by more than the timeout
    for a, b in zip(sessions, sessions[1:]):
        if a.user_id == b.user_id:
            assert b.records[0].timestamp - a.records[-1].timestamp > timeout


# -- synthetic generator ------------------------------------------------------

def test_synth_deterministic():
    cfg = SynthConfig(num_pois=30, num_queries=100, seed=7)
    assert dataset_fingerprint_payload(synth_generate(cfg)) == dataset_fingerprint_payload(synth_generate(cfg))
    other = SynthConfig(num_pois=30, num_queries=100, seed=8)
    assert dataset_fingerprint_payload(synth_generate(cfg)) != dataset_fingerprint_payload(synth_generate(other))


def test_synth_default_size_integrity():
    ds = synth_generate(SynthConfig(num_pois=200, num_queries=1000))
    assert len(ds.catalog) == 200
    assert len(ds.records()) == 1000
    for r in ds.records():
        assert r.clicked_poi_id in ds.catalog
        assert r.clicked_poi_id in r.shown_poi_ids
    scripts = {transliterate("a", s) for s in ("latin", "kana")}
    assert len(scripts) == 2


def test_synth_high_skew_concentrates_clicks():
    ds = synth_generate(SynthConfig(num_pois=200, num_queries=1000, popularity_skew=1.5, seed=1))
    counts = Counter(r.clicked_poi_id for r in ds.clicked_records())
    top = sum(n for _, n in counts.most_common(20))
    assert top / sum(counts.values()) > 0.5


@pytest.mark.parametrize("kw", [{"num_pois": 0}, {"languages": ("latin",)}, {"languages": ("latin", "klingon")},
                                {"noise_rate": 1.5}, {"popularity_skew": -1}])
def test_synth_bad_config(kw):
    with pytest.raises(ConfigError):
        synth_generate(SynthConfig(**kw))


def test_split_disjoint_by_session():
    ds = synth_generate(SynthConfig(num_pois=30, num_queries=200, seed=2))
    parts = split_dataset(ds, seed=4)
    ids = [{id(s) for s in parts[k].sessions} for k in ("train", "valid", "test")]
    assert sum(map(len, ids)) == len(ds.sessions)
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    with pytest.raises(ConfigError):
        split_dataset(ds, (0.5, 0.5, 0.5))


def test_normalize_query():
    assert normalize_query("  Tokyo　  TOWER ") == "tokyo tower"
    assert normalize_query("ＡＢＣ") == "abc"
