import json
from pathlib import Path

import pytest

from hgamn.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from hgamn.config import RunConfig, dump_config, load_config
from hgamn.datamodel import ConfigError
from hgamn.numerics import digest

SMALL = ["--d", "16", "--d-c", "8", "--d-n", "16", "--widths", "16,24", "--heads", "2"]


# -- config -------------------------------------------------------------------

def test_defaults():
    c = load_config()
    assert (c.d, c.d_c, c.d_n, c.widths, c.heads, c.max_len) == (128, 64, 128, (128, 256), 4, 30)
    assert (c.batch_size, c.epochs, c.lr, c.dropout, c.top_k_queries) == (64, 40, 1e-3, 0.5, 4)
    assert c.geohash_precision == 10 and c.session_timeout == 1800


def test_ini_then_flags(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[train]\nepochs = 7\nlr = 0.01\n[model]\nwidths = 8 16\nmasked_attention = yes\n"
                   "[paths]\ncatalog = a.jsonl\n")
    c = load_config(ini, {"epochs": 3, "seed": None})
    assert (c.epochs, c.lr, c.widths, c.masked_attention, c.catalog) == (3, 0.01, (8, 16), True, "a.jsonl")


@pytest.mark.parametrize("text", ["[nope]\nx = 1\n", "[train]\nwhatever = 1\n", "[train]\nepochs = many\n",
                                  "[train]\nvariant = bogus\n", "[model]\nd = 64\n"])
def test_bad_ini(tmp_path, text):
    ini = tmp_path / "run.ini"
    ini.write_text(text)
    with pytest.raises(ConfigError):
        load_config(ini)


def test_dump_round_trip(tmp_path):
    c = load_config(None, {"epochs": 5, "widths": "32,64", "per_type_w1": True, "logs": "x"})
    (tmp_path / "c.ini").write_text(dump_config(c))
    assert load_config(tmp_path / "c.ini") == c


def test_fingerprint_ignores_paths():
    a = RunConfig(catalog="a")
    assert a.fingerprint() == RunConfig(catalog="b").fingerprint()
    assert a.fingerprint() != RunConfig(epochs=3).fingerprint()


# -- command line ---------------------------------------------------------------

@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    data = root / "data"
    common = ["--catalog", str(data / "catalog.jsonl"), "--logs", str(data / "logs.jsonl")]
    assert main(["synth", "--out", str(data), "--num-pois", "30", "--num-queries", "200", "--synth-seed", "3"]) == 0
    assert main(["build-graph", *common, "--out", str(root / "graph"), *SMALL]) == 0
    paths = common + ["--graph", str(root / "graph"), "--checkpoint", str(root / "model")]
    assert main(["train", *paths, *SMALL, "--epochs", "2", "--batch-size", "16", "--quiet"]) == 0
    return root, paths


def test_pipeline_artifacts(pipeline):
    root, _ = pipeline
    for art in ("data/catalog.jsonl", "data/logs.jsonl", "graph", "model"):
        assert (root / art).exists()
        man = json.loads((root / (art + ".manifest.json")).read_text())
        assert man["artifact_digest"] == digest(root / art)
    man = json.loads((root / "model.manifest.json").read_text())
    assert man["config"]["d"] == 16 and len(man["config_fingerprint"]) == 64
    assert set(man["inputs"]) == {"catalog", "logs", "graph"}
    assert not [p for p in root.rglob(".*") if p.is_file()]


def test_build_graph_rerun_identical(pipeline, tmp_path):
    root, paths = pipeline
    assert main(["build-graph", *paths[:4], "--out", str(tmp_path / "g2"), *SMALL]) == 0
    assert digest(tmp_path / "g2") == digest(root / "graph")


def test_eval_writes_report(pipeline, capsys):
    root, paths = pipeline
    out = root / "report.json"
    assert main(["eval", *paths, "--baselines", "--out", str(out)]) == EXIT_OK
    rep = json.loads(out.read_text())
    assert {"hgamn", "lexical"} <= set(rep["models"])
    assert 0 <= rep["models"]["hgamn"]["MRR"] <= 1
    assert "MRR" in capsys.readouterr().out


def test_rank_table_and_json(pipeline, capsys):
    root, paths = pipeline
    args = ["rank", *paths, "--query", "tower", "--lat", "10", "--lon", "10"]
    assert main(args) == 0
    table = capsys.readouterr().out.strip().splitlines()
    assert table[0].split("\t") == ["rank", "poi_id", "score", "name"]
    assert main(args + ["--json"]) == 0
    rows = json.loads(capsys.readouterr().out)
    assert [r["poi_id"] for r in rows] == [line.split("\t")[1] for line in table[1:]]
    assert [r["rank"] for r in rows] == list(range(1, len(rows) + 1))


def test_rank_empty_candidates(pipeline, capsys):
    _, paths = pipeline
    assert main(["rank", *paths, "--query", "x", "--lat", "0", "--lon", "0", "--candidates", ""]) == 0
    assert capsys.readouterr().out.strip().splitlines() == ["rank\tpoi_id\tscore\tname"]


def test_rank_unknown_poi_and_missing_checkpoint(pipeline, tmp_path):
    _, paths = pipeline
    assert main(["rank", *paths, "--query", "x", "--lat", "0", "--lon", "0", "--candidates", "zzz"]) == EXIT_DATA
    bad = paths[:-1] + [str(tmp_path / "none")]
    assert main(["rank", *bad, "--query", "x", "--lat", "0", "--lon", "0"]) == EXIT_DATA


def test_repl(pipeline, capsys, monkeypatch):
    import io
    _, paths = pipeline
    monkeypatch.setattr("sys.stdin", io.StringIO("10 10 tower\nbad line\n\n"))
    assert main(["repl", *paths, "--json"]) == 0
    out = capsys.readouterr()
    assert len(json.loads(out.out.splitlines()[0])) > 0
    assert "error" in out.err


def test_export_features(pipeline):
    root, paths = pipeline
    out = root / "features.jsonl"
    assert main(["export-features", *paths, "--out", str(out), "--top-n", "3"]) == 0
    lines = out.read_text().splitlines()
    first = json.loads(lines[0])
    assert set(first) == {"query_id", "poi_id", "probability"}
    assert 0 < first["probability"] < 1
    again = root / "features2.jsonl"
    assert main(["export-features", *paths, "--out", str(again), "--top-n", "3"]) == 0
    assert again.read_bytes() == out.read_bytes()


def test_ingest_report(pipeline, tmp_path):
    root, paths = pipeline
    out = tmp_path / "ingest.json"
    assert main(["ingest", *paths[:4], "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["catalog"]["valid"] == 30 and rep["logs"]["valid"] == 200
    bad = tmp_path / "bad.jsonl"
    bad.write_text((root / "data" / "catalog.jsonl").read_text() + "{oops\n")
    assert main(["ingest", "--catalog", str(bad)]) == EXIT_DATA


def test_usage_errors(tmp_path):
    assert main([]) == EXIT_USAGE
    assert main(["train"]) == EXIT_USAGE
    assert main(["build-graph", "--out", str(tmp_path / "g"), "--catalog", str(tmp_path / "missing")]) == EXIT_DATA
    assert main(["eval", "--variant", "bogus"]) == EXIT_USAGE


def test_gradcheck_command(capsys):
    assert main(["gradcheck"]) == EXIT_OK
    assert "max relative error" in capsys.readouterr().out


def test_gradcheck_fails_on_tight_tolerance():
    assert main(["gradcheck", "--tol", "1e-30"]) == 4
