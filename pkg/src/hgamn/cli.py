"""Command-line pipeline: synth, ingest, build-graph, train, eval, rank, repl,
export-features and gradcheck.

Exit codes: 0 success, 2 usage, 3 data validation, 4 numeric failure.
Every command that writes an artifact also writes ``<artifact>.manifest.json``
(config, input digests, versions); all writes go through a temporary file
and a rename.
"""
from __future__ import annotations

import argparse
import json
import os
import platform
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .datamodel import (
    ConfigError,
    DataValidationError,
    Dataset,
    SearchRecord,
    SynthConfig,
    ingest_catalog,
    ingest_logs,
    sessionize,
    split_dataset,
    synth_generate,
    validation_report,
    write_catalog,
    write_logs,
)
from .evalkit import (
    EvalReport,
    LexicalScorer,
    ModelScorer,
    candidate_lists,
    cross_script_records,
    evaluate,
    write_report,
)
from .graphbuild import build_graph, load_graph, save_graph
from .numerics import NumericError, TrainingStateError, digest
from .numerics.container import ContainerError
from .ranker import FingerprintError, HGAMN, export_features, load_model, rank, save_model, train_model
from .textenc import build_vocab

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


# -- file plumbing ------------------------------------------------------------

def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_via(path, writer) -> None:
    """Run ``writer(tmp_path)`` and rename the result onto ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_manifest(artifact, command: str, cfg: RunConfig | None, inputs: dict, extra: dict | None = None) -> Path:
    artifact = Path(artifact)
    man = {
        "command": command,
        "artifact": artifact.name,
        "artifact_digest": digest(artifact),
        "inputs": {k: {"path": str(v), "sha256": digest(v)} for k, v in sorted(inputs.items()) if v},
        "versions": {"hgamn": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
    }
    if cfg is not None:
        man["config"] = cfg.to_json()
        man["config_fingerprint"] = cfg.fingerprint()
    if extra:
        man.update(extra)
    out = artifact.with_name(artifact.name + ".manifest.json")
    atomic_write_text(out, json.dumps(man, indent=2, sort_keys=True, ensure_ascii=False) + "\n")
    return out


def _need(path, what: str) -> str:
    if not path:
        raise UsageError(f"missing --{what}")
    if not Path(path).exists():
        raise DataValidationError(f"{what} not found: {path}")
    return str(path)


def load_splits(cfg: RunConfig) -> tuple[Dataset, dict[str, Dataset]]:
    catalog = ingest_catalog(_need(cfg.catalog, "catalog"))
    records = ingest_logs(_need(cfg.logs, "logs"), catalog)
    ds = Dataset(catalog, sessionize(records, cfg.session_timeout))
    return ds, split_dataset(ds, seed=cfg.split_seed)


def _load_model(cfg: RunConfig):
    catalog = ingest_catalog(_need(cfg.catalog, "catalog"))
    graph = load_graph(_need(cfg.graph, "graph"))
    model = load_model(_need(cfg.checkpoint, "checkpoint"), graph, catalog)
    return model, catalog


# -- commands -----------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig) -> int:
    sc = SynthConfig(num_pois=args.num_pois, num_queries=args.num_queries, seed=args.synth_seed,
                     languages=tuple(args.languages.split(",")), popularity_skew=args.popularity_skew,
                     cross_language_rate=args.cross_language_rate)
    ds = synth_generate(sc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _atomic_via(out / "catalog.jsonl", lambda p: write_catalog(p, ds.catalog))
    _atomic_via(out / "logs.jsonl", lambda p: write_logs(p, ds.records()))
    for name in ("catalog.jsonl", "logs.jsonl"):
        write_manifest(out / name, "synth", None, {}, {"synth_config": sc.__dict__ | {"languages": list(sc.languages)}})
    print(f"wrote {len(ds.catalog)} POIs and {len(ds.records())} records to {out}")
    return EXIT_OK


def cmd_ingest(args, cfg: RunConfig) -> int:
    _need(cfg.catalog, "catalog")
    report = validation_report(cfg.catalog, cfg.logs or None)
    text = json.dumps(report, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    if args.out:
        atomic_write_text(args.out, text)
        write_manifest(args.out, "ingest", cfg, {"catalog": cfg.catalog, "logs": cfg.logs})
    else:
        sys.stdout.write(text)
    bad = len(report["catalog"]["errors"]) + len(report.get("logs", {}).get("errors", []))
    return EXIT_DATA if bad else EXIT_OK


def cmd_build_graph(args, cfg: RunConfig) -> int:
    out = args.out or cfg.graph
    if not out:
        raise UsageError("missing --out (or --graph)")
    _, splits = load_splits(cfg)
    g = build_graph(splits["train"], d_n=cfg.d_n, top_k=cfg.top_k_queries, seed=cfg.seed,
                    keep_nonpositive_pmi=cfg.keep_nonpositive_pmi, window_multiplicity=cfg.window_multiplicity)
    save_graph(g, out)
    write_manifest(out, "build-graph", cfg, {"catalog": cfg.catalog, "logs": cfg.logs})
    print(f"graph: {g.num_pois} POIs, {g.num_queries} queries, {len(g.app_w)} POI-POI and "
          f"{len(g.apq_w)} POI-query edges -> {out}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    out = args.out or cfg.checkpoint
    if not out:
        raise UsageError("missing --out (or --checkpoint)")
    ds, splits = load_splits(cfg)
    graph = load_graph(_need(cfg.graph, "graph"))
    train = splits["train"]
    model = HGAMN(cfg.model_config(), build_vocab(train), graph, ds.catalog)

    def progress(epoch, loss, _model):
        if not args.quiet:
            print(f"epoch {epoch + 1:3d}  loss {loss:.4f}", flush=True)

    log = train_model(model, train.clicked_records(), cfg.train_config(), progress)
    save_model(model, out, {"run_config": cfg.to_json()})
    write_manifest(out, "train", cfg, {"catalog": cfg.catalog, "logs": cfg.logs, "graph": cfg.graph},
                   {"steps": log.steps, "epoch_loss": log.epoch_loss, "model_fingerprint": model.fingerprint()})
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    ds, splits = load_splits(cfg)
    model, catalog = _load_model(cfg)
    recs = splits[args.split].clicked_records()
    if not recs:
        raise DataValidationError(f"split {args.split!r} has no clicked records")
    models = {"hgamn": evaluate(ModelScorer(model), recs, catalog)}
    extra = {"split": args.split}
    if args.baselines:
        models["lexical"] = evaluate(LexicalScorer(catalog), recs, catalog)
        cross = cross_script_records(recs, catalog)
        if cross:
            extra["cross_script"] = {
                "queries": len(cross),
                "hgamn": evaluate(ModelScorer(model), cross, catalog),
                "lexical": evaluate(LexicalScorer(catalog), cross, catalog),
            }
    report = EvalReport(models, len(recs), model.fingerprint(), extra)
    print(report.table())
    out = args.out or (str(Path(cfg.reports) / "report.json") if cfg.reports else None)
    if out:
        write_report(report, out)
        write_manifest(out, "eval", cfg, {"catalog": cfg.catalog, "logs": cfg.logs, "graph": cfg.graph,
                                           "checkpoint": cfg.checkpoint})
    return EXIT_OK


def _candidates_for(args, catalog, record: SearchRecord) -> list[str]:
    if args.candidates is not None:
        return [c for c in args.candidates.split(",") if c]
    return candidate_lists([record], catalog, args.top_n)[0]


def _print_ranking(items, catalog, as_json: bool) -> None:
    if as_json:
        rows = [{"rank": s.rank, "poi_id": s.poi_id, "name": catalog[s.poi_id].name, "score": s.score}
                for s in items]
        print(json.dumps(rows, ensure_ascii=False))
        return
    print("rank\tpoi_id\tscore\tname")
    for s in items:
        print(f"{s.rank}\t{s.poi_id}\t{s.score:.6f}\t{catalog[s.poi_id].name}")


def cmd_rank(args, cfg: RunConfig) -> int:
    model, catalog = _load_model(cfg)
    rec = SearchRecord("cli", 0.0, args.query, args.lat, args.lon)
    rec.validate()
    _print_ranking(rank(rec, _candidates_for(args, catalog, rec), model), catalog, args.json)
    return EXIT_OK


def cmd_repl(args, cfg: RunConfig) -> int:
    """Lines of ``lat lon query text``; an empty line or EOF ends the loop."""
    model, catalog = _load_model(cfg)
    for line in sys.stdin:
        line = line.strip()
        if not line:
            break
        parts = line.split(None, 2)
        try:
            rec = SearchRecord("repl", 0.0, parts[2], float(parts[0]), float(parts[1]))
            rec.validate()
        except (IndexError, ValueError) as exc:
            print(f"error: expected 'lat lon query' ({exc})", file=sys.stderr)
            continue
        _print_ranking(rank(rec, _candidates_for(args, catalog, rec), model), catalog, args.json)
    return EXIT_OK


def cmd_export_features(args, cfg: RunConfig) -> int:
    if not args.out:
        raise UsageError("missing --out")
    model, catalog = _load_model(cfg)
    records = ingest_logs(_need(cfg.logs, "logs"), catalog)
    cands = candidate_lists(records, catalog, args.top_n)

    def write(tmp):
        with open(tmp, "w", encoding="utf-8") as fh:
            for rec, cs in zip(records, cands):
                for c in cs:
                    fh.write(export_features(rec, c, model, with_vector=args.vectors) + "\n")

    _atomic_via(args.out, write)
    write_manifest(args.out, "export-features", cfg, {"catalog": cfg.catalog, "logs": cfg.logs,
                                                      "graph": cfg.graph, "checkpoint": cfg.checkpoint})
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    from .checks import full_model_gradcheck
    report = full_model_gradcheck(seed=cfg.seed)
    worst = max(report.values())
    for name, err in sorted(report.items()):
        print(f"{err:.3e}  {name}")
    print(f"max relative error {worst:.3e} (tolerance {args.tol:g})")
    return EXIT_OK if worst < args.tol else EXIT_NUMERIC


# -- parser -------------------------------------------------------------------

def _config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("config overrides")
    g.add_argument("--config", help="INI run configuration")
    for name in ("catalog", "logs", "graph", "checkpoint", "reports"):
        g.add_argument(f"--{name}")
    for name, typ in (("seed", int), ("epochs", int), ("batch-size", int), ("lr", float), ("dropout", float),
                      ("d", int), ("d-c", int), ("d-n", int), ("heads", int), ("variant", str),
                      ("score-mode", str), ("dtype", str), ("session-timeout", float), ("split-seed", int),
                      ("top-k-queries", int), ("geohash-precision", int), ("widths", str)):
        g.add_argument(f"--{name}", type=typ, dest=name.replace("-", "_"))
    for name in ("keep-nonpositive-pmi", "window-multiplicity", "masked-attention", "per-type-w1"):
        g.add_argument(f"--{name}", action="store_const", const=True, dest=name.replace("-", "_"))


_OVERRIDE_KEYS = ("catalog", "logs", "graph", "checkpoint", "reports", "seed", "epochs", "batch_size", "lr",
                  "dropout", "d", "d_c", "d_n", "heads", "variant", "score_mode", "dtype", "session_timeout",
                  "split_seed", "top_k_queries", "geohash_precision", "widths", "keep_nonpositive_pmi",
                  "window_multiplicity", "masked_attention", "per_type_w1")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hgamn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic catalog and logs")
    p.add_argument("--out", required=True)
    p.add_argument("--num-pois", type=int, default=200)
    p.add_argument("--num-queries", type=int, default=1000)
    p.add_argument("--synth-seed", type=int, default=0)
    p.add_argument("--languages", default="latin,kana")
    p.add_argument("--popularity-skew", type=float, default=1.1)
    p.add_argument("--cross-language-rate", type=float, default=0.5)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="validate catalog/logs and emit a JSON report")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("build-graph", help="build the POI/query graph from the training split")
    p.add_argument("--out")
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("train", help="train a model checkpoint")
    p.add_argument("--out")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--out")
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p.add_argument("--baselines", action="store_true", help="also score the lexical baseline")
    p.set_defaults(func=cmd_eval)

    for name, func in (("rank", cmd_rank), ("repl", cmd_repl)):
        p = sub.add_parser(name, help="rank candidates for a query" if name == "rank" else "interactive ranking")
        if name == "rank":
            p.add_argument("--query", required=True)
            p.add_argument("--lat", type=float, required=True)
            p.add_argument("--lon", type=float, required=True)
        p.add_argument("--candidates", help="comma-separated poi ids (default: lexical prefilter)")
        p.add_argument("--top-n", type=int, default=10)
        p.add_argument("--json", action="store_true")
        p.set_defaults(func=func)

    p = sub.add_parser("export-features", help="write features.jsonl for an external LTR model")
    p.add_argument("--out")
    p.add_argument("--top-n", type=int, default=10)
    p.add_argument("--vectors", action="store_true", help="include the [q; m] vector")
    p.set_defaults(func=cmd_export_features)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full loss at toy size")
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    for sp in sub.choices.values():
        _config_flags(sp)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        overrides = {k: getattr(args, k, None) for k in _OVERRIDE_KEYS}
        cfg = load_config(args.config, overrides)
        return args.func(args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataValidationError, ContainerError, FingerprintError, LookupError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, TrainingStateError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
