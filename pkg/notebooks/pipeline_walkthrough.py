# %% [markdown]
# # Pipeline walkthrough
# Synthetic logs -> sessions -> graph -> a short training run -> ranking a
# cross-script query. Small dimensions so the whole script runs in about a minute.

# %%
from collections import Counter

import numpy as np

from hgamn.datamodel import SynthConfig, split_dataset, synth_generate
from hgamn.evalkit import LexicalScorer, ModelScorer, cross_script_records, evaluate
from hgamn.geocode import geohash_bounds, geohash_encode
from hgamn.graphbuild import build_graph
from hgamn.ranker import HGAMN, ModelConfig, TrainConfig, rank, train_model
from hgamn.textenc import build_vocab

# %% Data
ds = synth_generate(SynthConfig(num_pois=200, num_queries=1000, seed=0))
splits = split_dataset(ds, seed=0)
train, test = splits["train"], splits["test"]
print(len(ds.catalog), "POIs,", len(ds.sessions), "sessions")
print({k: len(v.clicked_records()) for k, v in splits.items()})

poi = next(iter(ds.catalog.values()))
print(poi)
r = train.clicked_records()[0]
print(repr(r.query_text), "->", ds.catalog[r.clicked_poi_id].name)

# %% Popularity is heavy-tailed
clicks = Counter(r.clicked_poi_id for r in ds.clicked_records())
top = sum(n for _, n in clicks.most_common(20)) / sum(clicks.values())
print(f"{len(clicks)} of {len(ds.catalog)} POIs ever clicked; top decile share {top:.2f}")

# %% Geohash cells
g = geohash_encode(poi.lat, poi.lon, 10)
print(g, geohash_bounds(g[:5]))

# %% Graph
graph = build_graph(train, d_n=32)
deg = np.bincount(np.concatenate([graph.app_src, graph.app_dst]), minlength=graph.num_pois)
print(f"{graph.num_queries} query nodes, {len(graph.app_w)} POI-POI edges, {len(graph.apq_w)} POI-query edges")
print("isolated POIs (no POI-POI edge):", int((deg == 0).sum()))
print("PMI range", graph.app_w.min().round(3), graph.app_w.max().round(3))

# %% Short training run
cfg = ModelConfig(d=32, d_c=16, d_n=32, widths=(32, 48), heads=2, dropout=0.1)
model = HGAMN(cfg, build_vocab(train), graph, ds.catalog)
log = train_model(model, train.clicked_records(), TrainConfig(epochs=8),
                  lambda e, loss, m: print(f"epoch {e + 1} loss {loss:.3f}"))

# %% Evaluation on logged candidate lists
for name, scorer in (("hgamn", ModelScorer(model)), ("lexical", LexicalScorer(ds.catalog))):
    m = evaluate(scorer, test.clicked_records(), ds.catalog)
    print(f"{name:8s} MRR {m['MRR']:.3f}  SR@1 {m['SR@1']:.3f}  SR@3 {m['SR@3']:.3f}")

cross = cross_script_records(test.clicked_records(), ds.catalog)
print(len(cross), "test queries share no letter with the clicked name")

# %% Ranking one query written in the other script
q = cross[0]
print(repr(q.query_text), "clicked", q.clicked_poi_id, ds.catalog[q.clicked_poi_id].name)
for s in rank(q, list(q.shown_poi_ids), model)[:5]:
    print(s.rank, s.poi_id, f"{s.score:.3f}", ds.catalog[s.poi_id].name)
