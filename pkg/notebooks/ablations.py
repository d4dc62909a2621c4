# %% [markdown]
# # Graph ablations
# Same seeds and budget for each variant: both edge types, no POI-POI edges,
# no POI-query edges, and no graph layers at all. Small dims here; the
# acceptance test runs the full-size configuration.

# %%
from hgamn.datamodel import SynthConfig, split_dataset, synth_generate
from hgamn.evalkit import run_ablations
from hgamn.ranker import ModelConfig, TrainConfig

ds = synth_generate(SynthConfig(num_pois=150, num_queries=500, cross_language_rate=0.9, popularity_skew=1.3))
sp = split_dataset(ds, seed=0)
print(len(sp["train"].clicked_records()), "train /", len(sp["test"].clicked_records()), "test clicks")

# %%
res = run_ablations(
    sp["train"], sp["test"],
    model_config=ModelConfig(d=32, d_c=16, d_n=32, widths=(32, 48), heads=2),
    train_config=TrainConfig(epochs=10),
    seeds=(0, 1),
    progress=lambda s, v, m: print(f"seed {s} {v:8s} MRR {m['MRR']:.3f}"),
)
print(res.report.table(["MRR", "SR@1", "SR@3"]))
