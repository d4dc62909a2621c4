"""Toy-size gradient checks of the composite model, shared by the CLI and tests."""
from __future__ import annotations

import numpy as np

from .datamodel import SynthConfig, synth_generate
from .graphbuild import build_graph
from .numerics import grad_check_report, precision
from .ranker import HGAMN, ModelConfig, batch_loss
from .textenc import build_vocab


def toy_model(seed: int = 0, variant: str = "full", d: int = 8, **overrides) -> tuple[HGAMN, list]:
    """A float64 model at ``d = d_n = 8`` over a small synthetic corpus, plus its clicked records."""
    ds = synth_generate(SynthConfig(num_pois=12, num_queries=40, num_cities=2, seed=seed))
    graph = build_graph(ds, d_n=d, seed=seed)
    cfg = ModelConfig(d=d, d_c=4, d_n=d, widths=(8, 12), heads=2, max_len=6, geohash_precision=4,
                      dropout=0.0, variant=variant, dtype="float64", seed=seed, **overrides)
    return HGAMN(cfg, build_vocab(ds), graph, ds.catalog), ds.clicked_records()


def toy_batch(records, size: int = 2) -> list:
    batch, seen = [], set()
    for r in records:
        if r.clicked_poi_id not in seen:
            seen.add(r.clicked_poi_id)
            batch.append(r)
        if len(batch) == size:
            break
    return batch


# Below this gradient size a coordinate is compared absolutely: float64 central
# differences of an O(1) loss carry ~1e-11 of noise at epsilon = 1e-5.
COMPOSITE_FLOOR = 1e-6


def perturb(store, scale: float = 0.5, seed: int = 0) -> None:
    """Move every parameter to a U(-scale, scale) point; at the default init the
    two-query loss sits at ln 2 and most gradients are below 1e-6."""
    rng = np.random.default_rng(seed)
    for p in store.values():
        p.data[...] = rng.uniform(-scale, scale, p.data.shape)


def full_model_gradcheck(seed: int = 0, variant: str = "full", batch_size: int = 2,
                         max_per_param: int | None = 6, floor: float = COMPOSITE_FLOOR) -> dict[str, float]:
    """Per-parameter max relative error of the in-batch loss at toy size."""
    model, records = toy_model(seed, variant)
    perturb(model.store, seed=seed)
    batch = toy_batch(records, batch_size)
    with precision(np.float64):
        return grad_check_report(lambda: batch_loss(model, batch), model.store,
                                 max_per_param=max_per_param, rng=np.random.default_rng(seed), floor=floor)
