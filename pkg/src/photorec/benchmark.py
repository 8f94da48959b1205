"""Directional benchmark on the planted S1 collection: one held-out split per user, several variants per seed."""
from __future__ import annotations

import dataclasses
from typing import Sequence

from .data import assign_folds
from .mining import ClusterConfig
from .model import TrainingConfig
from .pipeline import VARIANT_PRESETS, make_splits
from .synthetic import S1, S1_TRAINING, S1_WMF, SyntheticSpec, gen_synthetic
from .training import Corpus, aggregate_map, evaluate_splits, train
from .wmf import WmfConfig

DEFAULT_VARIANTS = ("MEAL", "no-visual-similarity", "MEAL-average")


def s1_run(seed: int, variants: Sequence[str] = DEFAULT_VARIANTS, spec: SyntheticSpec = S1,
           epochs: int | None = None) -> dict[str, float]:
    """Test MAP@5 (mean over held-out segments) per variant for one seed.

    The seed drives the generated collection, the split assignment and every
    model. All variants share the same corpus, splits and factorization seed.
    """
    data = gen_synthetic(dataclasses.replace(spec, seed=seed))
    cluster = ClusterConfig()
    corpus = Corpus(data.photos, data.features).prepare(cluster)
    splits, _ = make_splits(corpus)
    fold = assign_folds(splits, 1, seed)[0]
    wmf = WmfConfig(**{**S1_WMF, "seed": seed})
    out = {}
    for name in variants:
        variant, pooling = VARIANT_PRESETS[name]
        kw = {**S1_TRAINING, "variant": variant, "pooling": pooling, "seed": seed}
        if epochs is not None:
            kw["epochs"] = epochs
        model = train(corpus, TrainingConfig(**kw), wmf, cluster, fold)
        ap = evaluate_splits(model, [s for _, s in sorted(fold.items())], corpus.interactions.counts, ks=(5,))
        out[name] = aggregate_map(ap[5])[0]
    return out
