"""Stage-by-stage batch pipeline: load, cluster, split, factorize + train, evaluate."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .data import (
    DatasetSplit,
    FeatureTable,
    GeoTaggedPhoto,
    assign_cities,
    assign_folds,
    atomic_write_text,
    enumerate_splits,
    parse_city_table,
    parse_feature_table,
    parse_photo_table,
    format_splits,
)
from .evaluation import VariantScores, ablation_report, format_report
from .mining import (
    DEFAULT_TTHR,
    ClusterConfig,
    extract_visits,
    format_attractions,
    format_interactions,
    visited_cities,
)
from .model import TrainingConfig
from .training import METRICS_HEADER, Corpus, TrainedModel, aggregate_map, evaluate_splits, train
from .wmf import WmfConfig

log = logging.getLogger(__name__)

# Named ablation variants: objective variant plus pooling mode.
VARIANT_PRESETS = {
    "MEAL": ("MEAL", "attention"),
    "no-visual-similarity": ("no-visual-similarity", "attention"),
    "U": ("U", "attention"),
    "L": ("L", "attention"),
    "U/L": ("U/L", "attention"),
    "U&L": ("U&L", "attention"),
    "MEAL-max": ("MEAL", "max"),
    "MEAL-average": ("MEAL", "average"),
}


class InputError(ValueError):
    """Bad paths or malformed inputs (exit code 2 at the command line)."""


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: BaseException):
        self.stage = stage
        self.cause = exc
        self.code = 2 if isinstance(exc, (InputError, OSError, ValueError, KeyError)) else 1
        super().__init__(f"stage {stage!r} failed: {exc}")


@dataclass
class PipelineConfig:
    photos: str
    features: str
    out_dir: str
    cities: str | None = None
    t_thr: int = DEFAULT_TTHR
    min_cities: int = 3
    n_folds: int = 1
    ks: tuple[int, ...] = (5, 10)
    conventional_ap: bool = False
    seed: int = 0
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    wmf: WmfConfig = field(default_factory=WmfConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)

    def validate(self):
        for p in (self.photos, self.features) + ((self.cities,) if self.cities else ()):
            if not os.path.isfile(p):
                raise InputError(f"input file not found: {p}")
        if self.n_folds < 1 or self.min_cities < 3:
            raise InputError("n_folds must be >= 1 and min_cities >= 3")
        if not self.ks or min(self.ks) < 1:
            raise InputError("k values must be positive")
        if self.t_thr <= 0:
            raise InputError("t_thr must be positive")
        self.training.validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["training"] = self.training.to_dict()
        d["ks"] = list(self.ks)
        return d


def read_photos(path, cities_path=None) -> list[GeoTaggedPhoto]:
    with open(path, encoding="utf-8") as fh:
        photos = parse_photo_table(fh)
    if cities_path:
        with open(cities_path, encoding="utf-8") as fh:
            photos = assign_cities(photos, parse_city_table(fh))
    return photos


def read_features(path) -> FeatureTable:
    with open(path, encoding="utf-8") as fh:
        return parse_feature_table(fh)


def make_splits(corpus: Corpus, min_cities: int = 3) -> tuple[list[DatasetSplit], dict]:
    visits = extract_visits(corpus.photos, corpus.attractions, corpus.t_thr)
    return enumerate_splits(visited_cities(visits, corpus.attractions), min_cities)


def _suffix(fold: int, n_folds: int) -> str:
    return "" if n_folds == 1 else f".fold{fold}"


def metrics_tsv(model: TrainedModel) -> str:
    return "\n".join([METRICS_HEADER] + [r.row() for r in model.trace]) + "\n"


def evaluation_tsv(name: str, ap: dict[int, dict[str, float]]) -> str:
    """Both MAP aggregations: over (user, segment) pairs and over users."""
    out = ["variant\tk\taggregation\tmap\tstd\tn"]
    for k in sorted(ap):
        vals = np.array(list(ap[k].values()))
        seg, usr = aggregate_map(ap[k])
        n_users = len({key.split("|")[0] for key in ap[k]})
        out.append(f"{name}\t{k}\tsegment\t{seg:.6f}\t{vals.std():.6f}\t{len(vals)}")
        out.append(f"{name}\t{k}\tuser\t{usr:.6f}\t\t{n_users}")
    return "\n".join(out) + "\n"


def segments_tsv(ap: dict[int, dict[str, float]]) -> str:
    ks = sorted(ap)
    out = ["user_id\tvalidation_city\ttest_city\t" + "\t".join(f"ap@{k}" for k in ks)]
    for key in sorted(ap[ks[0]]):
        out.append(key.replace("|", "\t") + "\t" + "\t".join(repr(ap[k][key]) for k in ks))
    return "\n".join(out) + "\n"


class Pipeline:
    """Runs stages in order; any failure is re-raised as a :class:`StageError`."""

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.corpus: Corpus | None = None
        self.folds: list[dict[str, DatasetSplit]] = []

    def _stage(self, name, fn, *args):
        log.info("stage %s", name)
        try:
            return fn(*args)
        except StageError:
            raise
        except Exception as exc:  # noqa: BLE001 - every failure is reported by stage name
            raise StageError(name, exc) from exc

    def _out(self, name: str) -> str:
        return os.path.join(self.config.out_dir, name)

    def load(self):
        cfg = self.config
        cfg.validate()
        photos = read_photos(cfg.photos, cfg.cities)
        features = read_features(cfg.features)
        self.corpus = Corpus(photos, features, t_thr=cfg.t_thr)

    def cluster(self):
        self.corpus = self.corpus.prepare(self.config.cluster)
        os.makedirs(self.config.out_dir, exist_ok=True)
        atomic_write_text(self._out("attractions.tsv"), format_attractions(self.corpus.attractions))
        atomic_write_text(self._out("interactions.tsv"), format_interactions(self.corpus.interactions))
        log.info("%d attractions, %d users", len(self.corpus.attractions), len(self.corpus.interactions.users))

    def split(self):
        splits, summary = make_splits(self.corpus, self.config.min_cities)
        log.info("splits: %s", summary)
        if not splits:
            raise InputError(f"no user visited >= {self.config.min_cities} cities; nothing to evaluate")
        self.folds = assign_folds(splits, self.config.n_folds, self.config.seed)
        used = [s for fold in self.folds for _, s in sorted(fold.items())]
        atomic_write_text(self._out("splits.tsv"), format_splits(used))

    def train_variant(self, training: TrainingConfig, tag: str = "") -> dict[int, dict[str, float]]:
        cfg = self.config
        merged: dict[int, dict[str, float]] = {k: {} for k in cfg.ks}
        for f, fold in enumerate(self.folds):
            if not fold:
                continue
            model = train(self.corpus, training, cfg.wmf, cfg.cluster, fold)
            sfx = tag + _suffix(f, len(self.folds))
            save_checkpoint(model, self._out(f"model{sfx}.json"))
            atomic_write_text(self._out(f"metrics{sfx}.tsv"), metrics_tsv(model))
            ap = evaluate_splits(model, [s for _, s in sorted(fold.items())], self.corpus.interactions.counts,
                                 cfg.ks, cfg.conventional_ap)
            for k in cfg.ks:
                merged[k].update(ap[k])
        return merged

    def run(self) -> dict[int, dict[str, float]]:
        self._stage("load", self.load)
        self._stage("cluster", self.cluster)
        self._stage("split", self.split)
        ap = self._stage("train", self.train_variant, self.config.training)
        self._stage("evaluate", self._report, ap)
        return ap

    def _report(self, ap):
        atomic_write_text(self._out("report.tsv"), evaluation_tsv(self.config.training.variant, ap))
        atomic_write_text(self._out("segments.tsv"), segments_tsv(ap))
        atomic_write_text(self._out("config.json"),
                          json.dumps(self.config.to_dict(), indent=1, sort_keys=True) + "\n")

    def ablate(self, names: Sequence[str], alpha: float = 0.05) -> list[dict]:
        unknown = [n for n in names if n not in VARIANT_PRESETS]
        if unknown:
            raise StageError("ablate", InputError(f"unknown variants {unknown}; known: {list(VARIANT_PRESETS)}"))
        self._stage("load", self.load)
        self._stage("cluster", self.cluster)
        self._stage("split", self.split)
        scores = []
        for name in names:
            variant, pooling = VARIANT_PRESETS[name]
            training = TrainingConfig.from_dict({**self.config.training.to_dict(), "variant": variant, "pooling": pooling})
            tag = "." + name.replace("/", "-or-").replace("&", "-and-")
            ap = self._stage(f"train[{name}]", self.train_variant, training, tag)
            scores.append(VariantScores(name, ap))
        reference = "MEAL" if "MEAL" in names else names[0]
        rows = self._stage("evaluate", ablation_report, scores, self.config.ks, reference, alpha)
        atomic_write_text(self._out("ablation.tsv"), format_report(rows, self.config.ks))
        return rows


def run_pipeline(config: PipelineConfig) -> dict[int, dict[str, float]]:
    return Pipeline(config).run()
