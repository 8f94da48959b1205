"""Assembling training tensors from records, the joint training loop, and scoring."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .attention import stack_layout
from .data import DatasetSplit, FeatureTable, GeoTaggedPhoto, TouristAttraction
from .encoder import encode
from .evaluation import RecommendationQuery, average_precision_at_k, rank_attractions
from .metric import mine_quintuplets, mine_triplets
from .mining import (
    DEFAULT_TTHR,
    ClusterConfig,
    InteractionMatrix,
    extract_visits,
    interactions_from_visits,
    pdbscan,
    photo_attraction_map,
)
from .model import (
    Graph,
    ModelParams,
    TrainingConfig,
    embeddings,
    init_model,
    pair_logits,
    sigmoid,
    total_loss,
)
from .wmf import LatentFactors, WmfConfig, factorize

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class Corpus:
    """Raw inputs. Attractions and interactions are derived when not given."""

    photos: list[GeoTaggedPhoto]
    features: FeatureTable
    attractions: list[TouristAttraction] | None = None
    interactions: InteractionMatrix | None = None
    t_thr: int = DEFAULT_TTHR

    def prepare(self, cluster: ClusterConfig = ClusterConfig()) -> "Corpus":
        attractions = self.attractions
        if attractions is None:
            attractions = pdbscan(self.photos, cluster)
        interactions = self.interactions
        if interactions is None:
            interactions = interactions_from_visits(extract_visits(self.photos, attractions, self.t_thr), attractions)
        known = {a.attraction_id for a in attractions}
        missing = [a for a in interactions.attractions if a not in known]
        if missing:
            raise ValueError(f"interactions reference attractions not found by clustering: {missing[:5]}")
        return Corpus(self.photos, self.features, attractions, interactions, self.t_thr)


@dataclass
class TrainingData:
    users: list[str]
    attractions: list[int]
    attraction_city: list[str | None]
    X: np.ndarray
    photo_ids: list[str]
    photo_user: np.ndarray
    photo_attraction: np.ndarray  # column index, -1 for noise photos
    times: np.ndarray
    counts_train: np.ndarray
    counts_full: np.ndarray
    mask: np.ndarray
    held_out: dict[str, DatasetSplit]
    u_pho: int
    l_pho: int

    def __post_init__(self):
        n = len(self.photo_ids)
        self.user_layout = stack_layout(
            [np.flatnonzero(self.photo_user == i) for i in range(len(self.users))], self.times, self.u_pho, n
        )
        self.attraction_layout = stack_layout(
            [np.flatnonzero(self.photo_attraction == j) for j in range(len(self.attractions))], self.times, self.l_pho, n
        )
        self.R = (self.counts_train > 0).astype(np.float64)
        self.labelled = np.flatnonzero(self.photo_attraction >= 0)

    def graph(self, mask: np.ndarray | None = None) -> Graph:
        return Graph(self.X, self.user_layout, self.attraction_layout, self.R, self.mask if mask is None else mask)

    def city_columns(self, city: str) -> np.ndarray:
        return np.array([j for j, c in enumerate(self.attraction_city) if c == city], dtype=np.int64)

    def train_visited(self) -> dict[str, list[str]]:
        out = {}
        for i, u in enumerate(self.users):
            out[u] = sorted({self.attraction_city[j] for j in np.flatnonzero(self.counts_train[i]) if self.attraction_city[j]})
        return out


def build_training_data(
    corpus: Corpus,
    config: TrainingConfig,
    held_out: Mapping[str, DatasetSplit] | None = None,
) -> TrainingData:
    """Training tensors with each held-out user's validation and test cities removed.

    Removed: the user's photos in those cities (from every stack and from
    mining), their visit counts (set to zero for factorization) and the
    corresponding pairs in the prediction loss.
    """
    if corpus.attractions is None or corpus.interactions is None:
        raise ValueError("corpus must be prepared (attractions and interactions)")
    held_out = dict(held_out or {})
    inter = corpus.interactions
    users = list(inter.users)
    upos = inter.user_pos()
    apos = inter.attraction_pos()
    city_of = {a.attraction_id: a.city for a in corpus.attractions}
    attraction_city = [city_of[a] for a in inter.attractions]
    member = photo_attraction_map(corpus.attractions)
    unknown = set(held_out) - set(users)
    if unknown:
        raise ValueError(f"held-out users without interactions: {sorted(unknown)[:5]}")

    keep_ids, pu, pa, times, keys = [], [], [], [], []
    for p in corpus.photos:
        if p.user_id not in upos:
            continue
        a = member.get(p.photo_id)
        if a is not None and a not in apos:
            continue
        if a is None and not config.user_noise_photos:
            continue
        city = city_of[a] if a is not None else p.city
        split = held_out.get(p.user_id)
        if split is not None and city in split.held_out:
            continue
        keep_ids.append(p.photo_id)
        keys.append(p.feature_key)
        pu.append(upos[p.user_id])
        pa.append(apos[a] if a is not None else -1)
        times.append(p.taken_at)
    X = corpus.features.rows(keys) if keys else np.zeros((0, corpus.features.dim))

    counts = inter.counts.copy()
    mask = np.ones(counts.shape, dtype=np.float64)
    for user, split in held_out.items():
        i = upos[user]
        cols = [j for j, c in enumerate(attraction_city) if c in split.held_out]
        counts[i, cols] = 0
        mask[i, cols] = 0.0
    return TrainingData(
        users=users,
        attractions=list(inter.attractions),
        attraction_city=attraction_city,
        X=X,
        photo_ids=keep_ids,
        photo_user=np.array(pu, dtype=np.int64),
        photo_attraction=np.array(pa, dtype=np.int64),
        times=np.array(times, dtype=np.int64),
        counts_train=counts,
        counts_full=inter.counts.copy(),
        mask=mask,
        held_out=held_out,
        u_pho=config.u_pho,
        l_pho=config.l_pho,
    )


# -- optimizer ------------------------------------------------------------------

class Adam:
    """Adaptive-moment updates applied in place to a dict of arrays."""

    def __init__(self, arrays: Mapping[str, np.ndarray], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.arrays = arrays
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(a) for k, a in arrays.items()}
        self.v = {k: np.zeros_like(a) for k, a in arrays.items()}
        self.t = 0

    def step(self, grads: Mapping[str, np.ndarray]):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k in sorted(self.arrays):
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            self.arrays[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- training -------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    l_quin: float
    l_pred: float
    reg: float
    total: float
    val_map5: float
    n_mined: int = 0

    def row(self) -> str:
        return (f"{self.epoch}\t{self.l_quin!r}\t{self.l_pred!r}\t{self.reg!r}\t"
                f"{self.total!r}\t{self.val_map5!r}")


METRICS_HEADER = "epoch\tl_quin\tl_pred\treg\ttotal\tval_map5"


def mine(data: TrainingData, F: np.ndarray, params: ModelParams, config: TrainingConfig, rng) -> np.ndarray | None:
    if config.variant == "no-visual-similarity":
        return None
    labelled = data.labelled
    if config.variant == "MEAL":
        out = mine_quintuplets(labelled, F, data.photo_user, data.photo_attraction, params.margins,
                               params.order, rng, candidates=labelled)
        return out.indices
    out = mine_triplets(labelled, F, data.photo_user, data.photo_attraction, config.variant,
                        config.triplet_margin, rng, config.max_triplet_positives, candidates=labelled)
    return out.indices


def _batch_mask(data: TrainingData, rows: np.ndarray, config: TrainingConfig, rng) -> np.ndarray:
    mask = np.zeros_like(data.mask)
    mask[rows] = data.mask[rows]
    if config.neg_ratio > 0:
        for i in rows:
            pos = np.flatnonzero((data.R[i] > 0) & (mask[i] > 0))
            neg = np.flatnonzero((data.R[i] == 0) & (mask[i] > 0))
            n_keep = min(len(neg), int(np.ceil(config.neg_ratio * max(len(pos), 1))))
            keep = rng.choice(neg, size=n_keep, replace=False) if n_keep else np.empty(0, dtype=np.int64)
            mask[i, neg] = 0.0
            mask[i, keep] = 1.0
    return mask


def validation_map(data: TrainingData, params: ModelParams, config: TrainingConfig, k: int = 5) -> float:
    if not data.held_out:
        return float("nan")
    U, L, _ = embeddings(params, data.graph(), config.pooling)
    scores = pair_logits(U, L, params.head)[0]
    upos = {u: i for i, u in enumerate(data.users)}
    aps = []
    for user in sorted(data.held_out):
        split = data.held_out[user]
        aps.append(score_city(data, scores, upos[user], split.validation_city, k))
    return float(np.mean(aps))


def score_city(data: TrainingData, scores: np.ndarray, i: int, city: str, k: int) -> float:
    cols = data.city_columns(city)
    if len(cols) == 0:
        raise ValueError(f"city {city!r} has no attractions")
    ranked = rank_attractions(scores[i, cols], cols)[:k]
    flags = [int(data.counts_full[i, j] > 0) for j in ranked]
    return average_precision_at_k(flags, k)


def train_joint(data: TrainingData, factors: LatentFactors, config: TrainingConfig):
    """Joint training of encoder, pooling and head on top of fixed latent factors.

    Returns ``(params, trace)``. Every epoch encodes all photos, mines
    quintuplets (or triplets) on the current features, then takes one Adam
    step per user batch.
    """
    if len(data.X) == 0:
        raise ValueError("no training photos")
    params = init_model(data.X.shape[1], factors, config)
    trainable = params.arrays(config.finetune_latents)
    opt = Adam(trainable, config.lr, config.beta1, config.beta2, config.adam_eps)
    rng = np.random.default_rng([config.seed, 7])
    n_users = len(data.users)
    batch = config.batch_size or n_users
    trace: list[EpochRecord] = []
    best = (-np.inf, None)
    for epoch in range(config.epochs):
        F = encode(data.X, params.encoder)
        mined = mine(data, F, params, config, rng)
        if mined is not None and len(mined) == 0:
            raise ValueError("no valid quintuplet/triplet anchors for the chosen variant")
        order = rng.permutation(n_users) if batch < n_users else np.arange(n_users)
        sums = np.zeros(3)
        for lo in range(0, n_users, batch):
            rows = np.sort(order[lo:lo + batch])
            mask = _batch_mask(data, rows, config, rng)
            sub = mined
            if mined is not None and batch < n_users:
                sub = mined[np.isin(data.photo_user[mined[:, 0]], rows)]
            parts, grads = total_loss(params, data.graph(mask), config, sub)
            if not np.isfinite(parts.total):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}: sim={parts.l_sim} pred={parts.l_pred} reg={parts.reg}"
                )
            opt.step(grads)
            sums += (parts.l_sim, parts.l_pred, parts.reg)
        val = validation_map(data, params, config)
        rec = EpochRecord(epoch, float(sums[0]), float(sums[1]), float(sums[2]), float(sums.sum()), val,
                          0 if mined is None else len(mined))
        trace.append(rec)
        log.info("epoch %d sim=%.4f pred=%.4f reg=%.6f val_map5=%.4f mined=%d",
                 epoch, rec.l_quin, rec.l_pred, rec.reg, val, rec.n_mined)
        if config.select_best and val > best[0]:
            best = (val, {k: a.copy() for k, a in trainable.items()})
    if config.select_best and best[1] is not None:
        for k, a in best[1].items():
            trainable[k][...] = a
    return params, trace


# -- trained model --------------------------------------------------------------

@dataclass
class TrainedModel:
    params: ModelParams
    config: TrainingConfig
    wmf_config: WmfConfig
    cluster_config: ClusterConfig
    users: list[str]
    attractions: list[int]
    attraction_city: list[str | None]
    train_visited: dict[str, list[str]]
    held_out: dict[str, DatasetSplit]
    user_emb: np.ndarray
    attraction_emb: np.ndarray
    trace: list[EpochRecord] = field(default_factory=list)
    t_thr: int = DEFAULT_TTHR

    def scores(self) -> np.ndarray:
        return pair_logits(self.user_emb, self.attraction_emb, self.params.head)[0]

    def probabilities(self) -> np.ndarray:
        return sigmoid(self.scores())


def train(
    corpus: Corpus,
    config: TrainingConfig = TrainingConfig(),
    wmf_config: WmfConfig = WmfConfig(),
    cluster_config: ClusterConfig = ClusterConfig(),
    held_out: Mapping[str, DatasetSplit] | None = None,
) -> TrainedModel:
    """Cluster (if needed), factorize the training counts, then train jointly."""
    corpus = corpus.prepare(cluster_config)
    data = build_training_data(corpus, config, held_out)
    factors = factorize(data.counts_train, wmf_config)
    params, trace = train_joint(data, factors, config)
    U, L, _ = embeddings(params, data.graph(), config.pooling)
    return TrainedModel(
        params=params,
        config=config,
        wmf_config=wmf_config,
        cluster_config=cluster_config,
        users=data.users,
        attractions=data.attractions,
        attraction_city=data.attraction_city,
        train_visited=data.train_visited(),
        held_out=dict(data.held_out),
        user_emb=U,
        attraction_emb=L,
        trace=trace,
        t_thr=corpus.t_thr,
    )


def recommend(query: RecommendationQuery, model: TrainedModel, allow_visited: bool = False) -> list[int]:
    """Top-k attraction ids in the query city by predicted visit probability."""
    try:
        i = model.users.index(query.user_id)
    except ValueError:
        raise KeyError(f"unknown user {query.user_id!r}") from None
    cols = [j for j, c in enumerate(model.attraction_city) if c == query.city]
    if not cols:
        raise KeyError(f"unknown city {query.city!r}")
    if not allow_visited and query.city in model.train_visited.get(query.user_id, ()):
        raise ValueError(f"user {query.user_id!r} already visited {query.city!r} in the training data")
    L = model.attraction_emb[cols]
    U = np.repeat(model.user_emb[i][None, :], len(cols), axis=0)
    from .model import predict

    probs = predict(U, L, model.params.head)
    ids = [model.attractions[j] for j in cols]
    return rank_attractions(probs, ids)[: query.k]


def split_key(split: DatasetSplit) -> str:
    return f"{split.user_id}|{split.validation_city}|{split.test_city}"


def evaluate_splits(model: TrainedModel, splits: Sequence[DatasetSplit], counts_full: np.ndarray,
                    ks: Sequence[int] = (5, 10), conventional: bool = False) -> dict[int, dict[str, float]]:
    """Per-split test AP@k. Every split must be one the model held out."""
    out: dict[int, dict[str, float]] = {k: {} for k in ks}
    scores = model.scores()
    upos = {u: i for i, u in enumerate(model.users)}
    for s in splits:
        held = model.held_out.get(s.user_id)
        if held is None or held.held_out != s.held_out:
            raise ValueError(f"split {split_key(s)} was not held out when this model was trained")
        i = upos[s.user_id]
        cols = [j for j, c in enumerate(model.attraction_city) if c == s.test_city]
        if not cols:
            raise ValueError(f"test city {s.test_city!r} has no attractions")
        ranked = rank_attractions(scores[i, cols], cols)
        for k in ks:
            flags = [int(counts_full[i, j] > 0) for j in ranked[:k]]
            out[k][split_key(s)] = average_precision_at_k(flags, k, conventional,
                                                          n_relevant=int((counts_full[i, cols] > 0).sum()))
    return out


def aggregate_map(per_split: Mapping[str, float]) -> tuple[float, float]:
    """(mean over segments, mean over users of their per-segment mean)."""
    if not per_split:
        raise ValueError("no segments")
    seg = float(np.mean(list(per_split.values())))
    by_user: dict[str, list[float]] = {}
    for key, v in per_split.items():
        by_user.setdefault(key.split("|")[0], []).append(v)
    return seg, float(np.mean([np.mean(v) for v in by_user.values()]))
