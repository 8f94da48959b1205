import json

import numpy as np
import pytest

from photorec.checkpoint import CheckpointError, load_checkpoint, load_factors, save_checkpoint, save_factors
from photorec.data import assign_folds
from photorec.evaluation import RecommendationQuery
from photorec.mining import ClusterConfig
from photorec.model import TrainingConfig
from photorec.pipeline import make_splits
from photorec.synthetic import SyntheticSpec, gen_synthetic
from photorec.training import (
    Adam,
    Corpus,
    TrainedModel,
    build_training_data,
    evaluate_splits,
    recommend,
    train,
)
from photorec.wmf import WmfConfig, factorize

SMALL = dict(d=6, hidden=(8,), omega=4, u_pho=12, l_pho=12, batch_size=4, lr=1e-2)
CLUSTER = ClusterConfig(100.0, 2)
WMF = WmfConfig(f=3, sweeps=5)


@pytest.fixture(scope="module")
def small():
    sd = gen_synthetic(SyntheticSpec(n_users=10, n_cities=3, attractions_per_city=3, photos_per_visit=3,
                                     d_in=8, visits_per_city=2, seed=4))
    corpus = Corpus(sd.photos, sd.features).prepare(CLUSTER)
    splits, _ = make_splits(corpus)
    held = assign_folds(splits, 1, 0)[0]
    return corpus, splits, held


def fit(small, **kw) -> TrainedModel:
    corpus, _, held = small
    return train(corpus, TrainingConfig(**{**SMALL, **kw}), WMF, CLUSTER, held)


def test_zero_epochs_leaves_parameters_at_initialisation(small):
    a, b = fit(small, epochs=0), fit(small, epochs=3)
    assert a.trace == []
    from photorec.model import init_model

    corpus, _, held = small
    data = build_training_data(corpus, a.config, held)
    init = init_model(data.X.shape[1], factorize(data.counts_train, WMF), a.config)
    for k, v in init.arrays(True).items():
        assert np.array_equal(a.params.arrays(True)[k], v)
    assert any(not np.array_equal(a.params.arrays(False)[k], v) for k, v in b.params.arrays(False).items())


def test_same_seed_same_trace_and_loss_decreases(small):
    a, b = fit(small, epochs=8), fit(small, epochs=8)
    assert [r.row() for r in a.trace] == [r.row() for r in b.trace]
    assert a.trace[-1].total < a.trace[0].total
    c = fit(small, epochs=2, seed=5)
    assert [r.row() for r in c.trace] != [r.row() for r in a.trace[:2]]


def test_held_out_cities_are_removed(small):
    corpus, _, held = small
    data = build_training_data(corpus, TrainingConfig(**SMALL), held)
    for user, split in held.items():
        i = data.users.index(user)
        cols = [j for j, c in enumerate(data.attraction_city) if c in split.held_out]
        assert (data.counts_train[i, cols] == 0).all() and (data.mask[i, cols] == 0).all()
        mine = np.flatnonzero(data.photo_user == i)
        assert not any(data.attraction_city[data.photo_attraction[p]] in split.held_out
                       for p in mine if data.photo_attraction[p] >= 0)


def test_latents_frozen_by_default(small):
    m = fit(small, epochs=2)
    corpus, _, held = small
    data = build_training_data(corpus, m.config, held)
    f = factorize(data.counts_train, WMF)
    assert np.array_equal(m.params.factors.HU, f.HU) and np.array_equal(m.params.factors.HL, f.HL)


def test_adam_matches_hand_update():
    x = {"w": np.array([1.0, -2.0])}
    opt = Adam(x, lr=0.1)
    opt.step({"w": np.array([0.5, -0.5])})
    # first step moves each coordinate by lr against the gradient sign
    assert np.allclose(x["w"], [0.9, -1.9], atol=1e-6)


def test_recommend_rules(small):
    m = fit(small, epochs=2)
    corpus, _, held = small
    user, split = sorted(held.items())[0]
    top = recommend(RecommendationQuery(user, split.test_city, 2), m)
    assert len(top) == 2
    city_ids = [a for a, c in zip(m.attractions, m.attraction_city) if c == split.test_city]
    assert set(top) <= set(city_ids)
    visited = m.train_visited[user][0]
    with pytest.raises(ValueError):
        recommend(RecommendationQuery(user, visited, 2), m)
    assert recommend(RecommendationQuery(user, visited, 2), m, allow_visited=True)
    with pytest.raises(KeyError):
        recommend(RecommendationQuery("nobody", split.test_city), m)
    with pytest.raises(KeyError):
        recommend(RecommendationQuery(user, "atlantis"), m)


def test_recommend_singleton_city_and_ties(small):
    m = fit(small, epochs=0)
    user, split = sorted(small[2].items())[0]
    cols = [j for j, c in enumerate(m.attraction_city) if c == split.test_city]
    m.attraction_city = [c if j in cols[:1] or c != split.test_city else "elsewhere"
                         for j, c in enumerate(m.attraction_city)]
    assert recommend(RecommendationQuery(user, split.test_city, 5), m) == [m.attractions[cols[0]]]
    m.attraction_city = [split.test_city] * len(m.attractions)
    m.attraction_emb[:] = m.attraction_emb[0]
    m.train_visited = {}
    assert recommend(RecommendationQuery(user, split.test_city, 3), m) == sorted(m.attractions)[:3]


def test_evaluate_rejects_splits_not_held_out(small):
    m = fit(small, epochs=0)
    corpus, splits, held = small
    other = [s for s in splits if held[s.user_id] != s]
    with pytest.raises(ValueError):
        evaluate_splits(m, other[:1], m_counts(small))


def m_counts(small):
    return small[0].interactions.counts


def test_checkpoint_round_trip_gives_identical_evaluation(small, tmp_path):
    m = fit(small, epochs=2)
    path = tmp_path / "model.json"
    save_checkpoint(m, path)
    back = load_checkpoint(path)
    held = list(m.held_out.values())
    assert evaluate_splits(m, held, m_counts(small)) == evaluate_splits(back, held, m_counts(small))
    assert np.array_equal(m.scores(), back.scores())
    save_checkpoint(back, tmp_path / "again.json")
    assert path.read_bytes() == (tmp_path / "again.json").read_bytes()


def test_checkpoint_errors(small, tmp_path):
    m = fit(small, epochs=1)
    path = tmp_path / "model.json"
    save_checkpoint(m, path)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, expect_d=m.config.d + 1)
    text = path.read_text()
    (tmp_path / "cut.json").write_text(text[: len(text) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "cut.json")
    doc = json.loads(text)
    doc["arrays"] = {**doc["arrays"]}
    key = sorted(k for k in doc["arrays"] if k.startswith("encoder"))[0]
    doc["arrays"][key]["shape"] = [1, 1]
    (tmp_path / "bad.json").write_text(json.dumps(doc))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.json")
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.json")


def test_factors_round_trip(tmp_path):
    M = np.random.default_rng(0).poisson(0.5, size=(5, 4))
    f = factorize(M, WmfConfig(f=2, sweeps=3))
    save_factors(f, list("abcde"), [0, 1, 2, 3], WmfConfig(f=2, sweeps=3), tmp_path / "f.json")
    g, users, atts, cfg = load_factors(tmp_path / "f.json")
    assert np.array_equal(f.HU, g.HU) and np.array_equal(f.HL, g.HL)
    assert users == list("abcde") and atts == [0, 1, 2, 3] and cfg.f == 2
