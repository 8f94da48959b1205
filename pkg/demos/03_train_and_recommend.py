"""Train the joint model on benchmark S1, evaluate one held-out city per user, and recommend.

Run: python3 demos/03_train_and_recommend.py   (about 15 s)
"""
from photorec.data import assign_folds
from photorec.evaluation import RecommendationQuery
from photorec.mining import ClusterConfig
from photorec.model import TrainingConfig
from photorec.pipeline import make_splits
from photorec.synthetic import S1, S1_TRAINING, S1_WMF, gen_synthetic
from photorec.training import Corpus, aggregate_map, evaluate_splits, recommend, train
from photorec.wmf import WmfConfig

data = gen_synthetic(S1)
corpus = Corpus(data.photos, data.features).prepare(ClusterConfig())
splits, summary = make_splits(corpus)
print("evaluation splits:", summary)

# One (validation, test) city pair per user is hidden from clustering counts, factorization and training.
fold = assign_folds(splits, 1, seed=0)[0]
model = train(corpus, TrainingConfig(**S1_TRAINING), WmfConfig(**S1_WMF), ClusterConfig(), fold)
for rec in model.trace[::10] + model.trace[-1:]:
    print(f"epoch {rec.epoch:2d}  quintuplet {rec.l_quin:8.1f}  prediction {rec.l_pred:7.1f}  "
          f"validation MAP@5 {rec.val_map5:.3f}")

ap = evaluate_splits(model, list(fold.values()), corpus.interactions.counts)
for k in (5, 10):
    seg, usr = aggregate_map(ap[k])
    print(f"test MAP@{k}: {seg:.4f} over segments, {usr:.4f} over users")

# Recommend in a city the user has not visited in the training data.
user, split = sorted(fold.items())[0]
top = recommend(RecommendationQuery(user, split.test_city, k=3), model)
truth = {a.attraction_id for a in corpus.attractions if a.city == split.test_city
         and corpus.interactions.counts[corpus.interactions.users.index(user),
                                        corpus.interactions.attractions.index(a.attraction_id)] > 0}
print(f"top 3 for {user} in {split.test_city}: {top}; actually visited: {sorted(truth)}")
