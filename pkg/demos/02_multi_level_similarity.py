"""The four similarity levels, semi-hard quintuplet mining and the quintuplet loss.

Run: python3 demos/02_multi_level_similarity.py
"""
import numpy as np

from photorec.encoder import encode, init_encoder
from photorec.metric import MarginSet, mine_quintuplets, quintuplet_loss_batch
from photorec.synthetic import SyntheticSpec, gen_synthetic

data = gen_synthetic(SyntheticSpec(n_users=12, seed=2))
ids = [p.photo_id for p in data.photos]
users = np.array([p.user_id for p in data.photos])
atts = np.array([data.photo_attraction[i] for i in ids])
X = data.features.rows(ids)

# In the raw features the planted ordering already holds on average:
# same user and spot < other user, same spot < same user, other spot < neither shared.
rng = np.random.default_rng(0)
levels = {"su_sa": (True, True), "du_sa": (False, True), "su_da": (True, False), "du_da": (False, False)}
for name, (su, sa) in levels.items():
    d = []
    for i in rng.integers(len(X), size=3000):
        cand = np.flatnonzero(((users == users[i]) == su) & ((atts == atts[i]) == sa))
        cand = cand[cand != i]
        if len(cand):
            d.append(((X[rng.choice(cand)] - X[i]) ** 2).sum())
    print(f"{name}: mean squared distance {np.mean(d):.3f}")

# Mining picks, for each anchor, one photo per level inside the semi-hard window of the previous level.
margins = MarginSet()
F = encode(X, init_encoder(X.shape[1], d=8, hidden=(16,), rng=0))
mined = mine_quintuplets(np.arange(len(X)), F, users, atts, margins, rng=0)
print(f"{len(mined)} quintuplets; {mined.fallback.mean():.0%} of picks fell back to the closest candidate")
print(f"summed quintuplet loss on an untrained encoder: {quintuplet_loss_batch(F, mined.indices, margins):.2f}")
