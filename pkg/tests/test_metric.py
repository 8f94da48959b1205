import numpy as np
import pytest

from oracles import central_difference, margins_valid, quintuplet_terms, rel_error
from photorec.metric import (
    ADJACENT_MARGIN,
    ROLES,
    LevelOrder,
    MarginSet,
    mine_quintuplets,
    mine_triplets,
    quintuplet_loss,
    quintuplet_loss_backward,
    quintuplet_loss_batch,
    quintuplet_loss_batch_backward,
    semi_hard_pick,
    triplet_loss_batch,
    triplet_loss_batch_backward,
    validate_margins,
)


def test_default_margins():
    assert MarginSet().as_array().tolist() == [0.1, 0.2, 0.3, 0.1, 0.2, 0.1]
    assert validate_margins(MarginSet()) is None


@pytest.mark.parametrize("bad", [
    (0.2, 0.2, 0.3, 0.1, 0.2, 0.1),   # m1 = m2
    (0.1, 0.2, 0.3, 0.2, 0.2, 0.1),   # m4 = m5
    (0.1, 0.2, 0.3, 0.1, 0.2, 0.0),   # m6 = 0
    (-0.1, 0.2, 0.3, 0.1, 0.2, 0.1),
    (0.1, 0.3, 0.2, 0.1, 0.2, 0.1),
])
def test_invalid_margins_are_reported(bad):
    assert isinstance(validate_margins(MarginSet(*bad)), str)


def test_validate_margins_agrees_with_oracle():
    rng = np.random.default_rng(0)
    for _ in range(500):
        m = rng.choice([-0.1, 0.0, 0.1, 0.2, 0.3, 0.4], size=6)
        assert (validate_margins(MarginSet(*m)) is None) == margins_valid(m)


def test_level_order_rules():
    assert LevelOrder().ranks == ("su_sa", "du_sa", "su_da", "du_da")
    assert LevelOrder.parse("su_sa,su_da,du_sa,du_da").columns.tolist() == [1, 3, 2, 4]
    with pytest.raises(ValueError):
        LevelOrder(("du_sa", "su_sa", "su_da", "du_da"))
    with pytest.raises(ValueError):
        LevelOrder(("su_sa", "su_sa", "su_da", "du_da"))


def test_identical_features_give_the_margin_sum():
    comps, total = quintuplet_loss(np.ones((5, 3)), MarginSet())
    assert np.allclose(comps, MarginSet().as_array())
    assert total == pytest.approx(1.0)


def test_well_separated_quintuplet_has_zero_loss():
    f = np.array([[0.0], [0.1], [1.0], [2.0], [3.0]])
    assert quintuplet_loss(f, MarginSet())[1] == 0.0


@pytest.mark.parametrize("order", [LevelOrder(), LevelOrder(("su_sa", "su_da", "du_sa", "du_da"))])
def test_quintuplet_loss_matches_oracle(order):
    rng = np.random.default_rng(1)
    m = MarginSet()
    for _ in range(100):
        F = rng.normal(scale=0.4, size=(5, 3))
        comps, total = quintuplet_loss(F, m, order)
        want = quintuplet_terms(dict(zip(("anchor",) + ROLES, F)), m.as_array(), order.ranks)
        assert np.allclose(comps, want, atol=1e-12)
        assert total == pytest.approx(sum(want), abs=1e-12)


def test_quintuplet_gradient():
    rng = np.random.default_rng(2)
    m = MarginSet()
    for _ in range(20):
        F = rng.normal(scale=0.3, size=(5, 4))
        g = quintuplet_loss_backward(F, m)
        (num,) = central_difference(lambda: quintuplet_loss(F, m)[1], [F])
        assert rel_error(g, num) < 1e-6


def test_batch_gradient_with_shared_photos():
    rng = np.random.default_rng(3)
    F = rng.normal(scale=0.3, size=(8, 3))
    Q = rng.integers(0, 8, size=(12, 5))
    g = quintuplet_loss_batch_backward(F, Q, MarginSet())
    (num,) = central_difference(lambda: quintuplet_loss_batch(F, Q, MarginSet()), [F])
    assert rel_error(g, num) < 1e-6


def test_triplet_loss_and_gradient():
    F = np.array([[0.0], [1.0], [0.5]])
    assert triplet_loss_batch(F, [[0, 1, 2]], 0.2) == pytest.approx(1.0 - 0.25 + 0.2)
    rng = np.random.default_rng(4)
    F = rng.normal(size=(7, 3))
    T = rng.integers(0, 7, size=(10, 3))
    g = triplet_loss_batch_backward(F, T, 0.2)
    (num,) = central_difference(lambda: triplet_loss_batch(F, T, 0.2), [F])
    assert rel_error(g, num) < 1e-6


def test_semi_hard_window_example():
    # d(su_sa) = 0.2, du_sa candidates at 0.25 and 0.35, m1 = 0.1 -> only 0.25
    d = np.array([0.0, 0.2, 0.25, 0.35])
    rng = np.random.default_rng(0)
    picks = {semi_hard_pick(d, np.array([2, 3]), 0.2, 0.1, rng) for _ in range(20)}
    assert picks == {(2, False)}
    # empty window: fall back to the closest candidate
    assert semi_hard_pick(d, np.array([3]), 0.2, 0.1, rng) == (3, True)


def _labelled(rng, n):
    users = rng.integers(0, 3, size=n)
    atts = rng.integers(0, 3, size=n)
    return rng.normal(scale=0.3, size=(n, 2)), users, atts


def check_mined(mined, F, users, atts, m, order=LevelOrder()):
    D = ((F[:, None, :] - F[None, :, :]) ** 2).sum(-1)
    for row, fb in zip(mined.indices, mined.fallback):
        o = row[0]
        q = dict(zip(ROLES, row[1:]))
        assert users[q["su_sa"]] == users[o] and atts[q["su_sa"]] == atts[o] and q["su_sa"] != o
        assert users[q["du_sa"]] != users[o] and atts[q["du_sa"]] == atts[o]
        assert users[q["su_da"]] == users[o] and atts[q["su_da"]] != atts[o]
        assert users[q["du_da"]] != users[o] and atts[q["du_da"]] != atts[o]
        prev = D[o, q[order.ranks[0]]]
        for k, role in enumerate(order.ranks[1:]):
            dist = D[o, q[role]]
            if not fb[k]:
                assert prev < dist < prev + m.as_array()[ADJACENT_MARGIN[k]]
            prev = dist


def test_mined_quintuplets_respect_labels_and_windows():
    rng = np.random.default_rng(5)
    m = MarginSet()
    for _ in range(20):
        n = int(rng.integers(10, 50))
        F, users, atts = _labelled(rng, n)
        mined = mine_quintuplets(np.arange(n), F, users, atts, m, rng=rng)
        check_mined(mined, F, users, atts, m)
        # every su_sa companion of every usable anchor is used once
        for o in np.unique(mined.indices[:, 0]):
            pos = np.flatnonzero((users == users[o]) & (atts == atts[o]))
            assert sorted(mined.indices[mined.indices[:, 0] == o, 1]) == sorted(pos[pos != o])


def test_mining_accounts_for_skipped_anchors():
    F = np.zeros((3, 2))
    users = np.array([0, 1, 0])
    atts = np.array([0, 0, 1])
    mined = mine_quintuplets(np.arange(3), F, users, atts, MarginSet())
    assert len(mined) == 0 and mined.skipped_no_positive == 3


@pytest.mark.parametrize("rule", ["U", "L", "U/L", "U&L"])
def test_triplet_mining_labels(rule):
    rng = np.random.default_rng(6)
    F, users, atts = _labelled(rng, 40)
    mined = mine_triplets(np.arange(40), F, users, atts, rule, 0.2, rng)
    assert len(mined) > 0
    for o, p, n in mined.indices:
        su_p, sa_p = users[p] == users[o], atts[p] == atts[o]
        su_n, sa_n = users[n] == users[o], atts[n] == atts[o]
        pos = {"U": su_p, "L": sa_p, "U/L": su_p or sa_p, "U&L": su_p and sa_p}[rule]
        neg = {"U": not su_n, "L": not sa_n, "U/L": not su_n and not sa_n, "U&L": not (su_n and sa_n)}[rule]
        assert pos and neg and p != o
    counts = np.bincount(mined.indices[:, 0])
    assert counts.max() <= 8
