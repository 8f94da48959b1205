import math

import numpy as np
import pytest
from scipy import stats

from oracles import ap_at_k
from photorec.evaluation import (
    RecommendationQuery,
    VariantScores,
    ablation_report,
    average_precision_at_k,
    format_report,
    map_at_k,
    paired_t_test,
    rank_attractions,
)


def test_ap_worked_example():
    assert abs(average_precision_at_k([1, 0, 1, 0, 0], 5) - 0.61333333333333) < 1e-9
    assert average_precision_at_k([0, 0, 0], 3) == 0.0
    assert average_precision_at_k([1, 1, 1], 3) == 1.0


def test_ap_matches_oracle_and_pads_short_lists():
    rng = np.random.default_rng(0)
    for _ in range(300):
        n = int(rng.integers(1, 12))
        flags = rng.integers(0, 2, size=n).tolist()
        k = int(rng.integers(1, 12))
        assert average_precision_at_k(flags, k) == pytest.approx(ap_at_k(flags, k), abs=1e-12)


def test_conventional_ap():
    # precision at ranks 1 and 3: (1 + 2/3) / 2
    assert average_precision_at_k([1, 0, 1, 0, 0], 5, conventional=True) == pytest.approx(5 / 6)
    assert average_precision_at_k([0, 0], 2, conventional=True) == 0.0
    assert average_precision_at_k([0, 1], 2, conventional=True, n_relevant=4) == pytest.approx(0.25)


@pytest.mark.parametrize("bad", [[], [2, 0]])
def test_ap_rejects_bad_lists(bad):
    with pytest.raises(ValueError):
        average_precision_at_k(bad, 3)


def test_map_is_order_invariant_and_monotone():
    rng = np.random.default_rng(1)
    lists = [rng.integers(0, 2, size=5).tolist() for _ in range(50)]
    base = map_at_k(lists, 5)
    assert map_at_k(lists[::-1], 5) == pytest.approx(base, abs=1e-15)
    for lst in lists:
        for i in np.flatnonzero(np.array(lst) == 0):
            up = list(lst)
            up[i] = 1
            assert average_precision_at_k(up, 5) > average_precision_at_k(lst, 5)
    with pytest.raises(ValueError):
        map_at_k([], 5)


def test_paired_t_test_matches_scipy():
    rng = np.random.default_rng(2)
    for _ in range(50):
        n = int(rng.integers(2, 30))
        a, b = rng.normal(size=n), rng.normal(size=n)
        t, sig = paired_t_test(a, b)
        ref = stats.ttest_rel(a, b)
        assert t == pytest.approx(ref.statistic, abs=1e-6)
        assert sig == (ref.pvalue < 0.05)


def test_paired_t_test_degenerate_cases():
    t, sig = paired_t_test([1.0, 2.0], [1.0, 2.0])
    assert math.isnan(t) and not sig
    t, sig = paired_t_test([2.0, 3.0], [1.0, 2.0])
    assert t == math.inf and sig
    with pytest.raises(ValueError):
        paired_t_test([1.0], [2.0])
    with pytest.raises(ValueError):
        paired_t_test([1.0, 2.0], [1.0])


def test_rank_ties_go_to_lower_id():
    assert rank_attractions([0.5, 0.9, 0.5, 0.9], [7, 3, 2, 8]) == [3, 8, 2, 7]


def test_query_k_must_be_positive():
    with pytest.raises(ValueError):
        RecommendationQuery("u", "c", 0)


def test_ablation_report_significance_and_layout():
    rng = np.random.default_rng(3)
    keys = [f"s{i}" for i in range(20)]
    good = {k: {s: float(v) for s, v in zip(keys, rng.uniform(0.6, 0.9, 20))} for k in (5, 10)}
    bad = {k: {s: v - 0.3 for s, v in good[k].items()} for k in (5, 10)}
    same = {k: dict(good[k]) for k in (5, 10)}
    rows = ablation_report([VariantScores("MEAL", good), VariantScores("weak", bad), VariantScores("twin", same)])
    by = {r["variant"]: r for r in rows}
    assert by["weak"]["sig@5"] and not by["twin"]["sig@5"] and not by["MEAL"]["sig@5"]
    assert by["weak"]["map@5"] == pytest.approx(by["MEAL"]["map@5"] - 0.3)
    text = format_report(rows)
    assert text.splitlines()[0].split("\t")[:4] == ["variant", "map@5", "std@5", "sig@5"]
    assert len(text.splitlines()) == 4


def test_ablation_report_rejects_mismatched_splits():
    a = VariantScores("MEAL", {5: {"x": 1.0, "y": 0.5}})
    b = VariantScores("other", {5: {"x": 1.0}})
    with pytest.raises(ValueError):
        ablation_report([a, b], ks=(5,))
