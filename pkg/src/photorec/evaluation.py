"""Ranking metrics, top-k recommendation, paired t-tests and variant comparison tables."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import stats


@dataclass(frozen=True)
class RecommendationQuery:
    user_id: str
    city: str
    k: int = 10

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")


def average_precision_at_k(flags: Sequence[int], k: int | None = None, conventional: bool = False,
                           n_relevant: int | None = None) -> float:
    """AP@k averaging precision@i over *all* ranks i = 1..k, divided by k.

    Lists shorter than ``k`` are padded with non-relevant slots. With
    ``conventional=True`` the usual AP@k is returned instead: precision summed
    at relevant ranks only, divided by min(k, n_relevant).
    """
    f = np.asarray(flags, dtype=np.float64)
    if f.size == 0:
        raise ValueError("empty relevance list")
    if not np.isin(f, (0.0, 1.0)).all():
        raise ValueError("relevance flags must be 0 or 1")
    k = len(f) if k is None else k
    if k < 1:
        raise ValueError("k must be >= 1")
    f = np.concatenate([f[:k], np.zeros(max(0, k - len(f)))])
    precision = np.cumsum(f) / np.arange(1, k + 1)
    if not conventional:
        return float(precision.sum() / k)
    n_rel = int(f.sum()) if n_relevant is None else n_relevant
    if n_rel == 0:
        return 0.0
    return float((precision * f).sum() / min(k, n_rel))


def map_at_k(lists: Sequence[Sequence[int]], k: int | None = None, conventional: bool = False) -> float:
    if len(lists) == 0:
        raise ValueError("MAP needs at least one relevance list")
    return float(np.mean([average_precision_at_k(f, k, conventional) for f in lists]))


def rank_attractions(scores: np.ndarray, attraction_ids: Sequence[int]) -> list[int]:
    """Ids by descending score, ties by ascending id."""
    ids = np.asarray(attraction_ids)
    order = np.lexsort((ids, -np.asarray(scores, dtype=np.float64)))
    return [int(i) for i in ids[order]]


def paired_t_test(a: Sequence[float], b: Sequence[float], alpha: float = 0.05) -> tuple[float, bool]:
    """Two-sided paired t-test on a - b.

    Zero differences give ``(nan, False)``; constant nonzero differences give
    an infinite statistic that is reported significant.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("paired samples must have equal length")
    n = len(a)
    if n < 2:
        raise ValueError("paired t-test needs n >= 2")
    diff = a - b
    mean = diff.mean()
    sd = diff.std(ddof=1)
    if sd == 0.0:
        if mean == 0.0:
            return math.nan, False
        return math.copysign(math.inf, mean), True
    t = float(mean / (sd / math.sqrt(n)))
    crit = float(stats.t.ppf(1.0 - alpha / 2.0, n - 1))
    return t, abs(t) > crit


@dataclass
class VariantScores:
    """Per-segment AP values for one trained variant, keyed by segment id."""

    name: str
    ap: Mapping[int, Mapping[str, float]]  # k -> {segment key -> AP@k}


def ablation_report(variants: Sequence[VariantScores], ks: Sequence[int] = (5, 10),
                    reference: str | None = None, alpha: float = 0.05) -> list[dict]:
    """One row per variant: MAP@k mean and stddev over segments, plus significance vs ``reference``.

    The reference defaults to the variant named ``MEAL`` when present, else the
    first one. Rows carry ``sig@k`` = True when the reference differs
    significantly (paired t-test at ``alpha``).
    """
    if not variants:
        raise ValueError("no variants to report")
    keysets = {k: None for k in ks}
    for v in variants:
        for k in ks:
            keys = frozenset(v.ap[k])
            if keysets[k] is None:
                keysets[k] = keys
            elif keys != keysets[k]:
                raise ValueError(f"variant {v.name!r} was evaluated on different splits")
    names = [v.name for v in variants]
    ref_name = reference or ("MEAL" if "MEAL" in names else names[0])
    ref = variants[names.index(ref_name)]
    rows = []
    for v in variants:
        row: dict = {"variant": v.name}
        for k in ks:
            keys = sorted(keysets[k])
            vals = np.array([v.ap[k][s] for s in keys])
            row[f"map@{k}"] = float(vals.mean())
            row[f"std@{k}"] = float(vals.std()) if len(vals) > 1 else 0.0
            if v is ref or len(keys) < 2:
                row[f"sig@{k}"] = False
            else:
                _, sig = paired_t_test([ref.ap[k][s] for s in keys], vals, alpha)
                row[f"sig@{k}"] = sig
        rows.append(row)
    return rows


def format_report(rows: Sequence[dict], ks: Sequence[int] = (5, 10)) -> str:
    head = ["variant"] + [c for k in ks for c in (f"map@{k}", f"std@{k}", f"sig@{k}")]
    out = ["\t".join(head)]
    for r in rows:
        cells = [r["variant"]]
        for k in ks:
            cells += [f"{r[f'map@{k}']:.6f}", f"{r[f'std@{k}']:.6f}", "*" if r[f"sig@{k}"] else ""]
        out.append("\t".join(cells))
    return "\n".join(out) + "\n"
