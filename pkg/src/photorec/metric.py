"""Multi-level visual similarity: margins, quintuplet/triplet hinge losses, semi-hard mining.

Roles of a quintuplet, relative to the anchor photo:

* ``su_sa`` same user, same attraction
* ``du_sa`` different user, same attraction
* ``su_da`` same user, different attraction
* ``du_da`` different user, different attraction

A :class:`LevelOrder` ranks the four roles from most to least similar. The six
hinge terms compare every pair of ranks (1-2, 1-3, 1-4, 2-3, 2-4, 3-4) with
margins m1..m6.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

ROLES = ("su_sa", "du_sa", "su_da", "du_da")
DEFAULT_ORDER = ("su_sa", "du_sa", "su_da", "du_da")
# (closer rank, farther rank) per hinge term, 0-based ranks over companions
RANK_PAIRS = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))
# margin index (into m1..m6) between rank k and rank k+1
ADJACENT_MARGIN = (0, 3, 5)


@dataclass(frozen=True)
class MarginSet:
    m1: float = 0.1
    m2: float = 0.2
    m3: float = 0.3
    m4: float = 0.1
    m5: float = 0.2
    m6: float = 0.1

    def as_array(self) -> np.ndarray:
        return np.array([self.m1, self.m2, self.m3, self.m4, self.m5, self.m6], dtype=np.float64)

    @classmethod
    def from_sequence(cls, values: Sequence[float]) -> "MarginSet":
        if len(values) != 6:
            raise ValueError("expected six margins")
        return cls(*map(float, values))


def validate_margins(m: MarginSet) -> str | None:
    """``None`` when the margins are admissible, otherwise a description of the violation."""
    if not all(np.isfinite(m.as_array())):
        return "margins must be finite"
    if not 0 < m.m1 < m.m2 < m.m3:
        return f"require 0 < m1 < m2 < m3, got {m.m1}, {m.m2}, {m.m3}"
    if not 0 < m.m4 < m.m5:
        return f"require 0 < m4 < m5, got {m.m4}, {m.m5}"
    if not 0 < m.m6:
        return f"require 0 < m6, got {m.m6}"
    return None


def check_margins(m: MarginSet) -> MarginSet:
    problem = validate_margins(m)
    if problem:
        raise ValueError(problem)
    return m


@dataclass(frozen=True)
class LevelOrder:
    ranks: tuple[str, str, str, str] = DEFAULT_ORDER

    def __post_init__(self):
        r = tuple(self.ranks)
        object.__setattr__(self, "ranks", r)
        if sorted(r) != sorted(ROLES):
            raise ValueError(f"level order must permute {ROLES}, got {r}")
        if r[0] != "su_sa" or r[3] != "du_da":
            raise ValueError("su_sa must rank first and du_da last")

    @property
    def columns(self) -> np.ndarray:
        """Column of each rank in a canonical (anchor, su_sa, du_sa, su_da, du_da) row."""
        return np.array([1 + ROLES.index(r) for r in self.ranks])

    @classmethod
    def parse(cls, text: str) -> "LevelOrder":
        return cls(tuple(s.strip() for s in text.split(",")))


class Quintuplet(NamedTuple):
    anchor: int
    su_sa: int
    du_sa: int
    su_da: int
    du_da: int


def squared_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    return float(diff @ diff)


# -- losses ---------------------------------------------------------------------

def _rank_distances(F: np.ndarray, Q: np.ndarray, order: LevelOrder) -> np.ndarray:
    anchor = F[Q[:, 0]]
    cols = order.columns
    diffs = anchor[:, None, :] - F[Q[:, cols]]
    return np.einsum("qkd,qkd->qk", diffs, diffs)


def quintuplet_components_batch(F, Q, margins: MarginSet, order: LevelOrder = LevelOrder()) -> np.ndarray:
    """(n, 6) hinge terms for quintuplets given as photo-index rows into ``F``."""
    check_margins(margins)
    Q = np.asarray(Q, dtype=np.int64).reshape(-1, 5)
    d = _rank_distances(np.asarray(F, dtype=np.float64), Q, order)
    m = margins.as_array()
    close = d[:, [p[0] for p in RANK_PAIRS]]
    far = d[:, [p[1] for p in RANK_PAIRS]]
    return np.maximum(close - far + m, 0.0)


def quintuplet_loss_batch(F, Q, margins: MarginSet, order: LevelOrder = LevelOrder()) -> float:
    return float(quintuplet_components_batch(F, Q, margins, order).sum())


def quintuplet_loss_batch_backward(F, Q, margins: MarginSet, order: LevelOrder = LevelOrder()) -> np.ndarray:
    """Gradient of the summed quintuplet loss w.r.t. every row of ``F``.

    At a hinge kink the zero branch is taken.
    """
    check_margins(margins)
    F = np.asarray(F, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.int64).reshape(-1, 5)
    grad = np.zeros_like(F)
    if len(Q) == 0:
        return grad
    cols = order.columns
    anchor = F[Q[:, 0]]
    diffs = anchor[:, None, :] - F[Q[:, cols]]
    d = np.einsum("qkd,qkd->qk", diffs, diffs)
    m = margins.as_array()
    dd = np.zeros_like(d)
    for t, (i, j) in enumerate(RANK_PAIRS):
        active = (d[:, i] - d[:, j] + m[t]) > 0
        dd[:, i] += active
        dd[:, j] -= active
    g = 2.0 * dd[:, :, None] * diffs  # d(dist)/d(anchor) per rank
    np.add.at(grad, Q[:, 0], g.sum(axis=1))
    for k in range(4):
        np.add.at(grad, Q[:, cols[k]], -g[:, k])
    return grad


def quintuplet_loss(features: Sequence, margins: MarginSet, order: LevelOrder = LevelOrder()):
    """Hinge components and total for one quintuplet.

    ``features`` holds the five visual features in role order
    (anchor, su_sa, du_sa, su_da, du_da).
    """
    F = _stack5(features)
    comps = quintuplet_components_batch(F, np.arange(5)[None, :], margins, order)[0]
    return comps, float(comps.sum())


def quintuplet_loss_backward(features: Sequence, margins: MarginSet, order: LevelOrder = LevelOrder()) -> np.ndarray:
    """(5, d) gradient of the total w.r.t. each of the five features (role order)."""
    F = _stack5(features)
    return quintuplet_loss_batch_backward(F, np.arange(5)[None, :], margins, order)


def _stack5(features) -> np.ndarray:
    F = np.asarray(features, dtype=np.float64)
    if F.ndim != 2 or F.shape[0] != 5:
        raise ValueError("expected five equal-length feature vectors")
    return F


def triplet_loss_batch(F, T, margin: float) -> float:
    F = np.asarray(F, dtype=np.float64)
    T = np.asarray(T, dtype=np.int64).reshape(-1, 3)
    ap = F[T[:, 0]] - F[T[:, 1]]
    an = F[T[:, 0]] - F[T[:, 2]]
    return float(np.maximum((ap * ap).sum(1) - (an * an).sum(1) + margin, 0.0).sum())


def triplet_loss_batch_backward(F, T, margin: float) -> np.ndarray:
    F = np.asarray(F, dtype=np.float64)
    T = np.asarray(T, dtype=np.int64).reshape(-1, 3)
    grad = np.zeros_like(F)
    if len(T) == 0:
        return grad
    ap = F[T[:, 0]] - F[T[:, 1]]
    an = F[T[:, 0]] - F[T[:, 2]]
    active = ((ap * ap).sum(1) - (an * an).sum(1) + margin > 0)[:, None]
    np.add.at(grad, T[:, 0], 2.0 * active * (ap - an))
    np.add.at(grad, T[:, 1], -2.0 * active * ap)
    np.add.at(grad, T[:, 2], 2.0 * active * an)
    return grad


# -- mining ---------------------------------------------------------------------

@dataclass
class MinedQuintuplets:
    indices: np.ndarray  # (n, 5) canonical role order
    fallback: np.ndarray  # (n, 3) True where rank 2/3/4 used the hardest-candidate fallback
    skipped_no_positive: int = 0
    skipped_empty_level: int = 0

    def __len__(self) -> int:
        return len(self.indices)

    def __iter__(self):
        return (Quintuplet(*map(int, row)) for row in self.indices)


@dataclass
class MinedTriplets:
    indices: np.ndarray  # (n, 3) anchor, positive, negative
    fallback: np.ndarray  # (n,)
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.indices)


def pairwise_sq_distances(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    # Direct differences rather than the |a|^2 + |b|^2 - 2ab expansion, so the
    # interval tests see exactly the distances the loss uses.
    out = np.empty((A.shape[0], B.shape[0]))
    for lo in range(0, A.shape[0], 256):
        diff = A[lo:lo + 256, None, :] - B[None, :, :]
        out[lo:lo + 256] = np.einsum("abd,abd->ab", diff, diff)
    return out


def semi_hard_pick(d: np.ndarray, pool: np.ndarray, prev: float, margin: float, rng: np.random.Generator):
    """Pick from ``pool`` a candidate with prev < d < prev + margin, else the closest one.

    ``pool`` must be sorted ascending; returns (index, used_fallback).
    """
    dp = d[pool]
    window = pool[(dp > prev) & (dp < prev + margin)]
    if len(window):
        return int(window[rng.integers(len(window))]), False
    return int(pool[np.argmin(dp)]), True


def mine_quintuplets(
    anchors: Sequence[int],
    features: np.ndarray,
    users: np.ndarray,
    attractions: np.ndarray,
    margins: MarginSet,
    order: LevelOrder = LevelOrder(),
    rng: np.random.Generator | int | None = 0,
    candidates: np.ndarray | None = None,
) -> MinedQuintuplets:
    """Online semi-hard quintuplet mining.

    Every same-user-same-attraction companion of an anchor is used as the
    rank-1 photo. Each following rank is sampled from its role's pool inside
    (d_prev, d_prev + m) with m the margin between that rank and the one before
    (m1, m4, m6); when the window is empty the closest candidate is taken.
    ``candidates`` restricts which photos may be companions (default: all).
    """
    check_margins(margins)
    rng = np.random.default_rng(rng)
    F = np.asarray(features, dtype=np.float64)
    users = np.asarray(users)
    attractions = np.asarray(attractions)
    n = len(F)
    allowed = np.ones(n, dtype=bool) if candidates is None else np.zeros(n, dtype=bool)
    if candidates is not None:
        allowed[np.asarray(candidates, dtype=np.int64)] = True
    m = margins.as_array()
    anchors = np.asarray(anchors, dtype=np.int64)
    rows: list[list[int]] = []
    fb: list[list[bool]] = []
    no_pos = empty = 0
    idx = np.arange(n)
    for lo in range(0, len(anchors), 256):
        block = anchors[lo:lo + 256]
        D = pairwise_sq_distances(F[block], F)
        for r, o in enumerate(block):
            d = D[r]
            su = (users == users[o]) & allowed
            sa = (attractions == attractions[o]) & allowed
            pools = {
                "su_sa": idx[su & sa & (idx != o)],
                "du_sa": idx[~su & sa & allowed],
                "su_da": idx[su & ~sa],
                "du_da": idx[~su & ~sa & allowed],
            }
            if len(pools["su_sa"]) == 0:
                no_pos += 1
                continue
            if any(len(pools[role]) == 0 for role in order.ranks[1:]):
                empty += 1
                continue
            for p in pools["su_sa"]:
                chosen = {"su_sa": int(p)}
                flags = []
                prev = d[p]
                for k, role in enumerate(order.ranks[1:]):
                    pick, used = semi_hard_pick(d, pools[role], prev, m[ADJACENT_MARGIN[k]], rng)
                    chosen[role] = pick
                    flags.append(used)
                    prev = d[pick]
                rows.append([int(o)] + [chosen[role] for role in ROLES])
                fb.append(flags)
    return MinedQuintuplets(
        np.array(rows, dtype=np.int64).reshape(-1, 5),
        np.array(fb, dtype=bool).reshape(-1, 3),
        no_pos,
        empty,
    )


# Triplet variants: which photos count as positive / negative for an anchor.
TRIPLET_RULES = {
    "U": (lambda su, sa: su, lambda su, sa: ~su),
    "L": (lambda su, sa: sa, lambda su, sa: ~sa),
    "U/L": (lambda su, sa: su | sa, lambda su, sa: ~su & ~sa),
    "U&L": (lambda su, sa: su & sa, lambda su, sa: ~(su & sa)),
}


def mine_triplets(
    anchors: Sequence[int],
    features: np.ndarray,
    users: np.ndarray,
    attractions: np.ndarray,
    rule: str,
    margin: float,
    rng: np.random.Generator | int | None = 0,
    max_positives: int | None = 8,
    candidates: np.ndarray | None = None,
) -> MinedTriplets:
    """Semi-hard triplet mining for the single-level ablations (U, L, U/L, U&L)."""
    if rule not in TRIPLET_RULES:
        raise ValueError(f"unknown triplet rule {rule!r}")
    pos_rule, neg_rule = TRIPLET_RULES[rule]
    rng = np.random.default_rng(rng)
    F = np.asarray(features, dtype=np.float64)
    users = np.asarray(users)
    attractions = np.asarray(attractions)
    n = len(F)
    allowed = np.ones(n, dtype=bool) if candidates is None else np.zeros(n, dtype=bool)
    if candidates is not None:
        allowed[np.asarray(candidates, dtype=np.int64)] = True
    idx = np.arange(n)
    anchors = np.asarray(anchors, dtype=np.int64)
    rows, fb, skipped = [], [], 0
    for lo in range(0, len(anchors), 256):
        block = anchors[lo:lo + 256]
        D = pairwise_sq_distances(F[block], F)
        for r, o in enumerate(block):
            d = D[r]
            su = users == users[o]
            sa = attractions == attractions[o]
            pos = idx[pos_rule(su, sa) & allowed & (idx != o)]
            neg = idx[neg_rule(su, sa) & allowed]
            if len(pos) == 0 or len(neg) == 0:
                skipped += 1
                continue
            if max_positives is not None and len(pos) > max_positives:
                pos = np.sort(rng.choice(pos, size=max_positives, replace=False))
            for p in pos:
                pick, used = semi_hard_pick(d, neg, d[p], margin, rng)
                rows.append([int(o), int(p), pick])
                fb.append(used)
    return MinedTriplets(np.array(rows, dtype=np.int64).reshape(-1, 3), np.array(fb, dtype=bool), skipped)

