"""Attraction extraction from photo locations, visit segmentation, interaction counts.

Clustering follows P-DBSCAN: density is the number of *distinct users* who took a
photo inside the neighbourhood, not the number of photos.
"""
from __future__ import annotations

from collections import Counter, deque
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import (
    MISSING,
    DataFormatError,
    GeoTaggedPhoto,
    TouristAttraction,
    Visit,
    _source_name,
    _text_lines,
    atomic_write_text,
)

EARTH_RADIUS_M = 6_371_000.0
DEFAULT_TTHR = 6 * 3600

ATTRACTION_HEADER = ("attraction_id", "city", "centroid_lat", "centroid_lon", "n_photos", "n_users")
INTERACTION_HEADER = ("user_id", "attraction_id", "count")
MEMBER_HEADER = ("photo_id", "attraction_id")


@dataclass(frozen=True)
class ClusterConfig:
    eps_meters: float = 100.0
    min_users: int = 5

    def __post_init__(self):
        if not self.eps_meters > 0:
            raise ValueError("eps_meters must be positive")
        if int(self.min_users) != self.min_users or self.min_users < 1:
            raise ValueError("min_users must be a positive integer")


@dataclass
class InteractionMatrix:
    counts: np.ndarray
    users: list[str]
    attractions: list[int]

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (len(self.users), len(self.attractions)):
            raise ValueError(
                f"counts shape {self.counts.shape} does not match index maps "
                f"({len(self.users)}, {len(self.attractions)})"
            )
        if (self.counts < 0).any():
            raise ValueError("negative visit count")

    @property
    def binary(self) -> np.ndarray:
        return (self.counts > 0).astype(np.float64)

    def user_pos(self) -> dict[str, int]:
        return {u: i for i, u in enumerate(self.users)}

    def attraction_pos(self) -> dict[int, int]:
        return {a: j for j, a in enumerate(self.attractions)}


def haversine_m(lat1, lon1, lat2, lon2):
    """Great-circle distance in metres; broadcasts over numpy arrays."""
    p1 = np.radians(lat1)
    p2 = np.radians(lat2)
    dp = p2 - p1
    dl = np.radians(lon2) - np.radians(lon1)
    h = np.sin(dp / 2.0) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dl / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def _neighbourhoods(lat: np.ndarray, lon: np.ndarray, eps: float) -> list[np.ndarray]:
    # Latitude strips of height eps: two points within eps differ by at most one strip.
    n = len(lat)
    strip = np.floor(np.radians(lat) * EARTH_RADIUS_M / eps).astype(np.int64)
    members: dict[int, np.ndarray] = {}
    order = np.argsort(strip, kind="stable")
    uniq, starts = np.unique(strip[order], return_index=True)
    bounds = list(starts) + [n]
    for k, s in enumerate(uniq):
        members[int(s)] = order[bounds[k]:bounds[k + 1]]
    out: list[np.ndarray] = [np.empty(0, dtype=np.int64)] * n
    for s, own in members.items():
        cand = np.concatenate([members[t] for t in (s - 1, s, s + 1) if t in members])
        cand.sort()
        for lo in range(0, len(own), 512):
            chunk = own[lo:lo + 512]
            dist = haversine_m(lat[chunk, None], lon[chunk, None], lat[None, cand], lon[None, cand])
            within = dist <= eps
            for row, i in enumerate(chunk):
                out[i] = cand[within[row]]
    return out


def cluster_labels(photos: Sequence[GeoTaggedPhoto], config: ClusterConfig) -> np.ndarray:
    """Cluster label per photo (input order); -1 marks noise.

    Labels are dense and numbered in order of discovery, where photos are
    visited in ascending ``photo_id`` so the result does not depend on the
    order of ``photos``.
    """
    n = len(photos)
    if n == 0:
        return np.empty(0, dtype=np.int64)
    order = sorted(range(n), key=lambda i: photos[i].photo_id)
    lat = np.array([photos[i].lat for i in order], dtype=np.float64)
    lon = np.array([photos[i].lon for i in order], dtype=np.float64)
    _, users = np.unique([photos[i].user_id for i in order], return_inverse=True)
    nbrs = _neighbourhoods(lat, lon, config.eps_meters)
    core = np.array([len(np.unique(users[nb])) >= config.min_users for nb in nbrs])

    labels = np.full(n, -1, dtype=np.int64)
    cluster = 0
    for seed in range(n):
        if labels[seed] != -1 or not core[seed]:
            continue
        labels[seed] = cluster
        queue = deque([seed])
        while queue:
            i = queue.popleft()
            if not core[i]:
                continue
            for j in nbrs[i]:
                if labels[j] == -1:
                    labels[j] = cluster
                    queue.append(j)
        cluster += 1

    labels = _drop_sparse_clusters(labels, users, config.min_users)
    out = np.empty(n, dtype=np.int64)
    out[order] = labels
    return out


def _drop_sparse_clusters(labels: np.ndarray, users: np.ndarray, min_users: int) -> np.ndarray:
    # A cluster can lose border photos to an earlier cluster and fall below the
    # user threshold; such clusters become noise and ids are re-densified.
    keep = {}
    for c in range(labels.max() + 1 if len(labels) else 0):
        if len(np.unique(users[labels == c])) >= min_users:
            keep[c] = len(keep)
    return np.array([keep.get(int(c), -1) if c >= 0 else -1 for c in labels], dtype=np.int64)


def attractions_from_labels(photos: Sequence[GeoTaggedPhoto], labels: np.ndarray) -> list[TouristAttraction]:
    groups: dict[int, list[GeoTaggedPhoto]] = {}
    for p, c in zip(photos, labels):
        if c >= 0:
            groups.setdefault(int(c), []).append(p)
    out = []
    for c in sorted(groups):
        members = groups[c]
        cities = Counter(p.city for p in members if p.city is not None)
        city = min(cities, key=lambda k: (-cities[k], k)) if cities else None
        centroid = (
            float(np.mean([p.lat for p in members])),
            float(np.mean([p.lon for p in members])),
        )
        out.append(
            TouristAttraction(
                attraction_id=c,
                city=city,
                centroid=centroid,
                member_photo_ids=frozenset(p.photo_id for p in members),
                distinct_user_count=len({p.user_id for p in members}),
            )
        )
    return out


def pdbscan(photos: Sequence[GeoTaggedPhoto], config: ClusterConfig = ClusterConfig()) -> list[TouristAttraction]:
    """Group photos into tourist attractions by distinct-user density.

    A photo is a core point when photos from at least ``config.min_users``
    distinct users lie within ``config.eps_meters`` (haversine, inclusive).
    Noise photos belong to no attraction.
    """
    return attractions_from_labels(photos, cluster_labels(photos, config))


def photo_attraction_map(attractions: Iterable[TouristAttraction]) -> dict[str, int]:
    return {pid: a.attraction_id for a in attractions for pid in a.member_photo_ids}


# -- visits -------------------------------------------------------------------

def segment_visits(
    photos: Sequence[GeoTaggedPhoto], attraction_id: int, t_thr: int = DEFAULT_TTHR
) -> list[Visit]:
    """Split one user's photos at one attraction into visits.

    Photos are scanned in time order; a photo joins the current visit while its
    time minus the visit's first photo time is below ``t_thr``. Each visit is
    stamped with the (floored) mean time of its photos.
    """
    if not photos:
        return []
    users = {p.user_id for p in photos}
    if len(users) != 1:
        raise ValueError("segment_visits expects photos from a single user")
    user = users.pop()
    times = sorted(p.taken_at for p in photos)
    visits = []
    group = [times[0]]
    for t in times[1:]:
        if t - group[0] < t_thr:
            group.append(t)
        else:
            visits.append(Visit(user, attraction_id, sum(group) // len(group)))
            group = [t]
    visits.append(Visit(user, attraction_id, sum(group) // len(group)))
    return visits


def extract_visits(
    photos: Sequence[GeoTaggedPhoto],
    attractions: Iterable[TouristAttraction],
    t_thr: int = DEFAULT_TTHR,
) -> list[Visit]:
    """Visits for every (user, attraction) pair; noise photos are ignored."""
    where = photo_attraction_map(attractions)
    groups: dict[tuple[str, int], list[GeoTaggedPhoto]] = {}
    for p in photos:
        a = where.get(p.photo_id)
        if a is not None:
            groups.setdefault((p.user_id, a), []).append(p)
    visits = []
    for (user, a) in sorted(groups):
        visits.extend(segment_visits(groups[(user, a)], a, t_thr))
    return visits


def build_interactions(
    visits: Iterable[Visit], users: Sequence[str], attractions: Sequence[int]
) -> InteractionMatrix:
    upos = {u: i for i, u in enumerate(users)}
    apos = {a: j for j, a in enumerate(attractions)}
    counts = np.zeros((len(users), len(attractions)), dtype=np.int64)
    for v in visits:
        if v.user_id not in upos:
            raise ValueError(f"visit by unknown user {v.user_id!r}")
        if v.attraction_id not in apos:
            raise ValueError(f"visit to unknown attraction {v.attraction_id!r}")
        counts[upos[v.user_id], apos[v.attraction_id]] += 1
    return InteractionMatrix(counts, list(users), list(attractions))


def interactions_from_visits(visits: Sequence[Visit], attractions: Sequence[TouristAttraction]) -> InteractionMatrix:
    users = sorted({v.user_id for v in visits})
    return build_interactions(visits, users, [a.attraction_id for a in attractions])


def visited_cities(visits: Iterable[Visit], attractions: Iterable[TouristAttraction]) -> dict[str, set[str]]:
    city = {a.attraction_id: a.city for a in attractions}
    out: dict[str, set[str]] = {}
    for v in visits:
        c = city[v.attraction_id]
        if c is not None:
            out.setdefault(v.user_id, set()).add(c)
    return out


# -- TSV outputs --------------------------------------------------------------

def format_attractions(attractions: Iterable[TouristAttraction]) -> str:
    out = ["\t".join(ATTRACTION_HEADER)]
    for a in attractions:
        out.append(
            f"{a.attraction_id}\t{a.city if a.city is not None else MISSING}\t"
            f"{a.centroid[0]!r}\t{a.centroid[1]!r}\t{len(a.member_photo_ids)}\t{a.distinct_user_count}"
        )
    return "\n".join(out) + "\n"


def write_attractions(attractions: Iterable[TouristAttraction], path) -> None:
    atomic_write_text(path, format_attractions(attractions))


def parse_attractions(stream) -> list[dict]:
    """Attraction summary rows (no member lists) from ``attractions.tsv``."""
    src = _source_name(stream)
    lines = _text_lines(stream)
    if not lines or tuple(lines[0].split("\t")) != ATTRACTION_HEADER:
        raise DataFormatError("unexpected header", 1, src)
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != len(ATTRACTION_HEADER):
            raise DataFormatError(f"expected {len(ATTRACTION_HEADER)} columns", lineno, src)
        try:
            rows.append({
                "attraction_id": int(cols[0]),
                "city": None if cols[1] == MISSING else cols[1],
                "centroid": (float(cols[2]), float(cols[3])),
                "n_photos": int(cols[4]),
                "n_users": int(cols[5]),
            })
        except ValueError as exc:
            raise DataFormatError(f"unparsable number: {exc}", lineno, src) from None
    return rows


def format_members(attractions: Iterable[TouristAttraction]) -> str:
    out = ["\t".join(MEMBER_HEADER)]
    for a in attractions:
        for pid in sorted(a.member_photo_ids):
            out.append(f"{pid}\t{a.attraction_id}")
    return "\n".join(out) + "\n"


def format_interactions(matrix: InteractionMatrix) -> str:
    out = ["\t".join(INTERACTION_HEADER)]
    rows, cols = np.nonzero(matrix.counts)
    for i, j in zip(rows, cols):
        out.append(f"{matrix.users[i]}\t{matrix.attractions[j]}\t{int(matrix.counts[i, j])}")
    return "\n".join(out) + "\n"


def write_interactions(matrix: InteractionMatrix, path) -> None:
    atomic_write_text(path, format_interactions(matrix))


def parse_interactions(stream, attractions: Sequence[int] | None = None) -> InteractionMatrix:
    """Read ``interactions.tsv``. Users are sorted ids; attractions default to those seen."""
    src = _source_name(stream)
    lines = _text_lines(stream)
    if not lines or tuple(lines[0].split("\t")) != INTERACTION_HEADER:
        raise DataFormatError("unexpected header", 1, src)
    triples = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != 3:
            raise DataFormatError("expected 3 columns", lineno, src)
        try:
            a, c = int(cols[1]), int(cols[2])
        except ValueError as exc:
            raise DataFormatError(f"unparsable number: {exc}", lineno, src) from None
        if c < 0:
            raise DataFormatError("negative count", lineno, src)
        triples.append((cols[0], a, c))
    users = sorted({t[0] for t in triples})
    if attractions is None:
        attractions = sorted({t[1] for t in triples})
    upos = {u: i for i, u in enumerate(users)}
    apos = {a: j for j, a in enumerate(attractions)}
    counts = np.zeros((len(users), len(attractions)), dtype=np.int64)
    for u, a, c in triples:
        if a not in apos:
            raise DataFormatError(f"unknown attraction id {a}", None, src)
        counts[upos[u], apos[a]] += c
    return InteractionMatrix(counts, users, list(attractions))


def city_lookup(attractions: Iterable[TouristAttraction]) -> Mapping[int, str | None]:
    return {a.attraction_id: a.city for a in attractions}

