"""Record types, TSV ingestion and the held-out-city split protocol."""
from __future__ import annotations

import itertools
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

PHOTO_HEADER = ("photo_id", "user_id", "taken_at", "lat", "lon", "city")
CITY_HEADER = ("city", "min_lat", "max_lat", "min_lon", "max_lon")
SPLIT_HEADER = ("user_id", "validation_city", "test_city", "train_cities")
MISSING = "-"


class DataFormatError(ValueError):
    """A TSV input could not be parsed. ``lineno`` is 1-based (header = 1)."""

    def __init__(self, message: str, lineno: int | None = None, source: str | None = None):
        self.lineno = lineno
        self.source = source
        where = ""
        if source:
            where += f"{source}:"
        if lineno is not None:
            where += f"line {lineno}: "
        elif where:
            where += " "
        super().__init__(where + message)


@dataclass(frozen=True)
class GeoTaggedPhoto:
    photo_id: str
    user_id: str
    taken_at: int
    lat: float
    lon: float
    city: str | None = None
    feature_key: str = ""

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude out of range: {self.lat}")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"longitude out of range: {self.lon}")
        if self.taken_at < 0:
            raise ValueError(f"negative timestamp: {self.taken_at}")
        if not self.feature_key:
            object.__setattr__(self, "feature_key", self.photo_id)


@dataclass(frozen=True)
class TouristAttraction:
    attraction_id: int
    city: str | None
    centroid: tuple[float, float]
    member_photo_ids: frozenset[str]
    distinct_user_count: int


@dataclass(frozen=True)
class Visit:
    user_id: str
    attraction_id: int
    time: int


@dataclass(frozen=True)
class DatasetSplit:
    user_id: str
    train_cities: frozenset[str]
    validation_city: str
    test_city: str

    def __post_init__(self):
        if self.validation_city == self.test_city:
            raise ValueError("validation and test city must differ")
        if self.validation_city in self.train_cities or self.test_city in self.train_cities:
            raise ValueError("held-out city listed among training cities")

    @property
    def held_out(self) -> frozenset[str]:
        return frozenset((self.validation_city, self.test_city))


@dataclass(frozen=True)
class CityBox:
    city: str
    min_lat: float
    max_lat: float
    min_lon: float
    max_lon: float

    def contains(self, lat: float, lon: float) -> bool:
        return self.min_lat <= lat <= self.max_lat and self.min_lon <= lon <= self.max_lon


@dataclass
class FeatureTable:
    """Precomputed photo input vectors, one row per photo id."""

    ids: list[str]
    matrix: np.ndarray
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.ids):
            raise ValueError("feature matrix must have one row per id")
        self.index = {pid: i for i, pid in enumerate(self.ids)}
        if len(self.index) != len(self.ids):
            raise ValueError("duplicate photo id in feature table")

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def rows(self, keys: Iterable[str]) -> np.ndarray:
        try:
            return self.matrix[[self.index[k] for k in keys]]
        except KeyError as exc:
            raise KeyError(f"no feature row for photo {exc.args[0]!r}") from None


# -- stream helpers -----------------------------------------------------------

def _text_lines(stream) -> Iterable[str]:
    if isinstance(stream, (str, os.PathLike)):
        with open(stream, "rb") as fh:
            data = fh.read()
    else:
        data = stream.read()
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    return data.splitlines()


def _source_name(stream) -> str | None:
    if isinstance(stream, (str, os.PathLike)):
        return os.fspath(stream)
    return getattr(stream, "name", None)


def atomic_write_text(path, text: str) -> None:
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


# -- photos -------------------------------------------------------------------

def parse_photo_table(stream) -> list[GeoTaggedPhoto]:
    """Parse ``photos.tsv``. The ``city`` column is optional; ``-`` means missing."""
    src = _source_name(stream)
    lines = _text_lines(stream)
    if not lines:
        raise DataFormatError("empty file, header expected", 1, src)
    header = tuple(lines[0].split("\t"))
    if header == PHOTO_HEADER:
        has_city = True
    elif header == PHOTO_HEADER[:-1]:
        has_city = False
    else:
        raise DataFormatError(f"unexpected header {header!r}", 1, src)
    ncol = len(header)
    photos: list[GeoTaggedPhoto] = []
    seen: set[str] = set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != ncol:
            raise DataFormatError(f"expected {ncol} columns, got {len(cols)}", lineno, src)
        pid, uid = cols[0], cols[1]
        if not pid or not uid:
            raise DataFormatError("empty photo_id or user_id", lineno, src)
        try:
            taken_at = int(cols[2])
            lat = float(cols[3])
            lon = float(cols[4])
        except ValueError as exc:
            raise DataFormatError(f"unparsable number: {exc}", lineno, src) from None
        if not np.isfinite(lat) or not -90.0 <= lat <= 90.0:
            raise DataFormatError(f"latitude out of range: {cols[3]}", lineno, src)
        if not np.isfinite(lon) or not -180.0 <= lon <= 180.0:
            raise DataFormatError(f"longitude out of range: {cols[4]}", lineno, src)
        if taken_at < 0:
            raise DataFormatError(f"negative timestamp: {cols[2]}", lineno, src)
        if pid in seen:
            raise DataFormatError(f"duplicate photo_id {pid!r}", lineno, src)
        seen.add(pid)
        city = None
        if has_city and cols[5] != MISSING:
            city = cols[5]
        photos.append(GeoTaggedPhoto(pid, uid, taken_at, lat, lon, city))
    return photos


def format_photo_table(photos: Iterable[GeoTaggedPhoto]) -> str:
    out = ["\t".join(PHOTO_HEADER)]
    for p in photos:
        out.append(
            f"{p.photo_id}\t{p.user_id}\t{p.taken_at}\t{float(p.lat)!r}\t{float(p.lon)!r}\t"
            f"{p.city if p.city is not None else MISSING}"
        )
    return "\n".join(out) + "\n"


def write_photo_table(photos: Iterable[GeoTaggedPhoto], path) -> None:
    atomic_write_text(path, format_photo_table(photos))


# -- features -----------------------------------------------------------------

def parse_feature_table(stream) -> FeatureTable:
    src = _source_name(stream)
    lines = _text_lines(stream)
    if not lines:
        raise DataFormatError("empty file, header expected", 1, src)
    head = lines[0].split("\t")
    if len(head) != 2 or head[0] != "photo_id" or not head[1].startswith("d="):
        raise DataFormatError(f"unexpected header {lines[0]!r}", 1, src)
    try:
        dim = int(head[1][2:])
    except ValueError:
        raise DataFormatError(f"bad dimension field {head[1]!r}", 1, src) from None
    if dim <= 0:
        raise DataFormatError("dimension must be positive", 1, src)
    ids: list[str] = []
    rows: list[list[float]] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != dim + 1:
            raise DataFormatError(f"expected {dim + 1} columns, got {len(cols)}", lineno, src)
        try:
            vals = [float(c) for c in cols[1:]]
        except ValueError as exc:
            raise DataFormatError(f"unparsable number: {exc}", lineno, src) from None
        if not all(np.isfinite(vals)):
            raise DataFormatError("non-finite feature value", lineno, src)
        ids.append(cols[0])
        rows.append(vals)
    matrix = np.array(rows, dtype=np.float64).reshape(len(rows), dim)
    try:
        return FeatureTable(ids, matrix)
    except ValueError as exc:
        raise DataFormatError(str(exc), None, src) from None


def format_feature_table(table: FeatureTable) -> str:
    out = [f"photo_id\td={table.dim}"]
    for pid, row in zip(table.ids, table.matrix):
        out.append(pid + "\t" + "\t".join(repr(float(v)) for v in row))
    return "\n".join(out) + "\n"


def write_feature_table(table: FeatureTable, path) -> None:
    atomic_write_text(path, format_feature_table(table))


# -- cities -------------------------------------------------------------------

def parse_city_table(stream) -> list[CityBox]:
    src = _source_name(stream)
    lines = _text_lines(stream)
    if not lines or tuple(lines[0].split("\t")) != CITY_HEADER:
        raise DataFormatError("unexpected header", 1, src)
    boxes = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != 5:
            raise DataFormatError(f"expected 5 columns, got {len(cols)}", lineno, src)
        try:
            lo_lat, hi_lat, lo_lon, hi_lon = map(float, cols[1:])
        except ValueError as exc:
            raise DataFormatError(f"unparsable number: {exc}", lineno, src) from None
        if lo_lat > hi_lat or lo_lon > hi_lon:
            raise DataFormatError("empty bounding box", lineno, src)
        boxes.append(CityBox(cols[0], lo_lat, hi_lat, lo_lon, hi_lon))
    return boxes


def assign_cities(photos: Sequence[GeoTaggedPhoto], boxes: Sequence[CityBox]) -> list[GeoTaggedPhoto]:
    """Fill in missing city labels from the first box containing the photo."""
    out = []
    for p in photos:
        if p.city is None:
            city = next((b.city for b in boxes if b.contains(p.lat, p.lon)), None)
            if city is not None:
                p = GeoTaggedPhoto(p.photo_id, p.user_id, p.taken_at, p.lat, p.lon, city, p.feature_key)
        out.append(p)
    return out


# -- splits -------------------------------------------------------------------

def enumerate_splits(
    visited_cities: Mapping[str, Iterable[str]], min_cities: int = 3
) -> tuple[list[DatasetSplit], dict[str, int]]:
    """All ordered (validation, test) city pairs for users with enough cities.

    A user who visited r >= ``min_cities`` cities yields r * (r - 1) splits.
    Returns the splits and a summary of how many users were kept or dropped.
    """
    splits: list[DatasetSplit] = []
    kept = dropped = 0
    for user in sorted(visited_cities):
        cities = sorted(set(visited_cities[user]))
        if len(cities) < min_cities:
            dropped += 1
            continue
        kept += 1
        for val, test in itertools.permutations(cities, 2):
            train = frozenset(c for c in cities if c != val and c != test)
            splits.append(DatasetSplit(user, train, val, test))
    return splits, {"users_kept": kept, "users_dropped": dropped, "splits": len(splits)}


def assign_folds(splits: Sequence[DatasetSplit], n_folds: int, seed: int = 0) -> list[dict[str, DatasetSplit]]:
    """Spread each user's splits over ``n_folds`` training runs.

    A fold holds at most one split per user, so a single trained model can be
    scored on all of its fold's splits without leaking any test city. With
    ``n_folds`` >= max r(r-1) every split is covered exactly once.
    """
    if n_folds < 1:
        raise ValueError("n_folds must be >= 1")
    rng = np.random.default_rng(seed)
    by_user: dict[str, list[DatasetSplit]] = {}
    for s in splits:
        by_user.setdefault(s.user_id, []).append(s)
    folds: list[dict[str, DatasetSplit]] = [dict() for _ in range(n_folds)]
    for user in sorted(by_user):
        own = by_user[user]
        order = rng.permutation(len(own))
        for f in range(min(n_folds, len(own))):
            folds[f][user] = own[order[f]]
    return folds


def format_splits(splits: Iterable[DatasetSplit]) -> str:
    out = ["\t".join(SPLIT_HEADER)]
    for s in splits:
        out.append(f"{s.user_id}\t{s.validation_city}\t{s.test_city}\t{','.join(sorted(s.train_cities))}")
    return "\n".join(out) + "\n"


def write_splits(splits: Iterable[DatasetSplit], path) -> None:
    atomic_write_text(path, format_splits(splits))


def parse_splits(stream) -> list[DatasetSplit]:
    src = _source_name(stream)
    lines = _text_lines(stream)
    if not lines or tuple(lines[0].split("\t")) != SPLIT_HEADER:
        raise DataFormatError("unexpected header", 1, src)
    splits = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != 4:
            raise DataFormatError(f"expected 4 columns, got {len(cols)}", lineno, src)
        train = frozenset(c for c in cols[3].split(",") if c)
        try:
            splits.append(DatasetSplit(cols[0], train, cols[1], cols[2]))
        except ValueError as exc:
            raise DataFormatError(str(exc), lineno, src) from None
    return splits

