"""Planted synthetic photo collections for tests and benchmark runs.

Each photo feature is a random projection of a scene vector

    attraction scenery + user_weight * user archetype

plus isotropic noise and heavier nuisance variation confined to the
directions orthogonal to the scenery subspace. Users belong to preference
groups whose archetypes live in the same scenery space, and they visit
attractions whose scenery matches their group more often. Photos of one user
at one attraction are therefore closest, then photos of one attraction by
different users, then one user at different attractions, then everything else.

Optional junk photos (food, selfies) show a shared junk scene with random
clutter in place of the attraction and user content.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, asdict

import numpy as np

from .data import FeatureTable, GeoTaggedPhoto, atomic_write_text, format_feature_table, format_photo_table

M_PER_DEG = 111_195.0
BASE_TIME = 1_500_000_000


@dataclass(frozen=True)
class SyntheticSpec:
    n_users: int = 60
    n_cities: int = 4
    attractions_per_city: int = 8
    photos_per_visit: int = 4
    d_in: int = 32
    n_preferences: int = 4  # planted preference groups
    scenery_dim: int = 8
    user_weight: float = 0.6
    attraction_spread: float = 0.5
    user_spread: float = 0.3
    noise: float = 0.1  # per-coordinate std of isotropic photo noise
    nuisance: float = 1.0  # std of extra noise outside the scenery subspace
    visits_per_city: int = 3
    min_cities_per_user: int = 3
    preference_strength: float = 4.0
    repeat_rate: float = 0.2  # chance a visit is repeated on another day
    junk_rate: float = 0.0  # mean share of photos at an attraction that show no scenery
    junk_spread: float = 1.0  # random scene content of a junk photo
    stray_per_user: int = 0  # photos away from every attraction
    seed: int = 0

    def __post_init__(self):
        for name in ("n_users", "n_cities", "attractions_per_city", "photos_per_visit", "d_in",
                     "n_preferences", "scenery_dim", "visits_per_city", "min_cities_per_user"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("user_weight", "attraction_spread", "user_spread", "noise", "nuisance", "preference_strength",
                     "repeat_rate", "junk_rate", "junk_spread", "stray_per_user"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.scenery_dim > self.d_in:
            raise ValueError("scenery_dim cannot exceed d_in")
        if self.min_cities_per_user > self.n_cities:
            raise ValueError("min_cities_per_user exceeds n_cities")
        if self.visits_per_city > self.attractions_per_city:
            raise ValueError("visits_per_city exceeds attractions_per_city")
        if self.repeat_rate >= 1 or self.junk_rate > 0.5:
            raise ValueError("repeat_rate must be < 1 and junk_rate <= 0.5")


# Benchmark S1: 60 users, 4 cities, 8 attractions per city, plus junk photos
# whose share varies per user, so pooling weights have something to learn.
S1 = SyntheticSpec(junk_rate=0.4, junk_spread=2.5)
# Desk-scale model settings used with S1 (a few seconds per epoch on one core).
S1_TRAINING = {"d": 16, "hidden": (32,), "head": "mlp", "lr": 1e-2, "batch_size": 10, "epochs": 40}
S1_WMF = {"f": 8}


@dataclass
class SyntheticData:
    spec: SyntheticSpec
    photos: list[GeoTaggedPhoto]
    features: FeatureTable
    photo_attraction: dict[str, int]  # photo -> planted attraction, -1 for stray photos
    photo_kind: dict[str, str]
    user_preference: dict[str, int]
    attraction_city: list[str]
    attraction_preference: list[int]
    attraction_location: list[tuple[float, float]]

    def write(self, directory) -> dict[str, str]:
        os.makedirs(directory, exist_ok=True)
        paths = {name: os.path.join(directory, name) for name in
                 ("photos.tsv", "features.tsv", "truth_photos.tsv", "truth_users.tsv", "truth_attractions.tsv")}
        atomic_write_text(paths["photos.tsv"], format_photo_table(self.photos))
        atomic_write_text(paths["features.tsv"], format_feature_table(self.features))
        rows = ["photo_id\tuser_id\tattraction\tkind"]
        for p in self.photos:
            a = self.photo_attraction[p.photo_id]
            rows.append(f"{p.photo_id}\t{p.user_id}\t{a if a >= 0 else '-'}\t{self.photo_kind[p.photo_id]}")
        atomic_write_text(paths["truth_photos.tsv"], "\n".join(rows) + "\n")
        rows = ["user_id\tpreference"] + [f"{u}\t{k}" for u, k in sorted(self.user_preference.items())]
        atomic_write_text(paths["truth_users.tsv"], "\n".join(rows) + "\n")
        rows = ["attraction\tcity\tlat\tlon\tpreference"]
        for j, (c, k, (lat, lon)) in enumerate(zip(self.attraction_city, self.attraction_preference,
                                                  self.attraction_location)):
            rows.append(f"{j}\t{c}\t{lat!r}\t{lon!r}\t{k}")
        atomic_write_text(paths["truth_attractions.tsv"], "\n".join(rows) + "\n")
        return paths


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def gen_synthetic(spec: SyntheticSpec = S1) -> SyntheticData:
    rng = np.random.default_rng(spec.seed)
    s = spec.scenery_dim
    archetypes = _unit_rows(rng.normal(size=(spec.n_preferences, s)))
    basis = np.linalg.qr(rng.normal(size=(spec.d_in, spec.d_in)))[0]
    projection, nuisance_basis = basis[:, :s], basis[:, s:]
    junk_scene = _unit_rows(rng.normal(size=(1, s)))[0]

    cities = [f"city{c}" for c in range(spec.n_cities)]
    a_city, a_pref, a_loc, a_scene = [], [], [], []
    for c, city in enumerate(cities):
        prefs = rng.permutation(np.arange(spec.attractions_per_city) % spec.n_preferences)
        lat0, lon0 = 40.0 + c, 10.0 + c
        side = int(np.ceil(np.sqrt(spec.attractions_per_city)))
        for j in range(spec.attractions_per_city):
            a_city.append(city)
            a_pref.append(int(prefs[j]))
            a_loc.append((lat0 + 0.01 * (j // side), lon0 + 0.01 * (j % side)))
            a_scene.append(archetypes[prefs[j]] + spec.attraction_spread * rng.normal(size=s) / np.sqrt(s))
    a_scene = np.array(a_scene)
    by_city = {city: [j for j, c in enumerate(a_city) if c == city] for city in cities}

    photos, rows = [], []
    photo_attraction, photo_kind, user_pref = {}, {}, {}
    counter = 0

    def add(user, t, lat, lon, city, scene, attraction, kind):
        nonlocal counter
        pid = f"p{counter:06d}"
        counter += 1
        photos.append(GeoTaggedPhoto(pid, user, int(t), float(lat), float(lon), city))
        x = projection @ scene + spec.noise * rng.normal(size=spec.d_in)
        if nuisance_basis.shape[1]:
            x += nuisance_basis @ (spec.nuisance * rng.normal(size=nuisance_basis.shape[1]))
        rows.append(x)
        photo_attraction[pid] = attraction
        photo_kind[pid] = kind

    for u in range(spec.n_users):
        user = f"u{u:03d}"
        k = int(rng.integers(spec.n_preferences))
        user_pref[user] = k
        q = archetypes[k] + spec.user_spread * rng.normal(size=s) / np.sqrt(s)
        # Photo habits differ: each user's junk share is uniform on [0, 2 * junk_rate].
        junk_u = min(0.95, 2.0 * spec.junk_rate * rng.random())
        n_c = int(rng.integers(spec.min_cities_per_user, spec.n_cities + 1))
        day = int(rng.integers(0, 30))
        for city in sorted(str(c) for c in rng.choice(cities, size=n_c, replace=False)):
            cand = by_city[city]
            logits = spec.preference_strength * (a_scene[cand] @ q)
            p = np.exp(logits - logits.max())
            picks = rng.choice(cand, size=spec.visits_per_city, replace=False, p=p / p.sum())
            trips = [int(j) for j in picks]
            trips += [int(j) for j in picks if rng.random() < spec.repeat_rate]
            for j in trips:
                day += 1
                t = BASE_TIME + day * 86_400 + int(rng.integers(8 * 3600, 14 * 3600))
                lat0, lon0 = a_loc[j]
                for _ in range(spec.photos_per_visit):
                    t += int(rng.integers(60, 1200))
                    dlat, dlon = rng.normal(scale=15.0, size=2) / M_PER_DEG
                    dlon /= np.cos(np.radians(lat0))
                    if rng.random() < junk_u:
                        clutter = spec.junk_spread * rng.normal(size=s) / np.sqrt(s)
                        scene, kind = junk_scene + clutter, "junk"
                    else:
                        scene, kind = a_scene[j] + spec.user_weight * q, "scene"
                    add(user, t, lat0 + dlat, lon0 + dlon, city, scene, j, kind)
            for _ in range(spec.stray_per_user):
                day += 1
                c = cities.index(city)
                lat = 40.0 + c - 0.05 - 0.05 * rng.random()
                lon = 10.0 + c - 0.05 * rng.random()
                add(user, BASE_TIME + day * 86_400, lat, lon, city, spec.user_weight * q, -1, "stray")

    features = FeatureTable([p.photo_id for p in photos], np.array(rows))
    return SyntheticData(spec, photos, features, photo_attraction, photo_kind, user_pref,
                         a_city, a_pref, a_loc)


def spec_to_dict(spec: SyntheticSpec) -> dict:
    return asdict(spec)
