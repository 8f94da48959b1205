"""From raw geo-tagged photos to attractions, visits and an interaction matrix.

Run: python3 demos/01_attractions_from_photos.py
"""
from collections import Counter

from photorec.mining import ClusterConfig, extract_visits, interactions_from_visits, pdbscan
from photorec.synthetic import SyntheticSpec, gen_synthetic

# A small planted collection: 20 users travelling across 3 cities with 6 spots each.
data = gen_synthetic(SyntheticSpec(n_users=20, n_cities=3, attractions_per_city=6, seed=1))
print(f"{len(data.photos)} photos from {len({p.user_id for p in data.photos})} users")

# Density is counted in distinct users, so one prolific photographer cannot create a spot alone.
attractions = pdbscan(data.photos, ClusterConfig(eps_meters=100.0, min_users=5))
print(f"{len(attractions)} attractions found (planted: {len(data.attraction_city)})")
for a in attractions[:3]:
    print(f"  #{a.attraction_id} in {a.city}: {len(a.member_photo_ids)} photos, {a.distinct_user_count} users, "
          f"centroid {a.centroid[0]:.4f},{a.centroid[1]:.4f}")

# Photos of one user at one attraction within six hours form a single visit.
visits = extract_visits(data.photos, attractions)
print(f"{len(visits)} visits; busiest attractions:",
      Counter(v.attraction_id for v in visits).most_common(3))

matrix = interactions_from_visits(visits, attractions)
print(f"interaction matrix {matrix.counts.shape}, {int((matrix.counts > 1).sum())} repeated user-attraction pairs")
