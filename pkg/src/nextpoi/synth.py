"""Synthetic check-in generator with plantable semantic, social and
geographical signals.

POIs sit uniformly in ``[-1, 1]^2``.  Every user has a personal preference
over a few favourite POIs, which is the fallback choice.  For each
check-in, three independent uniform draws decide which planted mechanisms
fire:

* social: copy the most recent visit, at or before the user's previous
  check-in, of a random groupmate;
* semantic: the next category is looked up in an affinity table indexed by
  (previous category, hour of the new visit), then a POI of that category
  is picked by personal preference;
* geo: the next POI is drawn uniformly among POIs within ``geo_radius`` of
  the current one (and of the semantic category, when that also fired).

Users are simulated in global time order so that social copies only see
the past.  All randomness is per-user (``seed``, user id), so the output
does not depend on evaluation order.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import FOURSQUARE_CATEGORIES, CheckInLog, write_foursquare
from .rng import stream

HOUR = 3600
START = 1333238400  # 2012-04-01 00:00 UTC
LAT0, LON0, SPAN = 40.75, -73.95, 0.1
FOOD = FOURSQUARE_CATEGORIES.index("Food")


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 50
    n_pois: int = 100
    n_categories: int = 8
    n_groups: int = 10
    semantic_strength: float = 0.0
    social_strength: float = 0.0
    geo_strength: float = 0.0
    geo_radius: float = 0.3
    checkins_per_user: int = 40
    favorites: int = 10
    explore: float = 0.1
    mean_gap_hours: float = 4.0
    seed: int = 0

    def __post_init__(self):
        for name in ("semantic_strength", "social_strength", "geo_strength", "explore"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if not 0.0 < self.geo_radius <= 2.0:
            raise ValueError("geo_radius must lie in (0, 2]")
        if not FOOD < self.n_categories <= len(FOURSQUARE_CATEGORIES):
            raise ValueError(f"n_categories must lie in [{FOOD + 1}, {len(FOURSQUARE_CATEGORIES)}]")
        if min(self.n_users, self.n_pois, self.n_groups, self.checkins_per_user, self.favorites) < 1:
            raise ValueError("sizes must be positive")


@dataclass
class SynthData:
    log: CheckInLog
    groups: np.ndarray
    poi_xy: np.ndarray
    poi_category: np.ndarray
    config: SynthConfig = field(repr=False, default=None)

    def friends(self) -> list[list[int]]:
        return friends_from_groups(self.groups)


def friends_from_groups(groups) -> list[list[int]]:
    groups = np.asarray(groups)
    return [[int(j) for j in np.flatnonzero(groups == groups[i]) if j != i] for i in range(len(groups))]


def affinity_table(n_categories: int) -> np.ndarray:
    """Next category for (previous category, hour of day).

    Rotates through categories by 6-hour block; every row points to Food at
    noon.
    """
    c = np.arange(n_categories)[:, None]
    h = np.arange(24)[None, :]
    table = (c + 1 + h // 6) % n_categories
    table[:, 12] = FOOD
    return table


def generate(cfg: SynthConfig) -> SynthData:
    world = stream(cfg.seed, "world")
    poi_xy = world.uniform(-1.0, 1.0, size=(cfg.n_pois, 2))
    poi_cat = world.permutation(np.arange(cfg.n_pois) % cfg.n_categories)
    groups = world.permutation(np.arange(cfg.n_users) % cfg.n_groups)
    table = affinity_table(cfg.n_categories)
    by_cat = [np.flatnonzero(poi_cat == c) for c in range(cfg.n_categories)]
    dist = np.sqrt(((poi_xy[:, None, :] - poi_xy[None, :, :]) ** 2).sum(-1))
    near = [np.flatnonzero((dist[p] <= cfg.geo_radius) & (np.arange(cfg.n_pois) != p)) for p in range(cfg.n_pois)]
    mates = friends_from_groups(groups)

    rngs, times, pref = [], [], []
    scale = cfg.mean_gap_hours * HOUR / 2.0
    for u in range(cfg.n_users):
        r = stream(cfg.seed, "user", u)
        rngs.append(r)
        start = START + r.uniform(0, 24 * HOUR)
        gaps = r.gamma(2.0, scale, size=cfg.checkins_per_user - 1)
        times.append(np.floor(start + np.concatenate([[0.0], np.cumsum(gaps)])).astype(np.int64))
        w = np.full(cfg.n_pois, cfg.explore / cfg.n_pois)
        fav = r.choice(cfg.n_pois, size=min(cfg.favorites, cfg.n_pois), replace=False)
        zipf = 1.0 / np.arange(1, len(fav) + 1)
        w[fav] += (1.0 - cfg.explore) * zipf / zipf.sum()
        pref.append(w)

    visits_t: list[list[int]] = [[] for _ in range(cfg.n_users)]
    visits_p: list[list[int]] = [[] for _ in range(cfg.n_users)]
    heap = [(int(times[u][0]), u, 0) for u in range(cfg.n_users)]
    heapq.heapify(heap)
    while heap:
        t, u, i = heapq.heappop(heap)
        r = rngs[u]
        draw_soc, draw_sem, draw_geo, pick_mate, pick = r.random(5)
        poi = None
        cur = visits_p[u][-1] if i else None
        if i and draw_soc < cfg.social_strength:
            prev_t = visits_t[u][-1]
            cands = []
            for j in mates[u]:
                k = np.searchsorted(visits_t[j], prev_t, side="right")
                if k:
                    cands.append(visits_p[j][k - 1])
            if cands:
                poi = cands[int(pick_mate * len(cands))]
        if poi is None:
            cat = None
            if i and draw_sem < cfg.semantic_strength:
                cat = int(table[poi_cat[cur], (t // HOUR) % 24])
            if i and draw_geo < cfg.geo_strength and len(near[cur]):
                pool = near[cur]
                if cat is not None and np.any(poi_cat[pool] == cat):
                    pool = pool[poi_cat[pool] == cat]
                poi = int(pool[int(pick * len(pool))])
            else:
                pool = by_cat[cat] if cat is not None else np.arange(cfg.n_pois)
                w = pref[u][pool]
                poi = int(pool[np.searchsorted(np.cumsum(w) / w.sum(), pick, side="right").clip(0, len(pool) - 1)])
        visits_t[u].append(t)
        visits_p[u].append(poi)
        if i + 1 < cfg.checkins_per_user:
            heapq.heappush(heap, (int(times[u][i + 1]), u, i + 1))

    users, pois, ts = [], [], []
    for u in range(cfg.n_users):
        users += [str(u)] * len(visits_p[u])
        pois += [str(p) for p in visits_p[u]]
        ts += visits_t[u]
    p_arr = np.array([int(p) for p in pois], dtype=np.int64)
    lat = LAT0 + SPAN * poi_xy[p_arr, 0]
    lon = LON0 + SPAN * poi_xy[p_arr, 1]
    cats = [FOURSQUARE_CATEGORIES[c] for c in poi_cat[p_arr]]
    log = CheckInLog.from_raw(users, pois, ts, lat, lon, [0] * len(users), cats)
    return SynthData(log, groups, poi_xy, poi_cat, cfg)


def write_synth(data: SynthData, out_dir) -> tuple[Path, Path]:
    """Write the Foursquare-format corpus and ``user<TAB>group`` lines."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus = out / "checkins.tsv"
    groups = out / "groups.tsv"
    write_foursquare(data.log, corpus)
    groups.write_text("".join(f"{u}\t{g}\n" for u, g in enumerate(data.groups)))
    return corpus, groups


def read_groups(path) -> np.ndarray:
    pairs = [line.split("\t") for line in Path(path).read_text().splitlines() if line.strip()]
    out = np.zeros(len(pairs), dtype=np.int64)
    for u, g in pairs:
        out[int(u)] = int(g)
    return out
