"""Synthetic POI worlds with known ground truth, and GPS traces sampled from them.

A world is a set of POIs grouped into spatial neighborhoods.  Every POI has a
weekly usage profile (168 hourly bins, Monday 00:00 = bin 0) mixed from its
neighborhood's rhythm and its own category-driven rhythm; the mixing weight is
``WorldConfig.correlation``.  Labels for the probing tasks (open hours,
busyness, price, visit intent, closure) are derived from the same latent
quantities that drive the simulated visits, so they are learnable in principle.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

T_BINS = 168
EARTH_RADIUS_M = 6_371_008.8
HOUSTON_BBOX = (29.55, -95.56, 29.95, -95.16)  # min_lat, min_lon, max_lat, max_lon
EPOCH_START = 1583107200  # 2020-03-02T00:00:00Z, a Monday
WEEK_S = 7 * 86400
ALL_DAYS = (0, 1, 2, 3, 4, 5, 6)
WEEKDAYS = (0, 1, 2, 3, 4)

# Class shares for the ordinal labels, majority class first (Los Angeles counts
# for visit intent and price level).
INTENT_SHARES = np.array([12840, 1376, 5654, 2499], dtype=float) / 22369
PRICE_SHARES = np.array([2563, 2311, 181, 36], dtype=float) / 5091


class WorldGenerationError(ValueError):
    pass


# ------------------------------------------------------------------ geometry


def haversine_m(lat1, lon1, lat2, lon2):
    """Great-circle distance in meters; broadcasts over numpy arrays."""
    lat1, lon1, lat2, lon2 = (np.radians(np.asarray(v, dtype=float)) for v in (lat1, lon1, lat2, lon2))
    a = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def bearing_deg(lat1, lon1, lat2, lon2):
    """Initial bearing from point 1 to point 2, degrees clockwise from north in [0, 360)."""
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dl = math.radians(lon2 - lon1)
    y = math.sin(dl) * math.cos(p2)
    x = math.cos(p1) * math.sin(p2) - math.sin(p1) * math.cos(p2) * math.cos(dl)
    return math.degrees(math.atan2(y, x)) % 360.0


def offset_deg(lat, lon, north_m, east_m):
    """Shift a coordinate by a local metric offset (small-distance approximation)."""
    dlat = np.degrees(np.asarray(north_m) / EARTH_RADIUS_M)
    dlon = np.degrees(np.asarray(east_m) / (EARTH_RADIUS_M * np.cos(np.radians(lat))))
    return lat + dlat, lon + dlon


def point_in_polygon(lat: float, lon: float, ring: Sequence[Sequence[float]]) -> bool:
    """Even-odd ray casting on a closed ring of (lat, lon) vertices."""
    inside = False
    n = len(ring)
    for i in range(n):
        y1, x1 = ring[i]
        y2, x2 = ring[(i + 1) % n]
        if (y1 > lat) != (y2 > lat):
            x_cross = x1 + (lat - y1) * (x2 - x1) / (y2 - y1)
            if lon < x_cross:
                inside = not inside
    return inside


def weekly_bin(ts) -> np.ndarray | int:
    """Monday-00:00-based hour of week (UTC) for epoch seconds."""
    ts = np.asarray(ts, dtype=np.int64)
    days = ts // 86400
    dow = (days + 3) % 7  # 1970-01-01 was a Thursday
    out = dow * 24 + (ts % 86400) // 3600
    return int(out) if out.ndim == 0 else out


# ------------------------------------------------------------------ data types


@dataclass
class GroundTruth:
    open_hours: np.ndarray  # 168 x {0,1}
    price_level: int
    visit_intent: int
    busyness: np.ndarray  # 168 floats in [0, 1]
    closed: bool
    usage_profile: np.ndarray  # 168 floats on the simplex
    idiosyncratic_profile: np.ndarray
    closure_time: float | None = None
    popularity: float = 1.0


@dataclass
class Poi:
    id: int
    lat: float
    lon: float
    category: str
    name: str
    address: str
    truth: GroundTruth
    polygon: list[tuple[float, float]] | None = None
    neighborhood: int = 0

    @property
    def location(self) -> tuple[float, float]:
        return (self.lat, self.lon)


@dataclass
class GpsPoint:
    device_id: int
    timestamp: int
    lat: float
    lon: float


@dataclass
class WorldConfig:
    bbox: tuple[float, float, float, float] = HOUSTON_BBOX
    poi_count: int = 1000
    device_count: int = 600
    duration_days: int = 21
    seed: int = 0
    neighborhood_count: int = 24
    neighborhood_radius_km: tuple[float, float] = (0.6, 1.4)
    min_poi_spacing_m: float = 60.0
    correlation: float = 0.6
    popularity_exponent: float = 1.25
    anchor_share: float = 0.08
    closed_share: float = 0.10
    polygon_share: float = 0.5
    open_threshold: float = 0.15
    stays_per_day: float = 4.0
    dwell_sigma: float = 0.5
    home_gap_min: float = 90.0
    local_preference_km: float = 6.0
    start_time: int = EPOCH_START

    def __post_init__(self):
        self.bbox = tuple(float(v) for v in self.bbox)
        self.neighborhood_radius_km = tuple(float(v) for v in self.neighborhood_radius_km)
        for name in ("poi_count", "device_count", "duration_days", "neighborhood_count"):
            if getattr(self, name) <= 0:
                raise WorldGenerationError(f"{name} must be positive, got {getattr(self, name)}")
        lat0, lon0, lat1, lon1 = self.bbox
        if not (lat1 > lat0 and lon1 > lon0):
            raise WorldGenerationError(f"degenerate bounding box {self.bbox}")
        if not 0.0 <= self.correlation <= 1.0:
            raise WorldGenerationError("correlation must lie in [0, 1]")
        if not 0.0 <= self.anchor_share <= 1.0:
            raise WorldGenerationError("anchor_share must lie in [0, 1]")

    @property
    def end_time(self) -> int:
        return self.start_time + self.duration_days * 86400


# ------------------------------------------------------------------ rhythms

# name: (open hour, close hour (may exceed 24), days, peak hours, peak width h,
#        base price, median dwell minutes)
CATEGORIES: dict[str, tuple] = {
    "cafe": (6, 15, ALL_DAYS, (8.5,), 2.0, 0.7, 25),
    "bakery": (5, 13, ALL_DAYS, (7.5,), 2.0, 0.5, 12),
    "restaurant": (11, 22, ALL_DAYS, (12.5, 19.0), 1.5, 1.3, 55),
    "bar": (17, 26, (1, 2, 3, 4, 5, 6), (22.0,), 2.0, 1.5, 75),
    "nightclub": (21, 28, (3, 4, 5), (24.5,), 1.5, 1.9, 110),
    "office": (8, 18, WEEKDAYS, (9.5, 14.0), 2.5, 1.0, 150),
    "school": (7, 16, WEEKDAYS, (8.0, 15.0), 1.0, 0.3, 170),
    "gym": (5, 22, ALL_DAYS, (7.0, 18.5), 1.5, 1.1, 60),
    "grocery": (7, 22, ALL_DAYS, (17.5,), 3.0, 0.4, 25),
    "retail": (10, 21, ALL_DAYS, (15.0,), 3.0, 1.0, 35),
    "church": (8, 13, (6,), (10.5,), 1.5, 0.1, 80),
    "cinema": (12, 24, ALL_DAYS, (20.0,), 2.5, 1.0, 130),
}

DISPLAY = {
    "cafe": ["Cafe", "Coffee House", "Espresso Bar"],
    "bakery": ["Bakery", "Bakehouse", "Pastry Shop"],
    "restaurant": ["Grill", "Kitchen", "Taqueria", "Bistro"],
    "bar": ["Tavern", "Pub", "Saloon", "Lounge"],
    "nightclub": ["Club", "Nightclub", "Dance Hall"],
    "office": ["Offices", "Tower", "Business Center"],
    "school": ["Elementary", "High School", "Academy"],
    "gym": ["Fitness", "Gym", "Athletic Club"],
    "grocery": ["Market", "Grocery", "Supermarket"],
    "retail": ["Outlet", "Boutique", "Store", "Shop"],
    "church": ["Church", "Chapel", "Fellowship"],
    "cinema": ["Cinema", "Theater", "Movies"],
}

NAME_WORDS = ["Golden", "Lone Star", "Bayou", "Magnolia", "Cypress", "Pecan", "Riverside", "Harbor",
              "Sunset", "Oak", "Main Street", "Heights", "Prairie", "Bluebonnet", "Gulf", "Liberty",
              "Summit", "Willow", "Eagle", "Cedar", "Maple", "Union", "Sterling", "Azul", "Rio",
              "Lucky", "Royal", "Urban", "Twin", "Red River"]
STREET_WORDS = ["Main", "Westheimer", "Montrose", "Richmond", "Kirby", "Shepherd", "Washington",
                "Fannin", "Travis", "Louisiana", "Bellaire", "Hillcroft", "Gessner", "Memorial",
                "Navigation", "Harrisburg", "Telephone", "Airline", "Aldine", "Tidwell", "Yale",
                "Heights", "Durham", "Ella", "Antoine", "Wirt", "Bingle", "Fondren", "Beechnut"]
STREET_SUFFIX = ["St", "Ave", "Blvd", "Rd", "Dr", "Pkwy"]

# Neighborhood kinds: category mixture weights and the rhythm template the
# district as a whole follows.
DISTRICTS: dict[str, tuple[dict[str, float], str]] = {
    "downtown": ({"office": 4, "cafe": 2, "restaurant": 3, "retail": 1, "gym": 1, "bar": 1}, "office"),
    "nightlife": ({"bar": 4, "nightclub": 2, "restaurant": 3, "cafe": 1, "cinema": 1}, "bar"),
    "shopping": ({"retail": 5, "restaurant": 2, "cafe": 1, "grocery": 1, "cinema": 1}, "retail"),
    "residential": ({"grocery": 2, "school": 2, "church": 1, "bakery": 1, "gym": 1, "cafe": 1, "restaurant": 1}, "grocery"),
    "campus": ({"school": 4, "cafe": 2, "bakery": 1, "gym": 1, "restaurant": 1}, "school"),
    "dining": ({"restaurant": 5, "bar": 1, "cafe": 1, "bakery": 1}, "restaurant"),
}


def rhythm(open_h: float, close_h: float, days: Sequence[int], peaks: Sequence[float], width: float,
           floor: float = 0.35) -> np.ndarray:
    """Weekly 168-bin intensity: zero outside opening windows, bumped at peaks.

    ``close_h`` may exceed 24 for windows that run past midnight; those hours
    spill into the following day.  Every open bin has intensity at least
    ``floor`` times the daily maximum.
    """
    out = np.zeros(T_BINS)
    open_i = int(round(open_h))
    close_i = int(round(close_h))
    for d in days:
        for h in range(open_i, close_i):
            centre = h + 0.5
            bump = max(math.exp(-0.5 * ((centre - p) / width) ** 2) for p in peaks)
            out[(d * 24 + h) % T_BINS] += floor + (1 - floor) * bump
    return out / out.sum()


def category_profile(category: str, rng: np.random.Generator, jitter: bool = True) -> np.ndarray:
    open_h, close_h, days, peaks, width, _, _ = CATEGORIES[category]
    if jitter:
        shift = int(rng.integers(-2, 3))
        length = close_h - open_h + int(rng.integers(-1, 2))
        open_h = open_h + shift
        close_h = open_h + max(length, 3)
        peaks = [p + shift for p in peaks]
        days = list(days)
        if len(days) == 7 and rng.random() < 0.3:
            days.remove(int(rng.integers(0, 7)))
    return rhythm(open_h, close_h, days, peaks, width)


# ------------------------------------------------------------------ generation


def _stable_seed(*parts) -> int:
    h = hashlib.blake2b(repr(parts).encode(), digest_size=8).digest()
    return int.from_bytes(h, "little")


def _smooth_circular(x: np.ndarray) -> np.ndarray:
    return 0.25 * np.roll(x, 1) + 0.5 * x + 0.25 * np.roll(x, -1)


def _quantile_classes(score: np.ndarray, shares: np.ndarray) -> np.ndarray:
    """Ordinal classes from a latent score; the lowest ``shares[0]`` fraction is class 0."""
    order = np.argsort(score, kind="stable")
    bounds = np.round(np.cumsum(shares) * len(score)).astype(int)
    cls = np.zeros(len(score), dtype=int)
    start = 0
    for c, stop in enumerate(bounds):
        cls[order[start:stop]] = c
        start = stop
    return cls


def _neighborhoods(cfg: WorldConfig, rng: np.random.Generator):
    lat0, lon0, lat1, lon1 = cfg.bbox
    margin_lat = (lat1 - lat0) * 0.06
    margin_lon = (lon1 - lon0) * 0.06
    width_km = haversine_m(lat0, lon0, lat0, lon1) / 1000
    height_km = haversine_m(lat0, lon0, lat1, lon0) / 1000
    min_sep_m = 1000 * min(5.0, 0.6 * math.sqrt(width_km * height_km / cfg.neighborhood_count))
    centres: list[tuple[float, float]] = []
    tries = 0
    while len(centres) < cfg.neighborhood_count:
        tries += 1
        lat = rng.uniform(lat0 + margin_lat, lat1 - margin_lat)
        lon = rng.uniform(lon0 + margin_lon, lon1 - margin_lon)
        if tries < 20000 and centres:
            d = haversine_m(lat, lon, np.array([c[0] for c in centres]), np.array([c[1] for c in centres]))
            if d.min() < min_sep_m:
                continue
        centres.append((lat, lon))
    kinds = list(DISTRICTS)
    hoods = []
    for k, (lat, lon) in enumerate(centres):
        kind = kinds[int(rng.integers(len(kinds)))]
        radius = rng.uniform(*cfg.neighborhood_radius_km) * 1000
        mix, template = DISTRICTS[kind]
        profile = category_profile(template, rng, jitter=True)
        hoods.append({"id": k, "lat": lat, "lon": lon, "radius_m": radius, "kind": kind,
                      "mix": mix, "profile": profile, "zip": 77002 + 3 * k,
                      "streets": [STREET_WORDS[int(i)] for i in rng.choice(len(STREET_WORDS), 3, replace=False)]})
    return hoods


def _capacity(cfg: WorldConfig, hoods) -> int:
    cell = cfg.min_poi_spacing_m ** 2 * 1.5
    return int(sum(math.pi * h["radius_m"] ** 2 / cell for h in hoods))


def _popularity_ranks(assignment: np.ndarray, n_hoods: int, anchor_share: float,
                      rng: np.random.Generator) -> np.ndarray:
    """Rank 0 is most popular.

    The best ``anchor_share`` ranks go to POIs picked per neighborhood in
    proportion to its size (at least one each).  They are dealt round-robin,
    so every neighborhood's first hub outranks any neighborhood's second.
    The remaining ranks are shuffled.
    """
    n = len(assignment)
    picks = []
    for k in range(n_hoods):
        members = np.flatnonzero(assignment == k)
        if len(members) == 0 or anchor_share <= 0:
            continue
        quota = min(len(members), max(1, int(round(anchor_share * len(members)))))
        picks.append(rng.choice(members, size=quota, replace=False))
    dealt = []
    for r in range(max((len(p) for p in picks), default=0)):
        layer = [p[r] for p in picks if r < len(p)]
        dealt.extend(rng.permutation(layer).tolist())
    dealt = np.asarray(dealt, dtype=np.int64)
    rest = np.setdiff1d(np.arange(n), dealt)
    order = np.concatenate([dealt, rng.permutation(rest)])
    ranks = np.empty(n, dtype=np.int64)
    ranks[order] = np.arange(n)
    return ranks


def generate_world(cfg: WorldConfig) -> list[Poi]:
    """Place POIs in clustered neighborhoods and attach their ground truth."""
    rng = np.random.default_rng(cfg.seed)
    hoods = _neighborhoods(cfg, rng)
    if cfg.poi_count > _capacity(cfg, hoods):
        raise WorldGenerationError(
            f"poi_count={cfg.poi_count} exceeds placement capacity {_capacity(cfg, hoods)} "
            f"(neighborhood_count={cfg.neighborhood_count}, min_poi_spacing_m={cfg.min_poi_spacing_m})")
    lat0, lon0, lat1, lon1 = cfg.bbox

    hood_weights = rng.dirichlet(np.full(len(hoods), 3.0))
    assignment = rng.choice(len(hoods), size=cfg.poi_count, p=hood_weights)
    lats = np.empty(cfg.poi_count)
    lons = np.empty(cfg.poi_count)
    placed_lat: list[float] = []
    placed_lon: list[float] = []
    for i, k in enumerate(assignment):
        h = hoods[k]
        for attempt in range(2000):
            r = h["radius_m"] * math.sqrt(rng.random())
            theta = rng.uniform(0, 2 * math.pi)
            lat, lon = offset_deg(h["lat"], h["lon"], r * math.cos(theta), r * math.sin(theta))
            if not (lat0 < lat < lat1 and lon0 < lon < lon1):
                continue
            if placed_lat:
                d = haversine_m(lat, lon, np.asarray(placed_lat), np.asarray(placed_lon))
                if d.min() < cfg.min_poi_spacing_m:
                    continue
            break
        else:
            raise WorldGenerationError(f"could not place POI {i} in neighborhood {k}; lower poi_count")
        lats[i], lons[i] = lat, lon
        placed_lat.append(lat)
        placed_lon.append(lon)

    # popularity: power law over ranks; the top ranks go to anchor-destined POIs
    ranks = _popularity_ranks(assignment, len(hoods), cfg.anchor_share, rng)
    popularity = (ranks + 1.0) ** (-cfg.popularity_exponent)
    popularity /= popularity.sum()

    categories = []
    for k in assignment:
        mix = hoods[k]["mix"]
        names = list(mix)
        w = np.array([mix[c] for c in names], dtype=float)
        categories.append(names[int(rng.choice(len(names), p=w / w.sum()))])

    # closure: ~closed_share of POIs, favouring unpopular ones
    n_closed = int(round(cfg.closed_share * cfg.poi_count))
    closed = np.zeros(cfg.poi_count, dtype=bool)
    if n_closed:
        w = 1.0 / np.sqrt(popularity)
        closed[rng.choice(cfg.poi_count, size=n_closed, replace=False, p=w / w.sum())] = True
    closure_frac = rng.uniform(0.05, 0.5, size=cfg.poi_count)

    upscale = rng.normal(0, 1, size=cfg.poi_count)
    price_score = np.array([CATEGORIES[c][5] for c in categories]) + 0.6 * upscale
    price = _quantile_classes(price_score, PRICE_SHARES)
    intent_score = np.log(popularity) + rng.normal(0, 0.6, size=cfg.poi_count)
    intent = _quantile_classes(intent_score, INTENT_SHARES)

    pois = []
    for i in range(cfg.poi_count):
        h = hoods[assignment[i]]
        prng = np.random.default_rng(_stable_seed(cfg.seed, "poi", i))
        idio = category_profile(categories[i], prng)
        raw = cfg.correlation * h["profile"] + (1 - cfg.correlation) * idio
        open_mask = raw >= cfg.open_threshold * raw.max()
        usage = np.where(open_mask, raw, 0.0)
        usage /= usage.sum()
        busy = _smooth_circular(usage) * open_mask
        busy = busy / busy.max()
        polygon = None
        if prng.random() < cfg.polygon_share:
            half = prng.uniform(10, 0.4 * cfg.min_poi_spacing_m)
            polygon = [tuple(map(float, offset_deg(lats[i], lons[i], dn * half, de * half)))
                       for dn, de in ((-1, -1), (-1, 1), (1, 1), (1, -1))]
        display = DISPLAY[categories[i]][int(prng.integers(len(DISPLAY[categories[i]])))]
        name = f"{NAME_WORDS[int(prng.integers(len(NAME_WORDS)))]} {display}"
        street = h["streets"][int(prng.integers(len(h["streets"])))]
        address = (f"{int(prng.integers(100, 9900))} {street} "
                   f"{STREET_SUFFIX[int(prng.integers(len(STREET_SUFFIX)))]}, Houston, TX {h['zip']}")
        truth = GroundTruth(
            open_hours=open_mask.astype(np.int8), price_level=int(price[i]), visit_intent=int(intent[i]),
            busyness=busy, closed=bool(closed[i]), usage_profile=usage, idiosyncratic_profile=idio,
            closure_time=float(cfg.start_time + closure_frac[i] * cfg.duration_days * 86400) if closed[i] else None,
            popularity=float(popularity[i]),
        )
        pois.append(Poi(id=i, lat=float(lats[i]), lon=float(lons[i]), category=categories[i], name=name,
                        address=address, truth=truth, polygon=polygon, neighborhood=int(h["id"])))
    return pois


# ------------------------------------------------------------------ simulation


@dataclass
class PlantedStay:
    poi_id: int | None  # None = home
    arrival: int
    departure: int
    lat: float
    lon: float


@dataclass
class DeviceTrace:
    device_id: int
    points: list[GpsPoint]
    stays: list[PlantedStay] = field(default_factory=list)


def dwell_minutes(poi: Poi, rng: np.random.Generator, sigma: float) -> float:
    """Log-normal dwell; pricier places hold visitors longer. Clipped to 5-180 min."""
    median = CATEGORIES[poi.category][6] * (1.0 + 0.25 * poi.truth.price_level)
    return float(np.clip(median * math.exp(sigma * rng.normal()), 5.0, 180.0))


def _home_location(world: Sequence[Poi], rng: np.random.Generator, cfg: WorldConfig):
    lats = np.array([p.lat for p in world])
    lons = np.array([p.lon for p in world])
    lat0, lon0, lat1, lon1 = cfg.bbox
    for _ in range(1000):
        anchor = world[int(rng.integers(len(world)))]
        r = rng.uniform(300, 3000)
        theta = rng.uniform(0, 2 * math.pi)
        lat, lon = offset_deg(anchor.lat, anchor.lon, r * math.cos(theta), r * math.sin(theta))
        lat = float(np.clip(lat, lat0, lat1))
        lon = float(np.clip(lon, lon0, lon1))
        if haversine_m(lat, lon, lats, lons).min() > 200:
            return lat, lon
    return lat, lon


class _Sampler:
    """Per-world sampling tables shared by all devices."""

    def __init__(self, world: Sequence[Poi], cfg: WorldConfig):
        self.world = list(world)
        self.cfg = cfg
        self.lats = np.array([p.lat for p in world])
        self.lons = np.array([p.lon for p in world])
        self.pop = np.array([p.truth.popularity for p in world])
        self.profiles = np.stack([p.truth.usage_profile for p in world])  # [P, T]
        self.closure = np.array([p.truth.closure_time if p.truth.closed else np.inf for p in world])

    def device_weights(self, home) -> np.ndarray:
        d_km = haversine_m(home[0], home[1], self.lats, self.lons) / 1000
        return self.pop * (0.25 + np.exp(-d_km / self.cfg.local_preference_km))


def sample_stays(sampler: _Sampler, weights: np.ndarray, n: int, rng: np.random.Generator,
                 start: int, n_weeks_span: int, end: int) -> list[tuple[int, int]]:
    """Draw ``n`` (arrival time, poi index) pairs.

    Arrival bins follow the device's aggregate weekly demand and the POI is then
    drawn in proportion to ``weights * profile[:, bin]``, so each POI's arrival
    histogram converges to its own usage profile.
    """
    joint = weights[:, None] * sampler.profiles  # [P, T]
    demand = joint.sum(0)
    if demand.sum() <= 0:
        return []
    bins = rng.choice(T_BINS, size=n, p=demand / demand.sum())
    out = []
    cum = np.cumsum(joint, axis=0)  # [P, T]
    for b in bins:
        week = int(rng.integers(n_weeks_span))
        t = start + week * WEEK_S + int(b) * 3600 + int(rng.integers(0, 3600))
        if t >= end:
            continue
        col = cum[:, b]
        for _ in range(20):
            idx = int(np.searchsorted(col, rng.random() * col[-1], side="right"))
            idx = min(idx, len(col) - 1)
            if t < sampler.closure[idx]:
                out.append((t, idx))
                break
    out.sort()
    return out


def simulate_device(world: Sequence[Poi], cfg: WorldConfig, device_id: int,
                    sampler: _Sampler | None = None) -> DeviceTrace:
    sampler = sampler or _Sampler(world, cfg)
    rng = np.random.default_rng(_stable_seed(cfg.seed, "device", device_id))
    home = _home_location(world, rng, cfg)
    weights = sampler.device_weights(home)
    start, end = cfg.start_time, cfg.end_time
    n_weeks = math.ceil((end - start) / WEEK_S)
    n = int(rng.poisson(cfg.stays_per_day * cfg.duration_days))
    draws = sample_stays(sampler, weights, n, rng, start, n_weeks, end)

    # resolve overlaps: keep arrivals, trim the previous dwell to make room
    stays: list[PlantedStay] = []
    for t, idx in draws:
        poi = sampler.world[idx]
        dwell = int(dwell_minutes(poi, rng, cfg.dwell_sigma) * 60)
        if stays:
            prev = stays[-1]
            gap_needed = 120
            if t - prev.arrival < 300 + gap_needed:
                continue
            if prev.departure > t - gap_needed:
                prev.departure = t - gap_needed
        stays.append(PlantedStay(poi.id, t, min(t + dwell, end - 1), poi.lat, poi.lon))
    stays = [s for s in stays if s.departure - s.arrival >= 300]

    points: list[GpsPoint] = []
    loc = home

    def emit_stay(lat, lon, t0, t1, every=(150, 300), jitter_m=25.0):
        t = t0
        while True:
            r = jitter_m * math.sqrt(rng.random())
            th = rng.uniform(0, 2 * math.pi)
            plat, plon = offset_deg(lat, lon, r * math.cos(th), r * math.sin(th))
            points.append(GpsPoint(device_id, int(t), float(plat), float(plon)))
            if t >= t1:
                break
            t = min(t + int(rng.integers(*every)), t1)

    def emit_move(a, b, t0, t1):
        # a few interpolated fixes strictly between t0 and t1
        span = t1 - t0
        if span < 60:
            return
        k = int(min(4, max(1, span // 600)))
        for j in range(1, k + 1):
            f = j / (k + 1)
            t = int(t0 + f * span)
            if points and t <= points[-1].timestamp:
                continue
            points.append(GpsPoint(device_id, t, float(a[0] + f * (b[0] - a[0])), float(a[1] + f * (b[1] - a[1]))))

    planted: list[PlantedStay] = []
    t_cursor = start
    for s in stays:
        gap = s.arrival - t_cursor
        if gap > cfg.home_gap_min * 60:
            # go home, idle, come back
            leave = t_cursor + 600 if loc != home else t_cursor
            back = s.arrival - 900
            if back - leave >= 1800:
                if loc != home:
                    emit_move(loc, home, t_cursor, leave)
                emit_stay(home[0], home[1], leave, back, every=(1200, 2400), jitter_m=15.0)
                planted.append(PlantedStay(None, leave, back, home[0], home[1]))
                loc = home
                t_cursor = back
        emit_move(loc, (s.lat, s.lon), t_cursor, s.arrival)
        emit_stay(s.lat, s.lon, s.arrival, s.departure)
        planted.append(s)
        loc = (s.lat, s.lon)
        t_cursor = s.departure
    # timestamps are strictly increasing by construction; enforce defensively
    clean: list[GpsPoint] = []
    for p in points:
        if not clean or p.timestamp > clean[-1].timestamp:
            clean.append(p)
    return DeviceTrace(device_id, clean, planted)


def simulate_traces(world: Sequence[Poi], cfg: WorldConfig) -> Iterator[GpsPoint]:
    """All devices' fixes, ordered by (device_id, timestamp)."""
    if not world:
        raise WorldGenerationError("cannot simulate traces for an empty world")
    sampler = _Sampler(world, cfg)
    for d in range(cfg.device_count):
        yield from simulate_device(world, cfg, d, sampler).points


# ------------------------------------------------------------------ files


def poi_to_dict(p: Poi) -> dict:
    t = p.truth
    return {
        "id": p.id, "lat": p.lat, "lon": p.lon, "category": p.category, "name": p.name,
        "address": p.address, "neighborhood": p.neighborhood,
        "polygon": [list(v) for v in p.polygon] if p.polygon else None,
        "truth": {
            "open_hours": [int(v) for v in t.open_hours], "price_level": t.price_level,
            "visit_intent": t.visit_intent, "busyness": [float(v) for v in t.busyness], "closed": t.closed,
            "usage_profile": [float(v) for v in t.usage_profile],
            "idiosyncratic_profile": [float(v) for v in t.idiosyncratic_profile],
            "closure_time": t.closure_time, "popularity": t.popularity,
        },
    }


def poi_from_dict(d: dict) -> Poi:
    t = d["truth"]
    truth = GroundTruth(
        open_hours=np.array(t["open_hours"], dtype=np.int8), price_level=int(t["price_level"]),
        visit_intent=int(t["visit_intent"]), busyness=np.array(t["busyness"], dtype=float),
        closed=bool(t["closed"]), usage_profile=np.array(t["usage_profile"], dtype=float),
        idiosyncratic_profile=np.array(t["idiosyncratic_profile"], dtype=float),
        closure_time=t.get("closure_time"), popularity=float(t.get("popularity", 1.0)),
    )
    poly = [tuple(v) for v in d["polygon"]] if d.get("polygon") else None
    return Poi(id=int(d["id"]), lat=float(d["lat"]), lon=float(d["lon"]), category=d["category"], name=d["name"],
               address=d["address"], truth=truth, polygon=poly, neighborhood=int(d.get("neighborhood", 0)))


def write_world(path, world: Sequence[Poi]) -> None:
    with open(path, "w") as f:
        for p in world:
            f.write(json.dumps(poi_to_dict(p), sort_keys=True) + "\n")


def read_world(path) -> list[Poi]:
    with open(path) as f:
        return [poi_from_dict(json.loads(line)) for line in f if line.strip()]


def write_traces(path, points) -> int:
    n = 0
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["device_id", "timestamp", "lat", "lon"])
        for p in points:
            w.writerow([p.device_id, p.timestamp, repr(p.lat), repr(p.lon)])
            n += 1
    return n


def read_traces(path) -> list[GpsPoint]:
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r)
        if header != ["device_id", "timestamp", "lat", "lon"]:
            raise ValueError(f"{path}: unexpected trace header {header}")
        return [GpsPoint(int(a), int(b), float(c), float(d)) for a, b, c, d in r]


def write_labels(path, world: Sequence[Poi]) -> None:
    with open(path, "w") as f:
        for p in world:
            t = p.truth
            f.write(json.dumps({
                "poi_id": p.id, "open_hours": [int(v) for v in t.open_hours], "closed": t.closed,
                "visit_intent": t.visit_intent, "price_level": t.price_level,
                "busyness": [float(v) for v in t.busyness],
            }, sort_keys=True) + "\n")


def read_labels(path) -> dict[int, dict]:
    with open(path) as f:
        rows = [json.loads(line) for line in f if line.strip()]
    return {int(r["poi_id"]): r for r in rows}


def config_dict(cfg: WorldConfig) -> dict:
    return asdict(cfg)
