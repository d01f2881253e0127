"""Raw GPS fixes -> staypoints -> POI visits -> sequences, histograms and the anchor/sparse split."""

from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from itertools import groupby
from typing import Iterable, Mapping, Sequence

import numpy as np

from .geodata import EARTH_RADIUS_M, T_BINS, GpsPoint, Poi, haversine_m, point_in_polygon, weekly_bin

log = logging.getLogger(__name__)

UNKNOWN = None


class PipelineError(ValueError):
    pass


@dataclass
class Staypoint:
    device_id: int
    lat: float
    lon: float
    arrival: int
    departure: int


@dataclass
class Visit:
    poi_id: int | None
    arrival: int
    departure: int
    lat: float
    lon: float
    device_id: int = -1

    @property
    def known(self) -> bool:
        return self.poi_id is not None


@dataclass
class VisitSequence:
    device_id: int
    visits: list[Visit]

    def __len__(self):
        return len(self.visits)


@dataclass
class VisitDistribution:
    bins: np.ndarray
    count: int


@dataclass
class Partition:
    anchors: frozenset[int]
    sparse: frozenset[int]
    threshold: int
    counts: dict[int, int] = field(default_factory=dict)

    def role(self, poi_id: int) -> str:
        return "anchor" if poi_id in self.anchors else "sparse"


# ------------------------------------------------------------------ staypoints


def _haversine_scalar(lat1r, lon1r, coslat1, lat2r, lon2r, coslat2):
    a = math.sin((lat2r - lat1r) / 2) ** 2 + coslat1 * coslat2 * math.sin((lon2r - lon1r) / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(math.sqrt(min(1.0, a)))


def _detect_device(pts: Sequence[GpsPoint], radius_m: float, min_duration_s: float) -> list[Staypoint]:
    n = len(pts)
    lat = [math.radians(p.lat) for p in pts]
    lon = [math.radians(p.lon) for p in pts]
    cl = [math.cos(v) for v in lat]
    out = []
    i = 0
    while i < n:
        j = i + 1
        while j < n and _haversine_scalar(lat[i], lon[i], cl[i], lat[j], lon[j], cl[j]) <= radius_m:
            j += 1
        if pts[j - 1].timestamp - pts[i].timestamp >= min_duration_s:
            window = pts[i:j]
            out.append(Staypoint(
                device_id=pts[i].device_id,
                lat=sum(p.lat for p in window) / len(window),
                lon=sum(p.lon for p in window) / len(window),
                arrival=pts[i].timestamp, departure=pts[j - 1].timestamp,
            ))
            i = j
        else:
            i += 1
    return out


def detect_staypoints(points: Iterable[GpsPoint], radius_m: float = 100.0,
                      min_duration_s: float = 300.0) -> list[Staypoint]:
    """Greedy distance-time threshold detection, device by device.

    Points must be grouped by device and time-sorted within each device.  A
    window starting at point ``i`` grows while each next point lies within
    ``radius_m`` of point ``i``; it becomes a staypoint when its time span
    reaches ``min_duration_s`` and scanning resumes after it.
    """
    out: list[Staypoint] = []
    seen: set[int] = set()
    for dev, grp in groupby(points, key=lambda p: p.device_id):
        pts = list(grp)
        if dev in seen:
            raise PipelineError(f"points of device {dev} are not contiguous")
        seen.add(dev)
        for a, b in zip(pts, pts[1:]):
            if b.timestamp <= a.timestamp:
                raise PipelineError(f"device {dev}: timestamps not strictly increasing at {b.timestamp}")
        out.extend(_detect_device(pts, radius_m, min_duration_s))
    return out


# ------------------------------------------------------------------ attribution


class PoiIndex:
    """Uniform lat/lon grid over POI centroids and polygon extents."""

    def __init__(self, world: Sequence[Poi], cell_m: float = 100.0):
        self.world = {p.id: p for p in world}
        lat_ref = max((abs(p.lat) for p in world), default=0.0)
        self.dlat = cell_m / 111_000.0 * 1.05
        self.dlon = cell_m / (111_000.0 * math.cos(math.radians(min(lat_ref, 89.0)))) * 1.05
        self.cells: dict[tuple[int, int], list[int]] = defaultdict(list)
        self.poly_cells: dict[tuple[int, int], list[int]] = defaultdict(list)
        for p in world:
            self.cells[self._cell(p.lat, p.lon)].append(p.id)
            if p.polygon:
                lats = [v[0] for v in p.polygon]
                lons = [v[1] for v in p.polygon]
                (a0, b0), (a1, b1) = self._cell(min(lats), min(lons)), self._cell(max(lats), max(lons))
                for a in range(a0, a1 + 1):
                    for b in range(b0, b1 + 1):
                        self.poly_cells[(a, b)].append(p.id)

    def _cell(self, lat, lon):
        return (int(math.floor(lat / self.dlat)), int(math.floor(lon / self.dlon)))

    def near(self, lat, lon, table):
        a, b = self._cell(lat, lon)
        out = []
        for da in (-1, 0, 1):
            for db in (-1, 0, 1):
                out.extend(table.get((a + da, b + db), ()))
        return out

    def attribute(self, lat: float, lon: float, snap_radius_m: float) -> int | None:
        inside = [pid for pid in self.poly_cells.get(self._cell(lat, lon), ())
                  if point_in_polygon(lat, lon, self.world[pid].polygon)]
        if inside:
            return min(inside)
        cands = self.near(lat, lon, self.cells)
        best, best_d = None, math.inf
        for pid in sorted(cands):
            p = self.world[pid]
            d = float(haversine_m(lat, lon, p.lat, p.lon))
            if d <= snap_radius_m and d < best_d:
                best, best_d = pid, d
        return best


def attribute_pois(staypoints: Sequence[Staypoint], world: Sequence[Poi], snap_radius_m: float = 100.0,
                   index: PoiIndex | None = None) -> list[Visit]:
    """Polygon containment first, then the nearest centroid within ``snap_radius_m``, else UNKNOWN."""
    index = index or PoiIndex(world, cell_m=max(snap_radius_m, 50.0))
    visits = []
    for sp in staypoints:
        pid = index.attribute(sp.lat, sp.lon, snap_radius_m)
        visits.append(Visit(pid, sp.arrival, sp.departure, sp.lat, sp.lon, sp.device_id))
    return visits


# ------------------------------------------------------------------ sequences


def build_sequences(visits: Iterable[Visit], min_len: int = 5) -> list[VisitSequence]:
    """One time-ordered sequence per device; devices with fewer than ``min_len`` visits are dropped."""
    by_dev: dict[int, list[Visit]] = defaultdict(list)
    for v in visits:
        by_dev[v.device_id].append(v)
    out = []
    for dev in sorted(by_dev):
        vs = by_dev[dev]
        for a, b in zip(vs, vs[1:]):
            if b.arrival <= a.arrival:
                raise PipelineError(f"device {dev}: visits not sorted by arrival")
        if len(vs) >= min_len:
            out.append(VisitSequence(dev, vs))
    return out


# ------------------------------------------------------------------ features


def normalize_location(lat, lon, bbox) -> tuple[np.ndarray, np.ndarray]:
    """Affine map of (lon, lat) into the unit square; out-of-box values are clamped."""
    lat0, lon0, lat1, lon1 = bbox
    x = (np.asarray(lon, dtype=float) - lon0) / (lon1 - lon0)
    y = (np.asarray(lat, dtype=float) - lat0) / (lat1 - lat0)
    if np.any((x < 0) | (x > 1) | (y < 0) | (y > 1)):
        log.debug("normalize_location: coordinates outside bbox clamped")
    return np.clip(x, 0.0, 1.0), np.clip(y, 0.0, 1.0)


def normalize_time(ts) -> tuple[np.ndarray, np.ndarray]:
    """(seconds into day / 86400, day-of-week / 7) with Monday = 0, UTC."""
    ts = np.asarray(ts, dtype=np.int64)
    hour_frac = (ts % 86400) / 86400.0
    day_frac = ((ts // 86400 + 3) % 7) / 7.0
    return hour_frac, day_frac


def empirical_distribution(visits: Sequence[Visit]) -> VisitDistribution:
    if not visits:
        raise PipelineError("empirical_distribution needs at least one visit")
    counts = np.bincount(weekly_bin([v.arrival for v in visits]), minlength=T_BINS).astype(float)
    return VisitDistribution(counts / counts.sum(), len(visits))


def visit_counts(sequences: Iterable[VisitSequence], poi_ids: Iterable[int]) -> dict[int, int]:
    counts = {int(p): 0 for p in poi_ids}
    for s in sequences:
        for v in s.visits:
            if v.poi_id is not None:
                counts[v.poi_id] = counts.get(v.poi_id, 0) + 1
    return counts


def distributions_by_poi(sequences: Iterable[VisitSequence]) -> dict[int, VisitDistribution]:
    by_poi: dict[int, list[Visit]] = defaultdict(list)
    for s in sequences:
        for v in s.visits:
            if v.poi_id is not None:
                by_poi[v.poi_id].append(v)
    return {pid: empirical_distribution(vs) for pid, vs in sorted(by_poi.items())}


def partition_pois(counts: Mapping[int, int], m_visits: int = 50, top_k: int | None = None) -> Partition:
    """Anchors are POIs with at least ``m_visits`` visits (or the ``top_k`` most visited)."""
    if top_k is not None:
        order = sorted(counts, key=lambda p: (-counts[p], p))
        anchors = frozenset(p for p in order[:top_k] if counts[p] > 0)
    else:
        anchors = frozenset(p for p, c in counts.items() if c >= m_visits)
    if not anchors:
        raise PipelineError(
            f"no anchor POIs: the largest visit count is {max(counts.values(), default=0)}, "
            f"below M={m_visits}; lower the anchor threshold")
    sparse = frozenset(counts) - anchors
    return Partition(anchors, sparse, m_visits, dict(counts))


# ------------------------------------------------------------------ files


def write_visits(path, sequences: Iterable[VisitSequence]) -> None:
    with open(path, "w") as f:
        for s in sequences:
            for v in s.visits:
                f.write(json.dumps({"device_id": s.device_id, "poi_id": v.poi_id, "t_a": v.arrival,
                                    "t_d": v.departure, "lat": v.lat, "lon": v.lon}) + "\n")


def read_visits(path) -> list[VisitSequence]:
    by_dev: dict[int, list[Visit]] = defaultdict(list)
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            r = json.loads(line)
            by_dev[int(r["device_id"])].append(
                Visit(r["poi_id"], int(r["t_a"]), int(r["t_d"]), float(r["lat"]), float(r["lon"]), int(r["device_id"])))
    return [VisitSequence(d, by_dev[d]) for d in sorted(by_dev)]


def write_distributions(path, dists: Mapping[int, VisitDistribution]) -> None:
    with open(path, "w") as f:
        for pid in sorted(dists):
            d = dists[pid]
            f.write(json.dumps({"poi_id": pid, "count": d.count, "bins": [float(v) for v in d.bins]}) + "\n")


def read_distributions(path) -> dict[int, VisitDistribution]:
    out = {}
    with open(path) as f:
        for line in f:
            if line.strip():
                r = json.loads(line)
                out[int(r["poi_id"])] = VisitDistribution(np.array(r["bins"], dtype=float), int(r["count"]))
    return out


def write_partition(path, part: Partition) -> None:
    with open(path, "w") as f:
        for pid in sorted(part.counts):
            f.write(json.dumps({"poi_id": pid, "role": part.role(pid), "count": part.counts[pid],
                                "threshold": part.threshold}) + "\n")


def read_partition(path) -> Partition:
    anchors, sparse, counts, thr = set(), set(), {}, 0
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            r = json.loads(line)
            pid = int(r["poi_id"])
            counts[pid] = int(r["count"])
            thr = int(r["threshold"])
            (anchors if r["role"] == "anchor" else sparse).add(pid)
    return Partition(frozenset(anchors), frozenset(sparse), thr, counts)


@dataclass
class Preprocessed:
    sequences: list[VisitSequence]
    counts: dict[int, int]
    distributions: dict[int, VisitDistribution]
    partition: Partition
    n_staypoints: int = 0


def preprocess(points: Iterable[GpsPoint], world: Sequence[Poi], radius_m: float = 100.0,
               min_duration_s: float = 300.0, snap_radius_m: float = 100.0, min_len: int = 5,
               m_visits: int = 50, top_k: int | None = None) -> Preprocessed:
    sps = detect_staypoints(points, radius_m, min_duration_s)
    visits = attribute_pois(sps, world, snap_radius_m)
    seqs = build_sequences(visits, min_len)
    counts = visit_counts(seqs, (p.id for p in world))
    part = partition_pois(counts, m_visits, top_k)
    dists = distributions_by_poi(seqs)
    return Preprocessed(seqs, counts, dists, part, len(sps))
