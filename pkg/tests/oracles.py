"""Slow, obviously-correct reference implementations shared by unit and acceptance tests."""

import itertools
import math

import numpy as np
import torch

from mepois import geodata as g
from mepois.geodata import GpsPoint
from mepois.pipeline import Partition, VisitDistribution


def oracle_staypoints(pts, radius_m, min_s):
    """Enumerate every (start, end) window, then pick greedily from the left."""
    n = len(pts)
    valid = {}
    for s in range(n):
        for e in range(s, n):
            if all(g.haversine_m(pts[s].lat, pts[s].lon, pts[k].lat, pts[k].lon) <= radius_m
                   for k in range(s, e + 1)):
                valid[(s, e)] = True
    out, cur = [], 0
    while cur < n:
        ends = [e for (s, e) in valid if s == cur]
        e = max(ends)
        if pts[e].timestamp - pts[cur].timestamp >= min_s:
            w = pts[cur:e + 1]
            out.append((sum(p.lat for p in w) / len(w), sum(p.lon for p in w) / len(w),
                        pts[cur].timestamp, pts[e].timestamp))
            cur = e + 1
        else:
            cur += 1
    return out


def as_tuples(sps):
    return [(s.lat, s.lon, s.arrival, s.departure) for s in sps]


def planted_trace(rng, n_stays=4, total=200):
    pts, t = [], 0
    lat, lon = 29.7, -95.3
    per_stay = 20
    n_move = total - n_stays * per_stay
    moves = np.array_split(np.arange(n_move), n_stays + 1)
    for k in range(n_stays + 1):
        for _ in moves[k]:
            lat, lon = g.offset_deg(lat, lon, 450.0, 0.0)
            t += 60
            pts.append(GpsPoint(0, t, lat, lon))
        if k < n_stays:
            lat, lon = g.offset_deg(lat, lon, 450.0, 0.0)
            for _ in range(per_stay):
                r, th = 20 * math.sqrt(rng.random()), rng.uniform(0, 2 * math.pi)
                plat, plon = g.offset_deg(lat, lon, r * math.cos(th), r * math.sin(th))
                t += 60
                pts.append(GpsPoint(0, t, plat, plon))
    return pts


def linear_scan(lat, lon, world, snap):
    inside = [p.id for p in world if p.polygon and g.point_in_polygon(lat, lon, p.polygon)]
    if inside:
        return min(inside)
    best = min(world, key=lambda p: (g.haversine_m(lat, lon, p.lat, p.lon), p.id))
    return best.id if g.haversine_m(lat, lon, best.lat, best.lon) <= snap else None


def reference_mha(mha, h):
    """One sequence, one head at a time, explicit loops."""
    L, d = h.shape
    dk = d // mha.heads
    q, k, v = h @ mha.w_q, h @ mha.w_k, h @ mha.w_v
    heads = []
    for j in range(mha.heads):
        sl = slice(j * dk, (j + 1) * dk)
        s = q[:, sl] @ k[:, sl].T / dk ** 0.5
        heads.append(torch.softmax(s, -1) @ v[:, sl])
    return torch.cat(heads, -1) @ mha.w_o


def naive_prior(s_ll, a_ll, a_bins, bandwidths):
    """Double loop over scales and anchors, straight from the kernel definition."""
    out = np.zeros(a_bins.shape[1])
    for sigma in bandwidths:
        w = []
        for lat, lon in a_ll:
            d = g.haversine_m(s_ll[0], s_ll[1], lat, lon) / 1000
            w.append(math.exp(-d * d / (2 * sigma * sigma)))
        tot = sum(w)
        for k, wk in enumerate(w):
            out += (wk / tot) * a_bins[k]
    return out / len(bandwidths)


def pairwise_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def sweep_auprc(scores, labels):
    """Step-interpolated area: one precision/recall point per distinct threshold, highest first."""
    scores, labels = np.asarray(scores, float), np.asarray(labels, bool)
    area, prev_r = 0.0, 0.0
    for t in sorted(set(scores.tolist()), reverse=True):
        pred = scores >= t
        tp = (pred & labels).sum()
        p, r = tp / pred.sum(), tp / labels.sum()
        area += (r - prev_r) * p
        prev_r = r
    return area


def reference_encoder(enc, x):
    """Per-sequence forward of a SequenceEncoder built from :func:`reference_mha`."""
    h = x + enc.pe[:x.shape[0]]
    for layer in enc.layers:
        h = layer.norm1(h + reference_mha(layer.attn, h))
        h = layer.norm2(h + layer.ff2(torch.relu(layer.ff1(h))))
    return h


# ------------------------------------------------------------------ timing probes


def time_attention(L, d=64, reps=30):
    """Best-of-``reps`` wall time of one attention-weight computation, batch 4."""
    import time
    from mepois.seqmodel import MultiHeadAttention
    mha = MultiHeadAttention(d, 4)
    h = torch.randn(4, L, d)
    with torch.no_grad():
        mha(h)
        best = float("inf")
        for _ in range(reps):
            t0 = time.perf_counter()
            mha.attention_weights(h)
            best = min(best, time.perf_counter() - t0)
    return best


def make_world_stub(rng, n_anchor, n_sparse):
    """Uniformly scattered POIs; the first ``n_anchor`` carry random visit distributions."""
    flat = np.ones(g.T_BINS) / g.T_BINS
    t = g.GroundTruth(np.zeros(g.T_BINS, np.int8), 0, 0, np.zeros(g.T_BINS), False, flat, flat)
    world, dists = [], {}
    for i in range(n_anchor + n_sparse):
        lat, lon = g.offset_deg(29.7, -95.3, *rng.uniform(-6000, 6000, 2))
        world.append(g.Poi(i, lat, lon, "cafe", "x", "y", t))
        if i < n_anchor:
            dists[i] = VisitDistribution(rng.dirichlet(np.ones(g.T_BINS)), 60)
    part = Partition(frozenset(range(n_anchor)), frozenset(range(n_anchor, n_anchor + n_sparse)), 50)
    return world, part, dists


def time_precompute(n_sparse, rng, n_anchor=400, reps=3):
    """Best-of-``reps`` precompute wall time for ``n_sparse`` POIs against ``n_anchor`` anchors."""
    from mepois import transfer
    world, part, dists = make_world_stub(rng, n_anchor, n_sparse)
    best = float("inf")
    for _ in range(reps):
        _, rep = transfer.precompute_transfer(world, part, dists, transfer.KernelConfig(), chunk=512)
        best = min(best, rep.seconds)
    return best
