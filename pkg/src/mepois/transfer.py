"""Multi-bandwidth Gaussian transfer of visit distributions from anchors to sparse POIs.

Sparse POIs get a prior that is the average, over bandwidths, of the
kernel-weighted mixture of anchor distributions.  A shared MLP head maps any
prototype to a 168-bin distribution and is fit with KL to empirical (anchor)
or transferred (sparse) targets.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn

from . import numcore as nc
from .geodata import T_BINS, Poi, haversine_m
from .pipeline import Partition, VisitDistribution
from .seqmodel import Linear


class TransferConfigError(ValueError):
    pass


@dataclass
class KernelConfig:
    bandwidths_km: tuple[float, ...] = (0.3, 1.0, 3.0)
    nearest_anchors: int | None = None  # truncation flag; None keeps every anchor

    def __post_init__(self):
        b = tuple(float(v) for v in self.bandwidths_km)
        if not b or any(v <= 0 for v in b):
            raise TransferConfigError("bandwidths must be positive")
        if any(b2 <= b1 for b1, b2 in zip(b, b[1:])):
            raise TransferConfigError("bandwidths must be strictly increasing")
        self.bandwidths_km = b


@dataclass
class TransferredPrior:
    poi_id: int
    bins: np.ndarray
    alphas: np.ndarray | None = None  # [M, A], kept only for audits


def kernel_weights(dist_km: np.ndarray, sigma_km: float) -> np.ndarray:
    """Normalized Gaussian weights over anchors along the last axis (log-space, max-shifted)."""
    dist_km = np.asarray(dist_km, dtype=np.float64)
    if dist_km.shape[-1] == 0:
        raise TransferConfigError("kernel weights need at least one anchor")
    logit = -(dist_km ** 2) / (2.0 * sigma_km ** 2)
    logit = logit - logit.max(axis=-1, keepdims=True)
    w = np.exp(logit)
    return w / w.sum(axis=-1, keepdims=True)


def pairwise_km(lat_a, lon_a, lat_b, lon_b) -> np.ndarray:
    return haversine_m(np.asarray(lat_a)[:, None], np.asarray(lon_a)[:, None],
                       np.asarray(lat_b)[None, :], np.asarray(lon_b)[None, :]) / 1000.0


def transfer_priors(sparse_latlon: np.ndarray, anchor_latlon: np.ndarray, anchor_bins: np.ndarray,
                    cfg: KernelConfig, keep_alphas: bool = False):
    """Priors for many sparse POIs at once.

    Returns ``(priors [S, T], alphas [M, S, A] or None)``.
    """
    if len(anchor_latlon) == 0:
        raise TransferConfigError("no anchors to transfer from")
    d = pairwise_km(sparse_latlon[:, 0], sparse_latlon[:, 1], anchor_latlon[:, 0], anchor_latlon[:, 1])
    if cfg.nearest_anchors is not None and cfg.nearest_anchors < d.shape[1]:
        cut = np.partition(d, cfg.nearest_anchors - 1, axis=1)[:, cfg.nearest_anchors - 1: cfg.nearest_anchors]
        d = np.where(d <= cut, d, np.inf)
    priors = np.zeros((len(sparse_latlon), anchor_bins.shape[1]))
    alphas = [] if keep_alphas else None
    for sigma in cfg.bandwidths_km:
        a = kernel_weights(d, sigma)
        priors += a @ anchor_bins
        if keep_alphas:
            alphas.append(a)
    priors /= len(cfg.bandwidths_km)
    priors /= priors.sum(axis=1, keepdims=True)
    return priors, (np.stack(alphas) if keep_alphas else None)


def transfer_prior(poi: Poi, anchors: Sequence[Poi], anchor_dists: Mapping[int, VisitDistribution],
                   cfg: KernelConfig, keep_alphas: bool = False) -> TransferredPrior:
    lat_lon = np.array([[poi.lat, poi.lon]])
    a_ll = np.array([[a.lat, a.lon] for a in anchors])
    bins = np.stack([anchor_dists[a.id].bins for a in anchors])
    pri, al = transfer_priors(lat_lon, a_ll, bins, cfg, keep_alphas)
    return TransferredPrior(poi.id, pri[0], None if al is None else al[:, 0])


@dataclass
class PrecomputeReport:
    n_sparse: int
    n_anchor: int
    n_scales: int
    seconds: float

    @property
    def seconds_per_unit(self) -> float:
        """Wall time divided by the M·A·S work budget."""
        return self.seconds / max(1, self.n_scales * self.n_anchor * self.n_sparse)


def precompute_transfer(world: Sequence[Poi], partition: Partition, anchor_dists: Mapping[int, VisitDistribution],
                        cfg: KernelConfig, chunk: int = 2048) -> tuple[dict[int, TransferredPrior], PrecomputeReport]:
    by_id = {p.id: p for p in world}
    anchors = sorted(partition.anchors)
    sparse = sorted(partition.sparse)
    if not anchors:
        raise TransferConfigError("partition has no anchors")
    a_ll = np.array([[by_id[a].lat, by_id[a].lon] for a in anchors])
    a_bins = np.stack([anchor_dists[a].bins for a in anchors])
    t0 = time.perf_counter()
    out: dict[int, TransferredPrior] = {}
    for start in range(0, len(sparse), chunk):
        ids = sparse[start:start + chunk]
        s_ll = np.array([[by_id[s].lat, by_id[s].lon] for s in ids])
        pri, _ = transfer_priors(s_ll, a_ll, a_bins, cfg)
        for pid, row in zip(ids, pri):
            out[pid] = TransferredPrior(pid, row)
    secs = time.perf_counter() - t0
    return out, PrecomputeReport(len(sparse), len(anchors), len(cfg.bandwidths_km), secs)


def write_priors(path, priors: Mapping[int, TransferredPrior]) -> None:
    with open(path, "w") as f:
        for pid in sorted(priors):
            f.write(json.dumps({"poi_id": pid, "bins": [float(v) for v in priors[pid].bins]}) + "\n")


def read_priors(path) -> dict[int, TransferredPrior]:
    out = {}
    with open(path) as f:
        for line in f:
            if line.strip():
                r = json.loads(line)
                out[int(r["poi_id"])] = TransferredPrior(int(r["poi_id"]), np.array(r["bins"], dtype=float))
    return out


# ------------------------------------------------------------------ head and losses


class DistributionHead(nn.Module):
    """Prototype -> logits over weekly bins (one ReLU hidden layer)."""

    def __init__(self, d_h: int, hidden: int = 256, bins: int = T_BINS):
        super().__init__()
        self.fc1 = Linear(d_h, hidden)
        self.fc2 = Linear(hidden, bins)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.relu(self.fc1(z)))


def predict_distribution(z: torch.Tensor, head: DistributionHead) -> torch.Tensor:
    return nc.softmax(head(z), -1)


def distribution_kl(targets: torch.Tensor, z: torch.Tensor, head: DistributionHead) -> torch.Tensor:
    """Mean KL(target || softmax(head(z))) over rows; the one kernel both objectives use."""
    return nc.kl_divergence(targets, predict_distribution(z, head)).mean()


def kl_sparse_loss(priors: torch.Tensor, z_sparse: torch.Tensor, head: DistributionHead) -> torch.Tensor:
    return distribution_kl(priors, z_sparse, head)


def kl_anchor_loss(empirical: torch.Tensor, z_anchor: torch.Tensor, head: DistributionHead) -> torch.Tensor:
    return distribution_kl(empirical, z_anchor, head)
