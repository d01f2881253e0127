"""Learnable per-POI prototype matrix and the in-batch contrastive alignment loss."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import numcore as nc


class UnknownPoiError(KeyError):
    pass


class DegenerateBatch(ValueError):
    """Fewer than two distinct POIs: the contrastive loss is undefined."""


class PrototypeMatrix(nn.Module):
    """One ``d_h`` row per POI, initialised N(0, 1/d_h)."""

    def __init__(self, poi_ids: Sequence[int], d_h: int):
        super().__init__()
        self.poi_ids = [int(p) for p in poi_ids]
        self.index = {p: i for i, p in enumerate(self.poi_ids)}
        if len(self.index) != len(self.poi_ids):
            raise ValueError("duplicate POI ids in prototype matrix")
        self.weight = nn.Parameter(torch.randn(len(self.poi_ids), d_h) / math.sqrt(d_h))

    @property
    def d_h(self) -> int:
        return self.weight.shape[1]

    def rows(self, poi_ids) -> torch.Tensor:
        return torch.as_tensor([self.index[int(p)] for p in poi_ids], dtype=torch.long)

    def lookup(self, poi_id: int) -> torch.Tensor:
        try:
            return self.weight[self.index[int(poi_id)]].detach().clone()
        except KeyError:
            raise UnknownPoiError(f"POI {poi_id} has no prototype") from None

    def forward(self, rows: torch.Tensor) -> torch.Tensor:
        return self.weight[rows]


def info_nce(h: torch.Tensor, targets: torch.Tensor, z_batch: torch.Tensor, tau: float = 0.1) -> torch.Tensor:
    """Mean over visits of -log softmax(cos(h_i, z_p') / tau)[target_i].

    Args:
        h: [n, d] contextualized visits (UNKNOWN visits already removed).
        targets: [n] index of each visit's own POI inside ``z_batch``.
        z_batch: [U, d] prototypes of the unique POIs in the batch.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if z_batch.shape[0] < 2:
        raise DegenerateBatch(f"{z_batch.shape[0]} unique POI(s) in batch")
    logits = nc.cosine_matrix(h, z_batch) / tau
    logp = nc.log_softmax(logits, -1)
    return -logp.gather(1, targets[:, None]).mean()


def contrastive_batch(poi_ids: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Split flat visit POI ids (-1 = UNKNOWN) into (keep mask, unique ids, target index)."""
    keep = poi_ids >= 0
    uniq, inverse = torch.unique(poi_ids[keep], sorted=True, return_inverse=True)
    return keep, uniq, inverse


# ------------------------------------------------------------------ export


def export_embeddings(path, poi_ids: Sequence[int], matrix: np.ndarray, csv_mode: bool = False) -> Path:
    """Write ``manifest.json`` + ``embeddings.bin`` (little-endian, row-major), optionally a CSV copy."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    matrix = np.ascontiguousarray(matrix)
    dtype = {np.dtype("float32"): "float32", np.dtype("float64"): "float64"}[matrix.dtype]
    (path / "embeddings.bin").write_bytes(matrix.astype("<f4" if dtype == "float32" else "<f8").tobytes())
    manifest = {"poi_ids": [int(p) for p in poi_ids], "d_h": int(matrix.shape[1]), "dtype": dtype,
                "endianness": "little", "rows": int(matrix.shape[0])}
    (path / "manifest.json").write_text(json.dumps(manifest))
    if csv_mode:
        with open(path / "embeddings.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["poi_id"] + [f"e{i}" for i in range(matrix.shape[1])])
            for pid, row in zip(poi_ids, matrix):
                w.writerow([pid] + [repr(float(v)) for v in row])
    return path


def import_embeddings(path) -> tuple[list[int], np.ndarray]:
    path = Path(path)
    m = json.loads((path / "manifest.json").read_text())
    raw = np.frombuffer((path / "embeddings.bin").read_bytes(), dtype="<f4" if m["dtype"] == "float32" else "<f8")
    return m["poi_ids"], raw.reshape(m["rows"], m["d_h"]).copy()
