"""POI prompts with neighborhood context, text embedding providers, and the projection alignment loss."""

from __future__ import annotations

import hashlib
import json
import math
import re
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np
import torch
from torch import nn

from . import numcore as nc
from .geodata import Poi, bearing_deg, haversine_m

TEXT_DIM = 768
COMPASS = ("N", "NE", "E", "SE", "S", "SW", "W", "NW")
_TOKEN = re.compile(r"[a-z]+|\d+")


class MissingEmbeddingError(KeyError):
    pass


def compass_point(bearing: float) -> str:
    """8-way sector; N covers [-22.5°, 22.5°)."""
    return COMPASS[int(((bearing + 22.5) % 360.0) // 45.0)]


def nearest_neighbors(poi: Poi, world: Sequence[Poi], k: int = 10) -> list[tuple[Poi, float]]:
    """The ``k`` closest other POIs as (poi, metres), ascending distance then id."""
    others = [p for p in world if p.id != poi.id]
    if not others:
        return []
    d = haversine_m(poi.lat, poi.lon, np.array([p.lat for p in others]), np.array([p.lon for p in others]))
    ids = np.array([p.id for p in others])
    order = np.lexsort((ids, d))[:k]
    return [(others[i], float(d[i])) for i in order]


def build_prompt(poi: Poi, world: Sequence[Poi], k: int = 10) -> str:
    lines = [
        f"Coordinates: ({poi.lat:.5f}, {poi.lon:.5f})",
        f"Name: {poi.name}",
        f"Category: {poi.category}",
        f"Address: {poi.address}",
        "",
        "Nearby Places:",
    ]
    for other, dist in nearest_neighbors(poi, world, k):
        direction = compass_point(bearing_deg(poi.lat, poi.lon, other.lat, other.lon))
        lines.append(f"{dist / 1000:.1f} km {direction}: {other.name}")
    return "\n".join(lines) + "\n"


class TextEmbedder(Protocol):
    dim: int

    def embed(self, poi_id: int, prompt: str) -> np.ndarray: ...


class HashingEmbedder:
    """Deterministic offline embedder: signed feature hashing of word 1- and 2-grams, L2-normalized."""

    def __init__(self, dim: int = TEXT_DIM, ngrams: int = 2):
        self.dim = dim
        self.ngrams = ngrams

    def _slot(self, gram: str) -> tuple[int, float]:
        h = int.from_bytes(hashlib.blake2b(gram.encode(), digest_size=8).digest(), "little")
        return h % self.dim, (1.0 if (h >> 63) & 1 else -1.0)

    def embed_text(self, text: str) -> np.ndarray:
        toks = _TOKEN.findall(text.lower())
        counts: dict[str, int] = {}
        for n in range(1, self.ngrams + 1):
            for i in range(len(toks) - n + 1):
                g = " ".join(toks[i:i + n])
                counts[g] = counts.get(g, 0) + 1
        v = np.zeros(self.dim)
        for g in sorted(counts):
            slot, sign = self._slot(g)
            v[slot] += sign * (1.0 + math.log(counts[g]))
        norm = np.linalg.norm(v)
        return v / norm if norm > 0 else v

    def embed(self, poi_id: int, prompt: str) -> np.ndarray:
        return self.embed_text(prompt)


class PrecomputedEmbedder:
    """Vectors supplied by an external service, one JSONL row ``{poi_id, vector}`` per POI."""

    def __init__(self, path):
        self.vectors: dict[int, np.ndarray] = {}
        with open(path) as f:
            for line in f:
                if line.strip():
                    r = json.loads(line)
                    self.vectors[int(r["poi_id"])] = np.asarray(r["vector"], dtype=float)
        dims = {len(v) for v in self.vectors.values()}
        if len(dims) > 1:
            raise ValueError(f"{path}: mixed embedding dimensions {sorted(dims)}")
        self.dim = dims.pop() if dims else TEXT_DIM

    def embed(self, poi_id: int, prompt: str) -> np.ndarray:
        try:
            return self.vectors[int(poi_id)]
        except KeyError:
            raise MissingEmbeddingError(f"no precomputed text embedding for POI {poi_id}") from None


def embed_world(world: Sequence[Poi], provider: TextEmbedder) -> dict[int, np.ndarray]:
    out, missing = {}, []
    for p in world:
        try:
            out[p.id] = provider.embed(p.id, build_prompt(p, world))
        except MissingEmbeddingError:
            missing.append(p.id)
    if missing:
        raise MissingEmbeddingError(f"missing text embeddings for POI ids {missing}")
    return out


def write_text_embeddings(path, vectors: Mapping[int, np.ndarray]) -> None:
    with open(path, "w") as f:
        for pid in sorted(vectors):
            f.write(json.dumps({"poi_id": pid, "vector": [float(x) for x in vectors[pid]]}) + "\n")


def dump_prompts(directory, world: Sequence[Poi]) -> int:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for p in world:
        (directory / f"poi_{p.id}.txt").write_text(build_prompt(p, world))
    return len(world)


class TextProjection(nn.Module):
    """Linear map W: text space (d_u) -> mobility space (d_h)."""

    def __init__(self, d_h: int, d_u: int = TEXT_DIM):
        super().__init__()
        bound = 1.0 / math.sqrt(d_u)
        self.weight = nn.Parameter(torch.empty(d_h, d_u).uniform_(-bound, bound))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return nc.matmul(t, self.weight.T)


def text_align_loss(z: torch.Tensor, text: torch.Tensor, proj: TextProjection) -> torch.Tensor:
    """Mean of 1 - cos(z_p, W t_p) over the given POIs."""
    return (1.0 - nc.cosine_sim(z, proj(text))).mean()
