"""Visit feature encoders: multi-scale location sinusoids, Time2Vec, positional encoding."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

# unit vectors at 0, 120 and 240 degrees
DIRECTIONS = np.array([[math.cos(a), math.sin(a)] for a in (0.0, 2 * math.pi / 3, 4 * math.pi / 3)])


class ConfigurationError(ValueError):
    pass


@dataclass
class LocationEncoderParams:
    scale_count: int = 64
    lambda_min: float = 0.1
    lambda_max: float = 1.4142

    def __post_init__(self):
        if not self.lambda_min < self.lambda_max:
            raise ConfigurationError("lambda_min must be below lambda_max")
        if self.scale_count < 1:
            raise ConfigurationError("scale_count must be positive")

    @property
    def dim(self) -> int:
        return 6 * self.scale_count

    def wavelengths(self) -> np.ndarray:
        s = self.scale_count
        if s == 1:
            return np.array([self.lambda_min])
        ratio = self.lambda_max / self.lambda_min
        return self.lambda_min * ratio ** (np.arange(s) / (s - 1))


class LocationEncoder(nn.Module):
    """Parameter-free hexagonal multi-scale sinusoid base.

    For every wavelength and each of the three directions the output carries
    ``[sin(<x, a>·2π/λ), cos(<x, a>·2π/λ)]``, ordered scale-major.
    """

    def __init__(self, params: LocationEncoderParams | None = None):
        super().__init__()
        self.params = params or LocationEncoderParams()
        lam = torch.tensor(self.params.wavelengths(), dtype=torch.float64)
        dirs = torch.tensor(DIRECTIONS, dtype=torch.float64)
        # [2, S*3] projection already scaled by angular frequency
        proj = (dirs.T[:, None, :] * (2 * math.pi / lam)[None, :, None]).reshape(2, -1)
        self.register_buffer("proj", proj, persistent=False)

    @property
    def dim(self) -> int:
        return self.params.dim

    def forward(self, xy: torch.Tensor) -> torch.Tensor:
        phase = xy.to(self.proj.dtype) @ self.proj  # [..., S*3]
        out = torch.stack([torch.sin(phase), torch.cos(phase)], dim=-1).flatten(-2)
        return out.to(torch.get_default_dtype())


def time2vec_ladder(n: int, max_harmonic: float) -> np.ndarray:
    """Initial frequencies: linear slot 1, then 2π·2^k with k evenly spaced up to log2(max_harmonic)."""
    w = np.ones(n)
    if n > 1:
        k = np.linspace(0.0, math.log2(max_harmonic), n - 1)
        w[1:] = 2 * math.pi * 2.0 ** k
    return w


class Time2Vec(nn.Module):
    """``[ω0 τ + φ0, sin(ω1 τ + φ1), ...]`` for a scalar input in [0, 1]."""

    def __init__(self, dim: int, max_harmonic: float = 24.0):
        super().__init__()
        if dim < 1:
            raise ConfigurationError("Time2Vec dimension must be positive")
        self.omega = nn.Parameter(torch.tensor(time2vec_ladder(dim, max_harmonic), dtype=torch.get_default_dtype()))
        self.phi = nn.Parameter(torch.zeros(dim))

    def forward(self, tau: torch.Tensor) -> torch.Tensor:
        z = tau.unsqueeze(-1) * self.omega + self.phi
        return torch.cat([z[..., :1], torch.sin(z[..., 1:])], dim=-1)


class TimeEncoder(nn.Module):
    """Hour-of-day and day-of-week Time2Vec blocks, concatenated (d_t/2 each)."""

    def __init__(self, dim: int):
        super().__init__()
        if dim % 2:
            raise ConfigurationError(f"time encoding dimension must be even, got {dim}")
        self.dim = dim
        self.hour = Time2Vec(dim // 2, max_harmonic=24.0)
        self.day = Time2Vec(dim // 2, max_harmonic=7.0)

    def forward(self, hour_frac: torch.Tensor, day_frac: torch.Tensor) -> torch.Tensor:
        return torch.cat([self.hour(hour_frac), self.day(day_frac)], dim=-1)


class VisitEncoder(nn.Module):
    """Initial visit vector ``[location ‖ arrival ‖ departure]``."""

    def __init__(self, location: LocationEncoderParams | None = None, time_dim: int = 64, d_h: int | None = None):
        super().__init__()
        self.location = LocationEncoder(location)
        self.arrival = TimeEncoder(time_dim)
        self.departure = TimeEncoder(time_dim)
        self.d_h = self.location.dim + 2 * time_dim
        if d_h is not None and d_h != self.d_h:
            raise ConfigurationError(
                f"d_h={d_h} but location ({self.location.dim}) + 2 x time ({time_dim}) = {self.d_h}")

    def forward(self, xy, arr_hour, arr_day, dep_hour, dep_day) -> torch.Tensor:
        return torch.cat([self.location(xy), self.arrival(arr_hour, arr_day), self.departure(dep_hour, dep_day)], -1)


def positional_encoding(length: int, d_h: int) -> torch.Tensor:
    """Standard transformer sinusoids, ``[length, d_h]``."""
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    k = torch.arange(0, d_h, 2, dtype=torch.float64)
    div = torch.pow(10000.0, k / d_h)
    pe = torch.zeros(length, d_h, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos / div)
    pe[:, 1::2] = torch.cos(pos / div[: d_h // 2])
    return pe.to(torch.get_default_dtype())
