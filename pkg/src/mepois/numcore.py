"""Dense tensor primitives, reverse-mode gradients, optimizers and checkpoints.

Differentiable values are plain ``torch.Tensor`` objects with ``requires_grad``;
this module pins down the handful of operations the model needs, with the
shape checks, epsilons and failure modes the rest of the package relies on.
"""

from __future__ import annotations

import contextlib
import json
import logging
import math
import os
import shutil
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import torch

log = logging.getLogger(__name__)

LAYERNORM_EPS = 1e-5
COSINE_EPS = 1e-8
KL_EPS = 1e-12

DEBUG = bool(os.environ.get("MEPOI_DEBUG"))


class DimensionError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


def set_precision(bits: int) -> None:
    if bits == 32:
        torch.set_default_dtype(torch.float32)
    elif bits == 64:
        torch.set_default_dtype(torch.float64)
    else:
        raise ValueError(f"precision must be 32 or 64, got {bits}")


@contextlib.contextmanager
def precision(bits: int):
    """Temporarily switch the default float width (gradient checks use 64)."""
    old = torch.get_default_dtype()
    set_precision(bits)
    try:
        yield
    finally:
        torch.set_default_dtype(old)


def seed_everything(seed: int, threads: int | None = 1) -> None:
    """Seed torch/numpy and, by default, force single-threaded kernels."""
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))
    if threads is not None:
        torch.set_num_threads(threads)


def tensor(data, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(data), dtype=torch.get_default_dtype()).clone()
    t.requires_grad_(requires_grad)
    return t


# ---------------------------------------------------------------- operations


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1:
        raise DimensionError("matmul needs tensors with at least one dimension")
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise DimensionError(f"matmul inner dimensions disagree: {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


def softmax(x: torch.Tensor, axis: int = -1, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Max-shifted softmax. ``mask`` (bool, True = keep) sends entries to -inf."""
    if mask is not None:
        x = x.masked_fill(~mask, float("-inf"))
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=axis, keepdim=True)


def log_softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    return shifted - torch.log(torch.exp(shifted).sum(dim=axis, keepdim=True))


def layernorm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = LAYERNORM_EPS) -> torch.Tensor:
    if x.shape[-1] < 2:
        raise DimensionError("layernorm needs a normalized dimension of at least 2")
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    return centered / torch.sqrt(var + eps) * gain + bias


def cosine_sim(a: torch.Tensor, b: torch.Tensor, eps: float = COSINE_EPS) -> torch.Tensor:
    """Cosine similarity along the last axis (broadcasting over leading axes)."""
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"cosine_sim dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}")
    na = torch.sqrt((a * a).sum(-1) + eps * eps)
    nb = torch.sqrt((b * b).sum(-1) + eps * eps)
    if DEBUG and (bool((na <= eps).any()) or bool((nb <= eps).any())):
        log.warning("cosine_sim: zero-norm input, result is epsilon-guarded")
    return (a * b).sum(-1) / (na * nb)


def normalize_rows(x: torch.Tensor, eps: float = COSINE_EPS) -> torch.Tensor:
    return x / torch.sqrt((x * x).sum(-1, keepdim=True) + eps * eps)


def cosine_matrix(a: torch.Tensor, b: torch.Tensor, eps: float = COSINE_EPS) -> torch.Tensor:
    """All-pairs cosine similarity, ``[n, d] x [m, d] -> [n, m]``."""
    return matmul(normalize_rows(a, eps), normalize_rows(b, eps).T)


def kl_divergence(r: torch.Tensor, q: torch.Tensor, eps: float = KL_EPS) -> torch.Tensor:
    """KL(r || q) along the last axis, with 0 log 0 = 0. Gradient reaches ``q`` only."""
    r = r.detach()
    if DEBUG and bool((q <= 0).any()):
        log.warning("kl_divergence: q has non-positive entries; clamping to %g", eps)
    q = q.clamp_min(eps)
    pos = r > 0
    safe_r = torch.where(pos, r, torch.ones_like(r))
    terms = torch.where(pos, r * (torch.log(safe_r) - torch.log(q)), torch.zeros_like(r))
    return terms.sum(-1)


def kl_divergence_logits(r: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    """KL(r || softmax(logits)), computed through log-softmax for stability."""
    r = r.detach()
    logq = log_softmax(logits, -1)
    pos = r > 0
    safe_r = torch.where(pos, r, torch.ones_like(r))
    return torch.where(pos, r * (torch.log(safe_r) - logq), torch.zeros_like(r)).sum(-1)


def backward(loss: torch.Tensor) -> None:
    if loss.numel() != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.backward()


def zero_grads(params: Iterable[torch.Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_or_zeros(p: torch.Tensor) -> torch.Tensor:
    return p.grad if p.grad is not None else torch.zeros_like(p)


def clip_grad_norm(params: Iterable[torch.Tensor], max_norm: float) -> float:
    params = [p for p in params if p.grad is not None]
    if not params:
        return 0.0
    total = math.sqrt(sum(float((p.grad.detach() ** 2).sum()) for p in params))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad.mul_(scale)
    return total


def numerical_gradient(fn: Callable[[], torch.Tensor], param: torch.Tensor, h: float = 1e-4) -> torch.Tensor:
    """Central finite differences of scalar ``fn()`` w.r.t. every entry of ``param``."""
    grad = torch.zeros_like(param)
    flat = param.data.view(-1)
    gflat = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = float(fn())
            flat[i] = orig - h
            down = float(fn())
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    num = float((a - b).abs().max())
    den = max(float(a.abs().max()), float(b.abs().max()), 1e-8)
    return num / den


# ---------------------------------------------------------------- optimizers


@dataclass
class OptimizerState:
    lr: float
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)


class AdamW:
    """Adam with decoupled weight decay; ``weight_decay=0`` gives plain Adam."""

    def __init__(self, params: Mapping[str, torch.Tensor], lr: float = 1e-3, weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.state = OptimizerState(lr=lr, weight_decay=weight_decay, betas=betas, eps=eps)
        for name, p in self.params.items():
            self.state.exp_avg[name] = torch.zeros_like(p, dtype=p.dtype)
            self.state.exp_avg_sq[name] = torch.zeros_like(p, dtype=p.dtype)

    def zero_grad(self) -> None:
        zero_grads(self.params.values())

    @torch.no_grad()
    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
                raise FloatingPointError(f"non-finite gradient in parameter '{name}'")
        st = self.state
        st.step += 1
        b1, b2 = st.betas
        bc1 = 1 - b1**st.step
        bc2 = 1 - b2**st.step
        for name, p in self.params.items():
            g = grad_or_zeros(p)
            if st.weight_decay:
                p.mul_(1 - st.lr * st.weight_decay)
            m = st.exp_avg[name]
            v = st.exp_avg_sq[name]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            denom = (v / bc2).sqrt_().add_(st.eps)
            p.addcdiv_(m, denom, value=-st.lr / bc1)

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for name in self.params:
            out[f"optim.exp_avg.{name}"] = self.state.exp_avg[name]
            out[f"optim.exp_avg_sq.{name}"] = self.state.exp_avg_sq[name]
        return out

    def load_state_tensors(self, tensors: Mapping[str, torch.Tensor], step: int) -> None:
        for name in self.params:
            self.state.exp_avg[name].copy_(tensors[f"optim.exp_avg.{name}"])
            self.state.exp_avg_sq[name].copy_(tensors[f"optim.exp_avg_sq.{name}"])
        self.state.step = step


def Adam(params: Mapping[str, torch.Tensor], lr: float = 1e-3, **kw) -> AdamW:
    return AdamW(params, lr=lr, weight_decay=0.0, **kw)


# ---------------------------------------------------------------- checkpoints

_DTYPES = {"float32": (torch.float32, "<f4"), "float64": (torch.float64, "<f8")}


def _dtype_name(t: torch.Tensor) -> str:
    if t.dtype == torch.float32:
        return "float32"
    if t.dtype == torch.float64:
        return "float64"
    raise TypeError(f"unsupported checkpoint dtype {t.dtype}")


def save_tensors(path: str | os.PathLike, tensors: Mapping[str, torch.Tensor], meta: dict | None = None) -> Path:
    """Write ``manifest.json`` plus one little-endian raw file per tensor.

    The directory is assembled next to ``path`` and renamed into place, so an
    interrupted write never clobbers the previous checkpoint.
    """
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    entries = []
    for i, (name, t) in enumerate(tensors.items()):
        dtype = _dtype_name(t)
        fname = f"{i:04d}.bin"
        arr = t.detach().cpu().numpy().astype(_DTYPES[dtype][1], copy=False)
        (tmp / fname).write_bytes(np.ascontiguousarray(arr).tobytes())
        entries.append({"name": name, "shape": list(t.shape), "dtype": dtype, "file": fname})
    manifest = {"endianness": "little", "byteorder_check": sys.byteorder, "tensors": entries, "meta": meta or {}}
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    if path.exists():
        old = path.with_name(path.name + ".old")
        if old.exists():
            shutil.rmtree(old)
        path.rename(old)
        tmp.rename(path)
        shutil.rmtree(old)
    else:
        tmp.rename(path)
    return path


def load_tensors(path: str | os.PathLike) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("endianness") != "little":
        raise ContractError(f"{path}: unsupported endianness {manifest.get('endianness')!r}")
    out = {}
    for e in manifest["tensors"]:
        torch_dtype, np_dtype = _DTYPES[e["dtype"]]
        raw = np.frombuffer((path / e["file"]).read_bytes(), dtype=np_dtype)
        expected = int(np.prod(e["shape"])) if e["shape"] else 1
        if raw.size != expected:
            raise ContractError(f"{path / e['file']}: {raw.size} values, manifest says {expected}")
        out[e["name"]] = torch.from_numpy(raw.reshape(e["shape"]).astype(np_dtype)).to(torch_dtype)
    return out, manifest.get("meta", {})
