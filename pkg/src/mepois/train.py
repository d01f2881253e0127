"""Pretraining: window batches, the joint objective, Adam steps, per-epoch checkpoints, embedding export."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn

from . import numcore as nc
from .encoders import LocationEncoderParams, VisitEncoder
from .geodata import HOUSTON_BBOX, Poi
from .pipeline import Partition, VisitDistribution, VisitSequence, normalize_location, normalize_time
from .prototypes import DegenerateBatch, PrototypeMatrix, contrastive_batch, export_embeddings as _write_embeddings
from .prototypes import info_nce
from .seqmodel import SequenceEncoder, TransformerConfig

log = logging.getLogger(__name__)

IDENTITY_RTOL = 1e-5


class TrainingError(RuntimeError):
    pass


class TrainingDiverged(TrainingError):
    pass


@dataclass
class ModelConfig:
    """Architecture sizes. ``d_h = 6·scale_count + 2·time_dim``."""

    scale_count: int = 64
    time_dim: int = 64
    layers: int = 4
    heads: int = 8
    ffn_dim: int = 1024
    window: int = 32
    tau: float = 0.1

    @property
    def d_h(self) -> int:
        return 6 * self.scale_count + 2 * self.time_dim

    @classmethod
    def desk(cls) -> "ModelConfig":
        """Reduced sizes that train in minutes on one CPU core (d_h = 64)."""
        return cls(scale_count=8, time_dim=8, layers=2, heads=4, ffn_dim=128)


@dataclass
class PretrainConfig:
    lambda_anchor: float = 1.0
    lambda_sparse: float = 1.0
    lambda_text: float = 1.0
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 16
    seed: int = 0
    sparse_sample: int = 256
    anchor_sample: int = 64
    text_sample: int = 256
    clip_norm: float = 1.0
    full_aux: bool = False  # evaluate auxiliary losses on every POI each step instead of sampling

    def __post_init__(self):
        for name in ("lambda_anchor", "lambda_sparse", "lambda_text"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


# ------------------------------------------------------------------ data


@dataclass
class WindowData:
    """Visit windows as padded arrays ``[n_windows, w]``; ``poi_row`` is -1 for UNKNOWN or padding."""

    xy: np.ndarray  # [N, w, 2]
    times: np.ndarray  # [N, w, 4] arrival hour, arrival day, departure hour, departure day
    poi_row: np.ndarray  # [N, w] int64
    length: np.ndarray  # [N]

    def __len__(self):
        return len(self.length)

    @property
    def window(self) -> int:
        return self.poi_row.shape[1]

    def mask(self) -> np.ndarray:
        return np.arange(self.window)[None, :] < self.length[:, None]


def make_windows(sequences: Sequence[VisitSequence], row_of: Mapping[int, int], window: int = 32,
                 bbox=HOUSTON_BBOX) -> WindowData:
    """Cut every sequence into consecutive non-overlapping windows of at most ``window`` visits."""
    chunks = [s.visits[i:i + window] for s in sequences for i in range(0, len(s.visits), window)]
    n = len(chunks)
    xy = np.zeros((n, window, 2))
    times = np.zeros((n, window, 4))
    rows = np.full((n, window), -1, dtype=np.int64)
    length = np.zeros(n, dtype=np.int64)
    for k, vs in enumerate(chunks):
        m = len(vs)
        length[k] = m
        x, y = normalize_location([v.lat for v in vs], [v.lon for v in vs], bbox)
        xy[k, :m, 0], xy[k, :m, 1] = x, y
        ah, ad = normalize_time([v.arrival for v in vs])
        dh, dd = normalize_time([v.departure for v in vs])
        times[k, :m] = np.stack([ah, ad, dh, dd], axis=1)
        rows[k, :m] = [row_of[v.poi_id] if v.poi_id is not None else -1 for v in vs]
    return WindowData(xy, times, rows, length)


def epoch_batches(n_windows: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """A fresh permutation per epoch, cut into batches; each window appears exactly once."""
    perm = np.random.default_rng([seed, epoch]).permutation(n_windows)
    return [perm[i:i + batch_size] for i in range(0, n_windows, batch_size)]


@dataclass
class Batch:
    xy: torch.Tensor
    times: torch.Tensor
    poi_row: torch.Tensor
    mask: torch.Tensor

    @property
    def unique_pois(self) -> int:
        return int(torch.unique(self.poi_row[self.poi_row >= 0]).numel())

    @property
    def visits(self) -> int:
        return int(self.mask.sum())


def assemble_batch(data: WindowData, idx: np.ndarray) -> Batch:
    length = int(data.length[idx].max())
    dt = torch.get_default_dtype()
    return Batch(
        xy=torch.as_tensor(data.xy[idx, :length], dtype=dt),
        times=torch.as_tensor(data.times[idx, :length], dtype=dt),
        poi_row=torch.as_tensor(data.poi_row[idx, :length]),
        mask=torch.as_tensor(data.mask()[idx, :length]),
    )


# ------------------------------------------------------------------ model


class MEPOI(nn.Module):
    """Visit encoder + transformer + prototypes; the distribution head and text projection are built on demand."""

    def __init__(self, poi_ids: Sequence[int], model_cfg: ModelConfig, with_head: bool = False,
                 text_dim: int | None = None):
        super().__init__()
        self.model_cfg = model_cfg
        d_h = model_cfg.d_h
        self.visit_encoder = VisitEncoder(LocationEncoderParams(scale_count=model_cfg.scale_count),
                                          model_cfg.time_dim, d_h)
        self.encoder = SequenceEncoder(TransformerConfig(model_cfg.layers, model_cfg.heads, d_h,
                                                         model_cfg.ffn_dim, model_cfg.window))
        self.prototypes = PrototypeMatrix(poi_ids, d_h)
        self.head = None
        self.proj = None
        if with_head:
            from .transfer import DistributionHead
            self.head = DistributionHead(d_h)
        if text_dim is not None:
            from .textalign import TextProjection
            self.proj = TextProjection(d_h, text_dim)

    def encode(self, b: Batch) -> torch.Tensor:
        t = b.times
        h0 = self.visit_encoder(b.xy, t[..., 0], t[..., 1], t[..., 2], t[..., 3])
        return self.encoder(h0, b.mask)

    def embeddings(self) -> np.ndarray:
        return self.prototypes.weight.detach().cpu().numpy().copy()


@dataclass
class AuxTargets:
    """Row-aligned targets for the auxiliary objectives (any may be absent)."""

    anchor_rows: np.ndarray | None = None
    anchor_bins: torch.Tensor | None = None
    sparse_rows: np.ndarray | None = None
    sparse_bins: torch.Tensor | None = None
    text: torch.Tensor | None = None  # [|P|, d_u] aligned with prototype rows


def build_aux(model: MEPOI, cfg: PretrainConfig, partition: Partition | None,
              anchor_dists: Mapping[int, VisitDistribution] | None, priors: Mapping | None,
              text: Mapping[int, np.ndarray] | None) -> AuxTargets:
    aux = AuxTargets()
    idx = model.prototypes.index
    dt = torch.get_default_dtype()
    if cfg.lambda_anchor > 0:
        if partition is None or anchor_dists is None:
            raise TrainingError("lambda_anchor > 0 needs the partition and anchor distributions (run preprocess)")
        ids = sorted(partition.anchors)
        aux.anchor_rows = np.array([idx[p] for p in ids])
        aux.anchor_bins = torch.as_tensor(np.stack([anchor_dists[p].bins for p in ids]), dtype=dt)
    if cfg.lambda_sparse > 0:
        if partition is None or priors is None:
            raise TrainingError("lambda_sparse > 0 needs transferred priors (run precompute)")
        ids = sorted(partition.sparse)
        missing = [p for p in ids if p not in priors]
        if missing:
            raise TrainingError(f"priors missing for sparse POIs {missing[:10]} (run precompute)")
        aux.sparse_rows = np.array([idx[p] for p in ids])
        aux.sparse_bins = torch.as_tensor(np.stack([np.asarray(getattr(priors[p], "bins", priors[p]))
                                                    for p in ids]), dtype=dt)
    if cfg.lambda_text > 0:
        if text is None:
            raise TrainingError("lambda_text > 0 needs text embeddings (run precompute)")
        missing = [p for p in model.prototypes.poi_ids if p not in text]
        if missing:
            raise TrainingError(f"text embeddings missing for POIs {missing[:10]}")
        aux.text = torch.as_tensor(np.stack([text[p] for p in model.prototypes.poi_ids]), dtype=dt)
    return aux


def _sample(rng: np.random.Generator, n: int, k: int, full: bool) -> np.ndarray:
    if full or k >= n:
        return np.arange(n)
    return np.sort(rng.choice(n, size=k, replace=False))


def step_losses(model: MEPOI, cfg: PretrainConfig, batch: Batch, aux: AuxTargets,
                key: Sequence[int]) -> tuple[torch.Tensor, dict[str, float]]:
    """Joint objective for one step: ``L_ME-POI + λ_a·L_anchor + λ_s·L_sparse + λ_t·L_text``.

    Each auxiliary term draws its subset from its own stream ``[*key, j]``, so
    switching one term off leaves the others' samples unchanged.
    Raises ``DegenerateBatch`` when the batch has fewer than two distinct POIs.
    """
    h = model.encode(batch)
    flat_h = h.reshape(-1, h.shape[-1])
    flat_rows = torch.where(batch.mask, batch.poi_row, torch.full_like(batch.poi_row, -1)).reshape(-1)
    keep, uniq, target = contrastive_batch(flat_rows)
    z_batch = model.prototypes(uniq)
    l_me = info_nce(flat_h[keep], target, z_batch, model.model_cfg.tau)
    total = l_me
    parts = {"me_poi": l_me.item(), "kl_anchor": 0.0, "kl_sparse": 0.0, "text_align": 0.0}
    if cfg.lambda_anchor > 0:
        from .transfer import kl_anchor_loss
        sel = _sample(np.random.default_rng([*key, 0]), len(aux.anchor_rows), cfg.anchor_sample, cfg.full_aux)
        rows = torch.as_tensor(aux.anchor_rows[sel])
        l_a = kl_anchor_loss(aux.anchor_bins[sel], model.prototypes(rows), model.head)
        total = total + cfg.lambda_anchor * l_a
        parts["kl_anchor"] = l_a.item()
    if cfg.lambda_sparse > 0 and len(aux.sparse_rows):
        from .transfer import kl_sparse_loss
        sel = _sample(np.random.default_rng([*key, 1]), len(aux.sparse_rows), cfg.sparse_sample, cfg.full_aux)
        rows = torch.as_tensor(aux.sparse_rows[sel])
        l_s = kl_sparse_loss(aux.sparse_bins[sel], model.prototypes(rows), model.head)
        total = total + cfg.lambda_sparse * l_s
        parts["kl_sparse"] = l_s.item()
    if cfg.lambda_text > 0:
        from .textalign import text_align_loss
        sel = _sample(np.random.default_rng([*key, 2]), aux.text.shape[0], cfg.text_sample, cfg.full_aux)
        sel = torch.as_tensor(sel)
        l_t = text_align_loss(model.prototypes(sel), aux.text[sel], model.proj)
        total = total + cfg.lambda_text * l_t
        parts["text_align"] = l_t.item()
    parts["total"] = total.item()
    return total, parts


def decomposition_error(parts: Mapping[str, float], cfg: PretrainConfig) -> float:
    """Relative gap between the logged total and the λ-weighted sum of its components."""
    expect = (parts["me_poi"] + cfg.lambda_anchor * parts["kl_anchor"] + cfg.lambda_sparse * parts["kl_sparse"]
              + cfg.lambda_text * parts["text_align"])
    return abs(parts["total"] - expect) / max(abs(expect), 1e-12)


# ------------------------------------------------------------------ loop


@dataclass
class TrainingReport:
    epochs: list[dict] = field(default_factory=list)
    steps: int = 0
    skipped_batches: int = 0
    wall_time: float = 0.0

    def loss(self, epoch: int, key: str = "total") -> float:
        return self.epochs[epoch - 1][key]


def _checkpoint_tensors(model: MEPOI, opt: nc.AdamW) -> dict[str, torch.Tensor]:
    out = {f"model.{k}": v for k, v in model.state_dict().items()}
    out.update(opt.state_tensors())
    return out


def save_checkpoint(path, model: MEPOI, opt: nc.AdamW, meta: dict) -> Path:
    meta = dict(meta, optimizer_step=opt.state.step, poi_ids=model.prototypes.poi_ids,
                model_config=asdict(model.model_cfg), with_head=model.head is not None,
                text_dim=None if model.proj is None else int(model.proj.weight.shape[1]))
    return nc.save_tensors(path, _checkpoint_tensors(model, opt), meta)


def load_model(path) -> tuple[MEPOI, dict, dict[str, torch.Tensor]]:
    tensors, meta = nc.load_tensors(path)
    model = MEPOI(meta["poi_ids"], ModelConfig(**meta["model_config"]), meta["with_head"], meta["text_dim"])
    model.load_state_dict({k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")})
    return model, meta, tensors


def _params(model: MEPOI) -> dict[str, torch.Tensor]:
    return dict(model.named_parameters())


def pretrain(sequences: Sequence[VisitSequence], world: Sequence[Poi], cfg: PretrainConfig,
             model_cfg: ModelConfig | None = None, partition: Partition | None = None,
             anchor_dists: Mapping[int, VisitDistribution] | None = None, priors: Mapping | None = None,
             text: Mapping[int, np.ndarray] | None = None, out_dir=None, resume: bool = False,
             bbox=HOUSTON_BBOX, max_steps: int | None = None) -> tuple[MEPOI, TrainingReport]:
    """Run ``cfg.epochs`` passes over all visit windows.

    With ``out_dir`` set, a step log (``steps.jsonl``), a per-epoch
    ``summary.json`` and the latest checkpoint (``checkpoint/``) are written
    there.  ``resume`` continues from that checkpoint.  ``max_steps`` stops
    early (used to simulate interruptions).
    """
    model_cfg = model_cfg or ModelConfig()
    t0 = time.perf_counter()
    torch.manual_seed(cfg.seed)
    text_dim = None
    if cfg.lambda_text > 0:
        if not text:
            raise TrainingError("lambda_text > 0 needs text embeddings (run precompute)")
        text_dim = len(next(iter(text.values())))
    model = MEPOI([p.id for p in world], model_cfg, cfg.lambda_anchor > 0 or cfg.lambda_sparse > 0, text_dim)
    aux = build_aux(model, cfg, partition, anchor_dists, priors, text)
    data = make_windows(sequences, model.prototypes.index, model_cfg.window, bbox)
    if len(data) == 0:
        raise TrainingError("no visit windows to train on")
    opt = nc.Adam(_params(model), lr=cfg.lr)
    report = TrainingReport()
    start_epoch = 1
    out = Path(out_dir) if out_dir is not None else None
    ckpt = out / "checkpoint" if out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if resume:
        if ckpt is None or not (ckpt / "manifest.json").exists():
            raise TrainingError(f"nothing to resume: no checkpoint under {out_dir}")
        tensors, meta = nc.load_tensors(ckpt)
        model.load_state_dict({k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")})
        opt.load_state_tensors(tensors, meta["optimizer_step"])
        report = TrainingReport(meta["epochs"], meta["steps"], meta["skipped_batches"], meta["wall_time"])
        start_epoch = meta["epoch"] + 1
    base_wall = report.wall_time
    step_log = open(out / "steps.jsonl", "a" if resume else "w") if out is not None else None
    try:
        for epoch in range(start_epoch, cfg.epochs + 1):
            sums: dict[str, float] = {}
            n = 0
            for k, idx in enumerate(epoch_batches(len(data), cfg.batch_size, cfg.seed, epoch)):
                if max_steps is not None and report.steps >= max_steps:
                    return model, report
                batch = assemble_batch(data, idx)
                try:
                    total, parts = step_losses(model, cfg, batch, aux, (cfg.seed, epoch, k))
                except DegenerateBatch:
                    report.skipped_batches += 1
                    continue
                if not math.isfinite(parts["total"]):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {k}; "
                                           f"last good checkpoint kept at {ckpt}")
                err = decomposition_error(parts, cfg)
                if err > IDENTITY_RTOL:
                    raise TrainingError(f"loss decomposition off by {err:.2e} at epoch {epoch} step {k}")
                opt.zero_grad()
                nc.backward(total)
                nc.clip_grad_norm(_params(model).values(), cfg.clip_norm)
                opt.step()
                report.steps += 1
                n += 1
                for key, v in parts.items():
                    sums[key] = sums.get(key, 0.0) + v
                if step_log is not None:
                    step_log.write(json.dumps({"epoch": epoch, "step": k, **parts,
                                               "visits": batch.visits, "unique_pois": batch.unique_pois}) + "\n")
            summary = {key: v / max(n, 1) for key, v in sums.items()}
            summary.update(epoch=epoch, steps=n)
            report.epochs.append(summary)
            report.wall_time = base_wall + time.perf_counter() - t0
            log.info(json.dumps({"event": "epoch", **summary}))
            if out is not None:
                step_log.flush()
                save_checkpoint(ckpt, model, opt, {"epoch": epoch, "steps": report.steps,
                                                   "skipped_batches": report.skipped_batches,
                                                   "epochs": report.epochs, "wall_time": report.wall_time,
                                                   "config": asdict(cfg)})
                (out / "summary.json").write_text(json.dumps(asdict(report), indent=1))
    finally:
        if step_log is not None:
            step_log.close()
    report.wall_time = base_wall + time.perf_counter() - t0
    return model, report


# ------------------------------------------------------------------ export


def export_embeddings(checkpoint, world: Sequence[Poi], out_dir, csv_mode: bool = False) -> Path:
    """Write the prototype matrix of ``checkpoint``; aborts if its POI ids differ from the world's."""
    model, meta, _ = load_model(checkpoint)
    world_ids = [p.id for p in world]
    if sorted(world_ids) != sorted(meta["poi_ids"]):
        extra = sorted(set(meta["poi_ids"]) - set(world_ids))[:10]
        lacking = sorted(set(world_ids) - set(meta["poi_ids"]))[:10]
        raise TrainingError(f"checkpoint POI ids do not match the world file "
                            f"(only in checkpoint: {extra}, only in world: {lacking})")
    return _write_embeddings(out_dir, model.prototypes.poi_ids, model.embeddings(), csv_mode)
