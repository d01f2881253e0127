"""Objective ablations on a synthetic world: pretrain each variant, then probe its embeddings."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import numcore as nc
from . import probes as P
from .geodata import Poi, WorldConfig, generate_world, simulate_traces
from .pipeline import Preprocessed, preprocess
from .textalign import HashingEmbedder, embed_world
from .train import ModelConfig, PretrainConfig, pretrain
from .transfer import KernelConfig, precompute_transfer

# (λ_anchor, λ_sparse, λ_text), cumulative in the order the objectives are added
VARIANTS: dict[str, tuple[float, float, float]] = {
    "contrastive": (0.0, 0.0, 0.0),
    "+kl_sparse": (0.0, 1.0, 0.0),
    "+kl_anchor": (1.0, 1.0, 0.0),
    "+text_align": (1.0, 1.0, 1.0),
}


@dataclass
class Corpus:
    world: list[Poi]
    pre: Preprocessed
    priors: dict
    text: dict[int, np.ndarray]

    @property
    def poi_ids(self) -> list[int]:
        return [p.id for p in self.world]

    def text_matrix(self) -> np.ndarray:
        return np.stack([self.text[p] for p in self.poi_ids])


def build_corpus(world_cfg: WorldConfig, kernel: KernelConfig | None = None, m_visits: int = 50) -> Corpus:
    world = generate_world(world_cfg)
    pre = preprocess(simulate_traces(world, world_cfg), world, m_visits=m_visits)
    priors, _ = precompute_transfer(world, pre.partition, pre.distributions, kernel or KernelConfig())
    text = embed_world(world, HashingEmbedder())
    return Corpus(world, pre, priors, text)


def pretrain_variant(corpus: Corpus, variant: str, seed: int, base: PretrainConfig | None = None,
                     model_cfg: ModelConfig | None = None, bbox=None):
    la, ls, lt = VARIANTS[variant]
    cfg = replace(base or PretrainConfig(), lambda_anchor=la, lambda_sparse=ls, lambda_text=lt, seed=seed)
    nc.seed_everything(seed)
    kw = {} if bbox is None else {"bbox": bbox}
    return pretrain(corpus.pre.sequences, corpus.world, cfg, model_cfg or ModelConfig.desk(),
                    corpus.pre.partition, corpus.pre.distributions, corpus.priors, corpus.text, **kw)


@dataclass
class AblationRun:
    variant: str
    seed: int
    embeddings: np.ndarray
    losses: list[dict] = field(default_factory=list)


def run_ablation(corpus: Corpus, seeds: Sequence[int], variants: Sequence[str] = tuple(VARIANTS),
                 base: PretrainConfig | None = None, model_cfg: ModelConfig | None = None) -> list[AblationRun]:
    runs = []
    for v in variants:
        for s in seeds:
            model, rep = pretrain_variant(corpus, v, s, base, model_cfg)
            runs.append(AblationRun(v, s, model.embeddings(), rep.epochs))
    return runs


def probe_open_hours(corpus: Corpus, runs: Sequence[AblationRun], cfg: P.ProbeConfig,
                     mode: str = "mobility") -> dict[str, list[P.ProbeResult]]:
    """Open-hours probe per run; the split and head seed follow the pretraining seed."""
    labels = P.task_labels("open_hours", corpus.world)
    text = corpus.text_matrix() if mode != "mobility" else None
    out: dict[str, list[P.ProbeResult]] = {}
    for r in runs:
        split = P.make_split(labels, r.seed, stratify=False)
        out.setdefault(r.variant, []).append(
            P.finetune("open_hours", r.embeddings, text, labels, split, cfg, mode, r.seed, label=r.variant))
    return out


def median_metric(results: Sequence[P.ProbeResult], key: str = "f1") -> float:
    return float(np.median([r.metrics[key] for r in results]))


def role_f1(corpus: Corpus, results: Sequence[P.ProbeResult], role: str) -> list[float]:
    """Open-hours F1 per run restricted to anchor or sparse test POIs."""
    labels = P.task_labels("open_hours", corpus.world)
    part = corpus.pre.partition
    ids = part.anchors if role == "anchor" else part.sparse
    row_of = {p: i for i, p in enumerate(corpus.poi_ids)}
    rows = [row_of[p] for p in ids]
    return [P.subset_metrics(r, labels, rows)["f1"] for r in results]


def summary_lines(medians: Mapping[str, float]) -> list[str]:
    return [f"{k}: {v:.4f}" for k, v in medians.items()]
