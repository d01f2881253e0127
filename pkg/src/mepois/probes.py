"""Frozen-embedding probes for the five map-enrichment tasks, their splits, metrics and reports."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn

from . import metrics as M
from . import numcore as nc
from .encoders import ConfigurationError
from .geodata import Poi
from .seqmodel import Linear

MODES = ("text", "mobility", "combined")


class StratificationError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    name: str
    out_dim: int
    loss: str  # multilabel_bce | bce | ce | mse
    metrics: tuple[str, str]
    higher_is_better: bool = True
    stratify: bool = False

    @property
    def primary(self) -> str:
        return self.metrics[0]


TASKS: dict[str, TaskSpec] = {
    "open_hours": TaskSpec("open_hours", 168, "multilabel_bce", ("f1", "auroc")),
    "closure": TaskSpec("closure", 1, "bce", ("f1", "auprc"), stratify=True),
    "intent": TaskSpec("intent", 4, "ce", ("f1", "auprc"), stratify=True),
    "busyness": TaskSpec("busyness", 168, "mse", ("mae", "cosine"), higher_is_better=False),
    "price": TaskSpec("price", 4, "ce", ("accuracy", "f1"), stratify=True),
}


def task_labels(task: str, world: Sequence[Poi]) -> np.ndarray:
    if task == "open_hours":
        return np.stack([p.truth.open_hours for p in world]).astype(np.float64)
    if task == "closure":
        return np.array([int(p.truth.closed) for p in world])
    if task == "intent":
        return np.array([p.truth.visit_intent for p in world])
    if task == "busyness":
        return np.stack([p.truth.busyness for p in world]).astype(np.float64)
    if task == "price":
        return np.array([p.truth.price_level for p in world])
    raise KeyError(f"unknown task {task!r}; expected one of {sorted(TASKS)}")


# ------------------------------------------------------------------ splits


@dataclass
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int


def _cut(idx: np.ndarray, fractions=(0.6, 0.2)):
    n = len(idx)
    n_tr = int(round(fractions[0] * n))
    n_va = int(round(fractions[1] * n))
    if n > 0 and n_tr == 0:
        n_tr = 1
    return idx[:n_tr], idx[n_tr:n_tr + n_va], idx[n_tr + n_va:]


def make_split(labels: np.ndarray, seed: int, stratify: bool) -> Split:
    """60/20/20 split over row indices, stratified per class when asked."""
    rng = np.random.default_rng([seed, 60_20_20])
    n = len(labels)
    if not stratify:
        tr, va, te = _cut(rng.permutation(n))
        return Split(np.sort(tr), np.sort(va), np.sort(te), seed)
    parts = ([], [], [])
    for c in np.unique(labels):
        members = rng.permutation(np.nonzero(labels == c)[0])
        for bucket, chunk in zip(parts, _cut(members)):
            bucket.append(chunk)
    tr, va, te = (np.sort(np.concatenate(b)) for b in parts)
    missing = sorted(set(np.unique(labels).tolist()) - set(np.unique(labels[tr]).tolist()))
    if missing:
        raise StratificationError(f"classes {missing} have no training examples")
    return Split(tr, va, te, seed)


# ------------------------------------------------------------------ head


class ProbeHead(nn.Module):
    """``MLP_head([MLP_p(z_me) ‖ MLP_t(z_text)])``; each MLP has one 256-unit ReLU layer.

    ``mode`` picks which branch is live: ``mobility`` and ``text`` replace
    the other branch's output with zeros.
    """

    def __init__(self, d_h: int, d_u: int, out_dim: int, mode: str = "combined", hidden: int = 256):
        super().__init__()
        if mode not in MODES:
            raise ConfigurationError(f"unknown probe mode {mode!r}; expected one of {MODES}")
        self.mode, self.d_h, self.d_u, self.hidden = mode, d_h, d_u, hidden
        self.mlp_p = Linear(d_h, hidden)
        self.mlp_t = Linear(d_u, hidden)
        self.fc1 = Linear(2 * hidden, hidden)
        self.fc2 = Linear(hidden, out_dim)

    def forward(self, z_me: torch.Tensor | None, z_text: torch.Tensor | None) -> torch.Tensor:
        n = (z_me if z_me is not None else z_text).shape[0]
        zeros = torch.zeros(n, self.hidden)
        if self.mode == "text":
            p = zeros
        else:
            if z_me is None or z_me.shape[-1] != self.d_h:
                raise ConfigurationError(f"mobility input must have {self.d_h} columns")
            p = torch.relu(self.mlp_p(z_me))
        if self.mode == "mobility":
            t = zeros
        else:
            if z_text is None or z_text.shape[-1] != self.d_u:
                raise ConfigurationError(f"text input must have {self.d_u} columns")
            t = torch.relu(self.mlp_t(z_text))
        return self.fc2(torch.relu(self.fc1(torch.cat([p, t], dim=-1))))


def task_loss(spec: TaskSpec, out: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if spec.loss == "multilabel_bce":
        return nn.functional.binary_cross_entropy_with_logits(out, y)
    if spec.loss == "bce":
        return nn.functional.binary_cross_entropy_with_logits(out[:, 0], y.to(out.dtype))
    if spec.loss == "ce":
        return -nc.log_softmax(out, -1).gather(1, y.long()[:, None]).mean()
    if spec.loss == "mse":
        return ((out - y) ** 2).mean()
    raise ValueError(spec.loss)


def task_outputs(spec: TaskSpec, out: torch.Tensor) -> np.ndarray:
    """Network output -> probabilities (classification) or values (regression)."""
    if spec.loss in ("multilabel_bce", "bce"):
        return torch.sigmoid(out).detach().numpy()
    if spec.loss == "ce":
        return nc.softmax(out, -1).detach().numpy()
    return out.detach().numpy()


def metric_suite(task: str, outputs: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> dict[str, float]:
    """Both reported metrics for ``task`` given :func:`task_outputs` and labels.

    ``threshold`` only applies to the binary closure task; open-hours bins
    are always cut at 0.5.
    """
    spec = TASKS[task]
    if task == "open_hours":
        return {"f1": M.f1_macro_multilabel(labels, outputs >= 0.5), "auroc": M.auroc_macro(outputs, labels)}
    if task == "closure":
        p = outputs.reshape(-1)
        return {"f1": M.f1_macro(labels, (p >= threshold).astype(int), 2), "auprc": M.auprc(p, labels)}
    if task == "intent":
        return {"f1": M.f1_macro(labels, outputs.argmax(1), spec.out_dim),
                "auprc": M.auprc_macro_ovr(outputs, labels, spec.out_dim)}
    if task == "busyness":
        return {"mae": M.mae(outputs, labels), "cosine": M.mean_cosine(outputs, labels)}
    if task == "price":
        pred = outputs.argmax(1)
        return {"accuracy": M.accuracy(labels, pred), "f1": M.f1_macro(labels, pred, spec.out_dim)}
    raise KeyError(task)


# ------------------------------------------------------------------ fine-tuning


@dataclass
class ProbeConfig:
    lr: float = 1e-3
    weight_decay: float = 0.01
    epochs: int = 100
    patience: int = 10
    batch_size: int = 64
    hidden: int = 256
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)


@dataclass
class ProbeResult:
    task: str
    mode: str
    seed: int
    metrics: dict[str, float]
    best_epoch: int
    val_score: float
    test_rows: np.ndarray = field(repr=False, default=None)
    test_outputs: np.ndarray = field(repr=False, default=None)
    threshold: float = 0.5

    def to_json(self) -> dict:
        return {"task": self.task, "mode": self.mode, "seed": self.seed, "metrics": self.metrics,
                "best_epoch": self.best_epoch, "val_score": self.val_score, "threshold": self.threshold}


def tune_threshold(scores: np.ndarray, labels: np.ndarray) -> float:
    """Cut-off maximizing binary macro-F1 on ``scores``; ties go to the cut nearest 0.5.

    Candidates are 0.5 and the midpoints between consecutive distinct scores.
    """
    s = np.unique(np.asarray(scores, dtype=float).ravel())
    cands = np.r_[0.5, (s[1:] + s[:-1]) / 2.0]
    y = np.asarray(labels).ravel()
    f1 = np.array([M.f1_macro(y, (np.asarray(scores).ravel() >= c).astype(int), 2) for c in cands])
    f1 = np.where(np.isnan(f1), -np.inf, f1)
    best = np.flatnonzero(f1 == f1.max())
    return float(cands[best[np.argmin(np.abs(cands[best] - 0.5))]])


def _score(spec: TaskSpec, m: Mapping[str, float]) -> float:
    v = m[spec.primary]
    if M.is_undefined(v):
        return -math.inf
    return v if spec.higher_is_better else -v


def finetune(task: str, z_me: np.ndarray | None, z_text: np.ndarray | None, labels: np.ndarray, split: Split,
             cfg: ProbeConfig, mode: str = "combined", seed: int = 0, label: str | None = None) -> ProbeResult:
    """Train a head on frozen inputs with AdamW and early stopping on the validation primary metric."""
    spec = TASKS[task]
    if mode != "text" and z_me is None:
        raise ConfigurationError(f"mode {mode!r} needs mobility embeddings")
    if mode != "mobility" and z_text is None:
        raise ConfigurationError(f"mode {mode!r} needs text embeddings")
    n = len(labels)
    for name, z in (("mobility", z_me), ("text", z_text)):
        if z is not None and len(z) != n:
            raise ConfigurationError(f"{name} embeddings have {len(z)} rows, labels have {n}")
    dt = torch.get_default_dtype()
    zm = torch.as_tensor(np.array(z_me), dtype=dt) if z_me is not None else None
    zt = torch.as_tensor(np.array(z_text), dtype=dt) if z_text is not None else None
    y = torch.as_tensor(labels, dtype=dt if spec.loss in ("multilabel_bce", "mse", "bce") else torch.long)
    torch.manual_seed(seed)
    head = ProbeHead(zm.shape[1] if zm is not None else 1, zt.shape[1] if zt is not None else 1,
                     spec.out_dim, mode, cfg.hidden)
    params = dict(head.named_parameters())
    opt = nc.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)

    def rows(idx):
        i = torch.as_tensor(idx)
        return (zm[i] if zm is not None else None), (zt[i] if zt is not None else None)

    def evaluate(idx, threshold=0.5):
        with torch.no_grad():
            out = task_outputs(spec, head(*rows(idx)))
        return out, metric_suite(task, out, labels[idx], threshold)

    def validate():
        # binary heads get their decision threshold from the validation split
        if spec.loss != "bce":
            return 0.5, evaluate(split.val)[1]
        out, _ = evaluate(split.val)
        t = tune_threshold(out, labels[split.val])
        return t, metric_suite(task, out, labels[split.val], t)

    best = (-math.inf, 0, {k: v.detach().clone() for k, v in params.items()}, 0.5)
    for epoch in range(1, cfg.epochs + 1):
        perm = split.train[np.random.default_rng([seed, epoch]).permutation(len(split.train))]
        for s in range(0, len(perm), cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            loss = task_loss(spec, head(*rows(idx)), y[torch.as_tensor(idx)])
            opt.zero_grad()
            nc.backward(loss)
            opt.step()
        threshold, val_metrics = validate()
        score = _score(spec, val_metrics)
        if score > best[0]:
            best = (score, epoch, {k: v.detach().clone() for k, v in params.items()}, threshold)
        elif epoch - best[1] >= cfg.patience:
            break
    with torch.no_grad():
        for k, v in params.items():
            v.copy_(best[2][k])
    out, test_metrics = evaluate(split.test, best[3])
    return ProbeResult(task, label or mode, seed, test_metrics, best[1], best[0], split.test.copy(), out, best[3])


def random_embeddings(n: int, d_h: int, seed: int) -> np.ndarray:
    """Frozen control: rows drawn like untrained prototypes, N(0, 1/d_h)."""
    return np.random.default_rng([seed, 0xC0]).standard_normal((n, d_h)) / math.sqrt(d_h)


def subset_metrics(result: ProbeResult, labels: np.ndarray, keep_rows) -> dict[str, float]:
    """Test metrics restricted to the rows in ``keep_rows`` (e.g. only sparse POIs)."""
    keep = np.isin(result.test_rows, np.asarray(list(keep_rows)))
    return metric_suite(result.task, result.test_outputs[keep], labels[result.test_rows[keep]], result.threshold)


def run_suite(world: Sequence[Poi], z_me: np.ndarray | None, z_text: np.ndarray | None, cfg: ProbeConfig,
              tasks: Sequence[str] = tuple(TASKS), modes: Sequence[str] = MODES,
              random_control: bool = False) -> list[ProbeResult]:
    """Every (task, mode, seed) combination; ``random_control`` adds a mobility-only run on random rows."""
    out = []
    for task in tasks:
        labels = task_labels(task, world)
        for seed in cfg.seeds:
            split = make_split(labels, seed, TASKS[task].stratify)
            for mode in modes:
                out.append(finetune(task, z_me, z_text, labels, split, cfg, mode, seed))
            if random_control:
                d_h = z_me.shape[1] if z_me is not None else 64
                rnd = random_embeddings(len(world), d_h, seed)
                out.append(finetune(task, rnd, None, labels, split, cfg, "mobility", seed, label="random"))
    return out


# ------------------------------------------------------------------ reports


def summarize(results: Sequence[ProbeResult], reduce=np.median) -> dict[str, dict[str, dict[str, float]]]:
    """``{task: {mode: {metric: reduced value over seeds}}}``."""
    acc: dict = {}
    for r in results:
        for k, v in r.metrics.items():
            acc.setdefault(r.task, {}).setdefault(r.mode, {}).setdefault(k, []).append(v)
    return {t: {m: {k: float(reduce([x for x in v if not M.is_undefined(x)])) if any(
        not M.is_undefined(x) for x in v) else M.UNDEFINED for k, v in ms.items()} for m, ms in modes.items()}
            for t, modes in acc.items()}


def markdown_table(summary: Mapping) -> str:
    tasks = [t for t in TASKS if t in summary]
    modes = sorted({m for t in tasks for m in summary[t]})
    head = "| mode | " + " | ".join(f"{t} {TASKS[t].metrics[0]} / {TASKS[t].metrics[1]}" for t in tasks) + " |"
    lines = [head, "|" + "---|" * (len(tasks) + 1)]
    for m in modes:
        cells = []
        for t in tasks:
            v = summary[t].get(m)
            cells.append("-" if v is None else " / ".join(f"{v[k]:.4f}" for k in TASKS[t].metrics))
        lines.append(f"| {m} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def write_reports(results: Sequence[ProbeResult], out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for r in results:
        (out / f"{r.task}_{r.mode}_seed{r.seed}.json").write_text(json.dumps(r.to_json(), indent=1, sort_keys=True))
    return out


def read_reports(out_dir) -> list[ProbeResult]:
    res = []
    for p in sorted(Path(out_dir).glob("*_seed*.json")):
        d = json.loads(p.read_text())
        res.append(ProbeResult(d["task"], d["mode"], d["seed"], d["metrics"], d["best_epoch"], d["val_score"],
                               threshold=d.get("threshold", 0.5)))
    return res


def plot_summary(summary: Mapping, out_dir) -> list[Path]:
    """One bar chart per task (primary metric by mode). Needs matplotlib."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    for t, modes in summary.items():
        names = sorted(modes)
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.bar(names, [modes[m][TASKS[t].primary] for m in names])
        ax.set_title(f"{t} ({TASKS[t].primary})")
        fig.tight_layout()
        p = Path(out_dir) / f"{t}.png"
        fig.savefig(p)
        plt.close(fig)
        paths.append(p)
    return paths
