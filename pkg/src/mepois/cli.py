"""Command-line entry point: one YAML config, one subcommand per pipeline stage.

Precedence for every setting: built-in defaults < config file < ``MEPOI_SEED``
(seed only) < command-line flags.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch
import yaml

from . import numcore as nc
from .geodata import WorldConfig

log = logging.getLogger("mepois")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    """A stage was asked to run before its inputs exist, or would clobber outputs."""


# ------------------------------------------------------------------ config


@dataclass
class PathsConfig:
    workdir: str = "run"
    world: str = "world.jsonl"
    labels: str = "labels.jsonl"
    traces: str = "traces.csv"
    visits: str = "visits.jsonl"
    distributions: str = "distributions.jsonl"
    partition: str = "partition.jsonl"
    priors: str = "priors.jsonl"
    text: str = "text_embeddings.jsonl"
    model: str = "model"
    embeddings: str = "embeddings"
    reports: str = "reports"
    prompts: str = "prompts"
    log: str = "log.jsonl"

    def resolve(self, key: str) -> Path:
        p = Path(getattr(self, key))
        return p if p.is_absolute() else Path(self.workdir) / p


@dataclass
class PreprocessSection:
    radius_m: float = 100.0
    min_duration_s: float = 300.0
    snap_radius_m: float = 100.0
    min_len: int = 5
    m_visits: int = 50
    top_k: typing.Optional[int] = None


@dataclass
class KernelSection:
    bandwidths_km: list[float] = field(default_factory=lambda: [0.3, 1.0, 3.0])
    nearest_anchors: typing.Optional[int] = None


@dataclass
class TextSection:
    provider: str = "hash"  # hash | file
    path: typing.Optional[str] = None  # JSONL {poi_id, vector} when provider == file
    dim: int = 768


@dataclass
class ModelSection:
    scale_count: int = 8
    time_dim: int = 8
    layers: int = 2
    heads: int = 4
    ffn_dim: int = 128
    window: int = 32
    tau: float = 0.1


@dataclass
class PretrainSection:
    lambda_anchor: float = 1.0
    lambda_sparse: float = 1.0
    lambda_text: float = 1.0
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 16
    sparse_sample: int = 256
    anchor_sample: int = 64
    text_sample: int = 256
    clip_norm: float = 1.0
    full_aux: bool = False


@dataclass
class ProbeSection:
    lr: float = 1e-3
    weight_decay: float = 0.01
    epochs: int = 100
    patience: int = 10
    batch_size: int = 64
    hidden: int = 256
    n_seeds: int = 5
    tasks: list[str] = field(default_factory=lambda: ["open_hours", "closure", "intent", "busyness", "price"])
    modes: list[str] = field(default_factory=lambda: ["text", "mobility", "combined"])
    random_control: bool = True


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    paths: PathsConfig = field(default_factory=PathsConfig)
    world: WorldConfig = field(default_factory=WorldConfig)
    preprocess: PreprocessSection = field(default_factory=PreprocessSection)
    kernel: KernelSection = field(default_factory=KernelSection)
    text: TextSection = field(default_factory=TextSection)
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    probe: ProbeSection = field(default_factory=ProbeSection)


_SECTION_TYPES = {"paths": PathsConfig, "world": WorldConfig, "preprocess": PreprocessSection,
                  "kernel": KernelSection, "text": TextSection, "model": ModelSection,
                  "pretrain": PretrainSection, "probe": ProbeSection}


def _type_name(tp) -> str:
    return getattr(tp, "__name__", None) or str(tp).replace("typing.", "")


def _coerce(key: str, value: Any, tp) -> Any:
    """Check ``value`` against the annotated type ``tp``; ints are accepted where floats are expected."""
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(key, value, inner[0])
    if value is None:
        raise ConfigError(f"config key {key!r} is missing a value (expected {_type_name(tp)})")
    if origin in (list, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"config key {key!r} expects a list, got {type(value).__name__}")
        elem = args[0] if args else Any
        items = [_coerce(f"{key}[{i}]", v, elem) for i, v in enumerate(value)]
        return tuple(items) if origin is tuple else items
    if tp is Any:
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"config key {key!r} expects bool, got {type(value).__name__}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {key!r} expects float, got {type(value).__name__}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key {key!r} expects int, got {type(value).__name__}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"config key {key!r} expects str, got {type(value).__name__}")
        return value
    return value


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def _section_defaults(cls) -> dict:
    return {f.name: getattr(cls(), f.name) for f in dataclasses.fields(cls)}


def build_config(raw: dict | None) -> RunConfig:
    """Overlay a parsed config mapping on the defaults, validating every key and type."""
    raw = dict(raw or {})
    top = {}
    sections = {}
    for key, value in raw.items():
        if key in _SECTION_TYPES:
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key!r} must be a mapping")
            sections[key] = value
        elif key in ("seed", "threads"):
            top[key] = _coerce(key, value, int)
        else:
            raise ConfigError(f"unknown config key {key!r}; expected one of {sorted(['seed', 'threads', *_SECTION_TYPES])}")
    built = {}
    for name, cls in _SECTION_TYPES.items():
        hints = _hints(cls)
        values = _section_defaults(cls)
        for key, value in sections.get(name, {}).items():
            if key not in hints:
                raise ConfigError(f"unknown config key '{name}.{key}'; expected one of {sorted(hints)}")
            values[key] = _coerce(f"{name}.{key}", value, hints[key])
        try:
            built[name] = cls(**values)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"invalid {name} section: {e}") from e
    return RunConfig(**top, **built)


def set_key(cfg: RunConfig, dotted: str, text: str) -> None:
    """Apply one ``section.key=value`` override; the value is parsed as YAML."""
    value = yaml.safe_load(text)
    parts = dotted.split(".")
    if len(parts) == 1 and parts[0] in ("seed", "threads"):
        setattr(cfg, parts[0], _coerce(parts[0], value, int))
        return
    if len(parts) != 2 or parts[0] not in _SECTION_TYPES:
        raise ConfigError(f"unknown config key {dotted!r}")
    section = getattr(cfg, parts[0])
    hints = _hints(type(section))
    if parts[1] not in hints:
        raise ConfigError(f"unknown config key {dotted!r}; expected one of {sorted(hints)}")
    values = dataclasses.asdict(section)
    values[parts[1]] = _coerce(dotted, value, hints[parts[1]])
    try:
        setattr(cfg, parts[0], type(section)(**values))
    except (ValueError, TypeError) as e:
        raise ConfigError(f"invalid value for {dotted}: {e}") from e


def config_listing() -> str:
    lines = ["config keys (section.key = default):", "  seed = 0", "  threads = 1"]
    for name, cls in _SECTION_TYPES.items():
        for key, default in _section_defaults(cls).items():
            if isinstance(default, tuple):
                default = list(default)
            lines.append(f"  {name}.{key} = {json.dumps(default)}")
    return "\n".join(lines)


def to_dict(cfg: RunConfig) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


# ------------------------------------------------------------------ runtime helpers


class JsonLogHandler(logging.Handler):
    def __init__(self, path: Path):
        super().__init__()
        path.parent.mkdir(parents=True, exist_ok=True)
        self.f = open(path, "a")

    def emit(self, record):
        msg = record.getMessage()
        try:
            payload = json.loads(msg)
            if not isinstance(payload, dict):
                payload = {"message": msg}
        except ValueError:
            payload = {"message": msg}
        payload = {"time": round(record.created, 3), "level": record.levelname, "logger": record.name, **payload}
        self.f.write(json.dumps(payload, sort_keys=True) + "\n")
        self.f.flush()

    def close(self):
        self.f.close()
        super().close()


class Stage:
    def __init__(self, cfg: RunConfig, force: bool):
        self.cfg = cfg
        self.force = force
        self.t0 = time.perf_counter()

    def path(self, key: str) -> Path:
        return self.cfg.paths.resolve(key)

    def need(self, key: str, producer: str) -> Path:
        p = self.path(key)
        if not p.exists():
            raise StageError(f"missing {key} artifact {p}; run `mepois {producer}` first")
        return p

    def claim(self, *keys: str) -> list[Path]:
        paths = [self.path(k) for k in keys]
        existing = [str(p) for p in paths if p.exists()]
        if existing and not self.force:
            raise StageError(f"outputs already exist: {', '.join(existing)} (use --force to overwrite)")
        for p in paths:
            p.parent.mkdir(parents=True, exist_ok=True)
        return paths

    def done(self, stage: str, **info) -> None:
        info = {"event": "stage_done", "stage": stage, "seconds": round(time.perf_counter() - self.t0, 3), **info}
        log.info(json.dumps(info))
        print(f"{stage}: " + ", ".join(f"{k}={v}" for k, v in info.items() if k not in ("event", "stage")))


def _bbox(cfg: RunConfig):
    return cfg.world.bbox


def _read_inputs_for_pretrain(st: Stage):
    from .geodata import read_world
    from .pipeline import read_distributions, read_partition, read_visits
    from .textalign import PrecomputedEmbedder
    from .transfer import read_priors

    world = read_world(st.need("world", "generate"))
    seqs = read_visits(st.need("visits", "preprocess"))
    dists = read_distributions(st.need("distributions", "preprocess"))
    part = read_partition(st.need("partition", "preprocess"))
    p = st.cfg.pretrain
    priors = read_priors(st.need("priors", "precompute")) if p.lambda_sparse > 0 else None
    text = None
    if p.lambda_text > 0:
        prov = PrecomputedEmbedder(st.need("text", "precompute"))
        text = prov.vectors
    return world, seqs, dists, part, priors, text


# ------------------------------------------------------------------ subcommands


def cmd_generate(st: Stage, args) -> None:
    from .geodata import generate_world, simulate_traces, write_labels, write_traces, write_world

    world_p, labels_p, traces_p = st.claim("world", "labels", "traces")
    world = generate_world(st.cfg.world)
    write_world(world_p, world)
    write_labels(labels_p, world)
    n = write_traces(traces_p, simulate_traces(world, st.cfg.world))
    st.done("generate", pois=len(world), points=n)


def cmd_preprocess(st: Stage, args) -> None:
    from .geodata import read_traces, read_world
    from .pipeline import preprocess, write_distributions, write_partition, write_visits

    world = read_world(st.need("world", "generate"))
    points = read_traces(st.need("traces", "generate"))
    out = st.claim("visits", "distributions", "partition")
    c = st.cfg.preprocess
    pre = preprocess(points, world, c.radius_m, c.min_duration_s, c.snap_radius_m, c.min_len, c.m_visits, c.top_k)
    write_visits(out[0], pre.sequences)
    write_distributions(out[1], pre.distributions)
    write_partition(out[2], pre.partition)
    st.done("preprocess", staypoints=pre.n_staypoints, sequences=len(pre.sequences),
            visits=sum(len(s) for s in pre.sequences), anchors=len(pre.partition.anchors),
            sparse=len(pre.partition.sparse))


def _text_provider(cfg: RunConfig):
    from .textalign import HashingEmbedder, PrecomputedEmbedder

    if cfg.text.provider == "hash":
        return HashingEmbedder(cfg.text.dim)
    if cfg.text.provider == "file":
        if not cfg.text.path or not Path(cfg.text.path).exists():
            raise StageError(f"text.provider is 'file' but text.path {cfg.text.path!r} does not exist")
        return PrecomputedEmbedder(cfg.text.path)
    raise ConfigError(f"text.provider must be 'hash' or 'file', got {cfg.text.provider!r}")


def cmd_precompute(st: Stage, args) -> None:
    from .geodata import read_world
    from .pipeline import read_distributions, read_partition
    from .textalign import embed_world, write_text_embeddings
    from .transfer import KernelConfig, precompute_transfer, write_priors

    world = read_world(st.need("world", "generate"))
    part = read_partition(st.need("partition", "preprocess"))
    dists = read_distributions(st.need("distributions", "preprocess"))
    priors_p, text_p = st.claim("priors", "text")
    kernel = KernelConfig(tuple(st.cfg.kernel.bandwidths_km), st.cfg.kernel.nearest_anchors)
    priors, rep = precompute_transfer(world, part, dists, kernel)
    write_priors(priors_p, priors)
    vectors = embed_world(world, _text_provider(st.cfg))
    write_text_embeddings(text_p, vectors)
    st.done("precompute", sparse=rep.n_sparse, anchors=rep.n_anchor, text=len(vectors))


def _model_config(cfg: RunConfig):
    from .train import ModelConfig
    return ModelConfig(**dataclasses.asdict(cfg.model))


def cmd_pretrain(st: Stage, args) -> None:
    from .train import PretrainConfig, export_embeddings, pretrain

    world, seqs, dists, part, priors, text = _read_inputs_for_pretrain(st)
    model_dir = st.path("model")
    if not args.resume:
        st.claim("model", "embeddings")
    pcfg = PretrainConfig(seed=st.cfg.seed, **dataclasses.asdict(st.cfg.pretrain))
    model, rep = pretrain(seqs, world, pcfg, _model_config(st.cfg), part, dists, priors, text,
                          out_dir=model_dir, resume=args.resume, bbox=_bbox(st.cfg))
    export_embeddings(model_dir / "checkpoint", world, st.path("embeddings"))
    last = rep.epochs[-1] if rep.epochs else {}
    st.done("pretrain", epochs=len(rep.epochs), steps=rep.steps, skipped=rep.skipped_batches,
            final_total=round(last.get("total", float("nan")), 6))


def cmd_finetune(st: Stage, args) -> None:
    from .geodata import read_world
    from .probes import TASKS, ProbeConfig, run_suite, write_reports
    from .prototypes import import_embeddings
    from .textalign import PrecomputedEmbedder

    world = read_world(st.need("world", "generate"))
    ids, z_me = import_embeddings(st.need("embeddings", "pretrain"))
    if ids != [p.id for p in world]:
        raise StageError("embedding rows do not follow the world's POI order; re-run `mepois export-embeddings`")
    prov = PrecomputedEmbedder(st.need("text", "precompute"))
    z_text = np.stack([prov.embed(p.id, "") for p in world])
    (reports,) = st.claim("reports")
    pc = st.cfg.probe
    for t in pc.tasks:
        if t not in TASKS:
            raise ConfigError(f"probe.tasks: unknown task {t!r}; expected a subset of {sorted(TASKS)}")
    cfg = ProbeConfig(pc.lr, pc.weight_decay, pc.epochs, pc.patience, pc.batch_size, pc.hidden,
                      tuple(st.cfg.seed + k for k in range(pc.n_seeds)))
    results = run_suite(world, z_me, z_text, cfg, tasks=pc.tasks, modes=pc.modes, random_control=pc.random_control)
    write_reports(results, reports)
    for r in results:
        log.info(json.dumps({"event": "probe", **r.to_json()}))
    st.done("finetune", runs=len(results))


def cmd_report(st: Stage, args) -> None:
    from .probes import markdown_table, plot_summary, read_reports, summarize

    reports = st.need("reports", "finetune")
    results = read_reports(reports)
    if not results:
        raise StageError(f"no probe reports under {reports}; run `mepois finetune` first")
    summary = summarize(results, np.median if args.reduce == "median" else np.mean)
    table = markdown_table(summary)
    (reports / "summary.md").write_text(table)
    (reports / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    if args.plots:
        plot_summary(summary, reports)
    print(table, end="")
    st.done("report", runs=len(results))


def cmd_export_prompts(st: Stage, args) -> None:
    from .geodata import read_world
    from .textalign import dump_prompts

    world = read_world(st.need("world", "generate"))
    (out,) = st.claim("prompts")
    st.done("export-prompts", prompts=dump_prompts(out, world))


def cmd_export_embeddings(st: Stage, args) -> None:
    from .geodata import read_world
    from .train import export_embeddings

    world = read_world(st.need("world", "generate"))
    ckpt = st.path("model") / "checkpoint"
    if not (ckpt / "manifest.json").exists():
        raise StageError(f"missing model checkpoint {ckpt}; run `mepois pretrain` first")
    out = Path(args.out) if args.out else st.path("embeddings")
    if out.exists() and not st.force:
        raise StageError(f"outputs already exist: {out} (use --force to overwrite)")
    export_embeddings(ckpt, world, out, csv_mode=args.csv)
    st.done("export-embeddings", out=str(out), pois=len(world))


COMMANDS = {
    "generate": (cmd_generate, "synthesize a world, its ground-truth labels and GPS traces"),
    "preprocess": (cmd_preprocess, "staypoints, POI attribution, visit sequences, anchor/sparse partition"),
    "precompute": (cmd_precompute, "transferred priors for sparse POIs and text embeddings"),
    "pretrain": (cmd_pretrain, "train the mobility encoder and prototypes, then export embeddings"),
    "finetune": (cmd_finetune, "frozen-embedding probes for every task, mode and seed"),
    "report": (cmd_report, "collate probe reports into summary tables (and optional plots)"),
    "export-prompts": (cmd_export_prompts, "write one text prompt file per POI"),
    "export-embeddings": (cmd_export_embeddings, "write the checkpoint's embedding matrix"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--workdir", help="override paths.workdir")
    common.add_argument("--seed", type=int, help="global seed (beats MEPOI_SEED and the config)")
    common.add_argument("--threads", type=int, help="torch thread cap")
    common.add_argument("--deterministic", action="store_true", help="single thread, deterministic kernels")
    common.add_argument("--force", action="store_true", help="overwrite existing stage outputs")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key (repeatable)")
    p = argparse.ArgumentParser(prog="mepois", description="Mobility-derived POI embeddings, stage by stage.",
                                formatter_class=argparse.RawDescriptionHelpFormatter, epilog=config_listing(),
                                parents=[common])
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text, description=help_text, parents=[common],
                            formatter_class=argparse.RawDescriptionHelpFormatter, epilog=config_listing())
        if name == "pretrain":
            sp.add_argument("--resume", action="store_true", help="continue from the saved checkpoint")
        if name == "report":
            sp.add_argument("--plots", action="store_true", help="also write one bar chart per task")
            sp.add_argument("--reduce", choices=("mean", "median"), default="mean", help="aggregate over seeds")
        if name == "export-embeddings":
            sp.add_argument("--out", help="output directory (default paths.embeddings)")
            sp.add_argument("--csv", action="store_true", help="also write a CSV copy")
    return p


def resolve_config(args, env=None) -> RunConfig:
    env = os.environ if env is None else env
    raw = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        raw = yaml.safe_load(path.read_text()) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
    cfg = build_config(raw)
    if env.get("MEPOI_SEED"):
        try:
            cfg.seed = int(env["MEPOI_SEED"])
        except ValueError as e:
            raise ConfigError(f"MEPOI_SEED must be an integer, got {env['MEPOI_SEED']!r}") from e
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        set_key(cfg, k.strip(), v)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    if args.workdir:
        cfg.paths = dataclasses.replace(cfg.paths, workdir=args.workdir)
    # one seed drives every module
    cfg.world = dataclasses.replace(cfg.world, seed=cfg.seed)
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handler = None
    was_deterministic = torch.are_deterministic_algorithms_enabled()
    try:
        cfg = resolve_config(args)
        threads = 1 if args.deterministic else cfg.threads
        nc.seed_everything(cfg.seed, threads=threads)
        if args.deterministic:
            torch.use_deterministic_algorithms(True)
        handler = JsonLogHandler(cfg.paths.resolve("log"))
        log.addHandler(handler)
        log.setLevel(logging.INFO)
        log.info(json.dumps({"event": "start", "command": args.command, "seed": cfg.seed, "threads": threads}))
        Path(cfg.paths.workdir).mkdir(parents=True, exist_ok=True)
        (Path(cfg.paths.workdir) / f"config.{args.command}.json").write_text(json.dumps(to_dict(cfg), indent=1))
        COMMANDS[args.command][0](Stage(cfg, args.force), args)
        return 0
    except Exception as e:  # every contract violation becomes a nonzero exit with a one-line reason
        if os.environ.get("MEPOI_DEBUG"):
            raise
        print(f"mepois {args.command}: error: {e}", file=sys.stderr)
        if handler is not None:
            log.error(json.dumps({"event": "error", "command": args.command, "error": type(e).__name__,
                                  "message": str(e)}))
        return 1
    finally:
        torch.use_deterministic_algorithms(was_deterministic)
        if handler is not None:
            log.removeHandler(handler)
            handler.close()


if __name__ == "__main__":
    sys.exit(main())
