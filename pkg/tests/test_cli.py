import dataclasses
import json
import time
from pathlib import Path

import pytest

from mepois import cli

ROOT = Path(__file__).resolve().parents[1]
SMOKE = ROOT / "configs" / "smoke.yaml"
TINY = ["--set", "world.poi_count=60", "--set", "world.device_count=15", "--set", "world.duration_days=3",
        "--set", "world.neighborhood_count=4"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    """The whole pipeline on the smoke config, timed."""
    work = tmp_path_factory.mktemp("smoke")
    t0 = time.perf_counter()
    codes = {c: run(c, "--config", SMOKE, "--workdir", work) for c in
             ("generate", "preprocess", "precompute", "pretrain", "finetune")}
    codes["report"] = run("report", "--config", SMOKE, "--workdir", work, "--plots")
    return work, codes, time.perf_counter() - t0


def test_help_lists_every_key_with_default(capsys):
    with pytest.raises(SystemExit) as e:
        run("--help")
    assert e.value.code == 0
    out = capsys.readouterr().out
    for name, cls in cli._SECTION_TYPES.items():
        for f in dataclasses.fields(cls):
            assert f"{name}.{f.name} = " in out, f"{name}.{f.name}"
    assert "pretrain.epochs = 20" in out and "seed = 0" in out


def test_smoke_pipeline_completes(smoke_run):
    work, codes, seconds = smoke_run
    assert set(codes.values()) == {0}, codes
    assert seconds < 600
    assert (work / "reports" / "summary.md").read_text().startswith("| mode |")
    assert (work / "reports" / "open_hours.png").exists()
    lines = [json.loads(l) for l in (work / "log.jsonl").read_text().splitlines()]
    assert {l["event"] for l in lines} >= {"start", "stage_done", "epoch"}


def test_generated_count_matches_config(smoke_run):
    work, _, _ = smoke_run
    assert len((work / "world.jsonl").read_text().splitlines()) == 200


def test_generate_same_seed_same_files(tmp_path):
    for d in ("a", "b"):
        assert run("generate", "--workdir", tmp_path / d, "--seed", 7, *TINY) == 0
    for f in ("world.jsonl", "labels.jsonl", "traces.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert run("generate", "--workdir", tmp_path / "c", "--seed", 8, *TINY) == 0
    assert (tmp_path / "a" / "traces.csv").read_bytes() != (tmp_path / "c" / "traces.csv").read_bytes()


def test_existing_outputs_need_force(tmp_path, capsys):
    assert run("generate", "--workdir", tmp_path, *TINY) == 0
    assert run("generate", "--workdir", tmp_path, *TINY) == 1
    assert "--force" in capsys.readouterr().err
    assert run("generate", "--workdir", tmp_path, "--force", *TINY) == 0


def test_missing_config_value_names_key_and_type(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("world:\n  poi_count:\n")
    assert run("generate", "--config", cfg, "--workdir", tmp_path) == 1
    err = capsys.readouterr().err
    assert "world.poi_count" in err and "int" in err


@pytest.mark.parametrize("text,needle", [("world:\n  poi_cont: 5\n", "world.poi_cont"),
                                         ("pretrain:\n  epochs: many\n", "pretrain.epochs"),
                                         ("bogus: 1\n", "bogus")])
def test_bad_config_rejected(tmp_path, capsys, text, needle):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(text)
    assert run("generate", "--config", cfg, "--workdir", tmp_path) == 1
    assert needle in capsys.readouterr().err


def test_stage_order_names_missing_artifact(tmp_path, capsys):
    assert run("preprocess", "--workdir", tmp_path) == 1
    assert "mepois generate" in capsys.readouterr().err
    assert run("report", "--workdir", tmp_path) == 1
    assert "mepois finetune" in capsys.readouterr().err


def test_seed_precedence(tmp_path, monkeypatch):
    monkeypatch.setenv("MEPOI_SEED", "11")
    assert run("generate", "--workdir", tmp_path / "env", *TINY) == 0
    assert json.loads((tmp_path / "env" / "config.generate.json").read_text())["world"]["seed"] == 11
    assert run("generate", "--workdir", tmp_path / "flag", "--seed", 12, *TINY) == 0
    cfg = json.loads((tmp_path / "flag" / "config.generate.json").read_text())
    assert cfg["seed"] == 12 and cfg["world"]["seed"] == 12
    monkeypatch.setenv("MEPOI_SEED", "abc")
    assert run("generate", "--workdir", tmp_path / "bad", *TINY) == 1


def test_rerun_is_byte_identical_and_priors_required(smoke_run, tmp_path, capsys):
    work, _, _ = smoke_run
    before = {f: (work / f).read_bytes() for f in ("visits.jsonl", "partition.jsonl", "priors.jsonl")}
    args = ("--config", SMOKE, "--workdir", work, "--force", "--deterministic")
    assert run("preprocess", *args) == 0 and run("precompute", *args) == 0
    for f, data in before.items():
        assert (work / f).read_bytes() == data, f
    (work / "priors.jsonl").unlink()
    assert run("pretrain", *args) == 1
    assert "mepois precompute" in capsys.readouterr().err
    assert run("precompute", *args) == 0


def test_exports(smoke_run, tmp_path):
    work, _, _ = smoke_run
    args = ("--config", SMOKE, "--workdir", work)
    assert run("export-embeddings", *args, "--out", tmp_path / "emb", "--csv") == 0
    manifest = json.loads((tmp_path / "emb" / "manifest.json").read_text())
    assert manifest["rows"] == 200 and (tmp_path / "emb" / "embeddings.csv").exists()
    assert run("export-prompts", *args, "--force") == 0
    assert len(list((work / "prompts").glob("poi_*.txt"))) == 200
