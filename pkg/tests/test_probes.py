import json

import numpy as np
import pytest
import torch

from mepois import numcore as nc
from mepois import probes as P
from mepois.encoders import ConfigurationError

FAST = P.ProbeConfig(epochs=15, patience=5, seeds=(0, 1))


def test_task_table():
    assert {t: s.metrics for t, s in P.TASKS.items()} == {
        "open_hours": ("f1", "auroc"), "closure": ("f1", "auprc"), "intent": ("f1", "auprc"),
        "busyness": ("mae", "cosine"), "price": ("accuracy", "f1")}
    assert not P.TASKS["busyness"].higher_is_better


def test_labels_shapes(small_world):
    n = len(small_world)
    assert P.task_labels("open_hours", small_world).shape == (n, 168)
    assert P.task_labels("busyness", small_world).shape == (n, 168)
    for t in ("closure", "intent", "price"):
        assert P.task_labels(t, small_world).shape == (n,)
    with pytest.raises(KeyError):
        P.task_labels("parking", small_world)


def test_zero_weight_head_outputs_bias():
    head = P.ProbeHead(4, 6, 3)
    with torch.no_grad():
        for name, p in head.named_parameters():
            p.zero_()
        head.fc2.bias.copy_(torch.tensor([0.5, -1.0, 2.0]))
    out = head(torch.randn(5, 4), torch.randn(5, 6))
    assert torch.equal(out, torch.tensor([0.5, -1.0, 2.0]).expand(5, 3))


def test_mobility_block_comes_first():
    head = P.ProbeHead(2, 2, 1, hidden=3)
    captured = {}
    head.fc1.register_forward_hook(lambda m, i, o: captured.update(x=i[0]))
    zm, zt = torch.randn(4, 2), torch.randn(4, 2)
    head(zm, zt)
    x = captured["x"]
    assert torch.allclose(x[:, :3], torch.relu(head.mlp_p(zm)))
    assert torch.allclose(x[:, 3:], torch.relu(head.mlp_t(zt)))


@pytest.mark.parametrize("mode,live", [("mobility", slice(0, 3)), ("text", slice(3, 6))])
def test_single_branch_modes_zero_the_other(mode, live):
    head = P.ProbeHead(2, 2, 1, mode=mode, hidden=3)
    captured = {}
    head.fc1.register_forward_hook(lambda m, i, o: captured.update(x=i[0]))
    head(torch.randn(4, 2) if mode != "text" else None, torch.randn(4, 2) if mode != "mobility" else None)
    dead = captured["x"].clone()
    dead[:, live] = 0
    assert torch.all(dead == 0)


def test_dimension_mismatch():
    head = P.ProbeHead(4, 6, 2)
    with pytest.raises(ConfigurationError):
        head(torch.randn(3, 5), torch.randn(3, 6))
    with pytest.raises(ConfigurationError):
        P.ProbeHead(4, 6, 2, mode="both")


def test_head_gradients(f64):
    head = P.ProbeHead(3, 4, 2, hidden=5)
    zm, zt = torch.randn(6, 3), torch.randn(6, 4)
    y = torch.randint(0, 2, (6, 2)).double()
    fn = lambda: P.task_loss(P.TASKS["open_hours"], head(zm, zt), y)
    for _ in range(20):
        head.zero_grad()
        nc.backward(fn())
        for p in head.parameters():
            assert nc.relative_error(p.grad, nc.numerical_gradient(fn, p)) < 1e-4
        with torch.no_grad():
            for p in head.parameters():
                p.add_(0.3 * torch.randn_like(p))


def test_split_disjoint_and_stratified():
    labels = np.array([0] * 50 + [1] * 30 + [2] * 20)
    s = P.make_split(labels, 3, stratify=True)
    parts = [set(s.train), set(s.val), set(s.test)]
    assert sum(map(len, parts)) == 100 and not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2])
    for c, n in [(0, 50), (1, 30), (2, 20)]:
        assert (labels[s.train] == c).sum() == round(0.6 * n)
    again = P.make_split(labels, 3, stratify=True)
    assert np.array_equal(s.test, again.test)
    assert not np.array_equal(s.test, P.make_split(labels, 4, stratify=True).test)


def test_single_member_class_still_trains():
    labels = np.array([0] * 10 + [1])
    assert 10 in P.make_split(labels, 0, stratify=True).train


def test_empty_train_class_raises(monkeypatch):
    monkeypatch.setattr(P, "_cut", lambda idx, fractions=(0.6, 0.2): (idx[:0], idx[:1], idx[1:]))
    with pytest.raises(P.StratificationError):
        P.make_split(np.array([0, 0, 1, 1]), 0, stratify=True)


def _toy(n=200, seed=0):
    rng = np.random.default_rng(seed)
    zm = rng.standard_normal((n, 6))
    zt = rng.standard_normal((n, 5))
    return zm, zt, (zm[:, 0] > 0).astype(int)


def test_finetune_freezes_inputs_and_is_deterministic():
    zm, zt, y = _toy()
    before = (zm.tobytes(), zt.tobytes())
    split = P.make_split(y, 0, stratify=True)
    a = P.finetune("closure", zm, zt, y, split, FAST, "combined", 0)
    b = P.finetune("closure", zm, zt, y, split, FAST, "combined", 0)
    assert (zm.tobytes(), zt.tobytes()) == before
    assert a.metrics == b.metrics and a.best_epoch == b.best_epoch
    assert a.metrics["f1"] > 0.7


def test_constant_labels_hit_degenerate_baseline():
    zm, zt, _ = _toy()
    y = np.zeros(len(zm), dtype=int)
    split = P.make_split(y, 0, stratify=True)
    r = P.finetune("closure", zm, zt, y, split, FAST, "combined", 0)
    assert r.metrics["f1"] == 1.0  # every test POI predicted open; only the negative class is defined
    assert np.isnan(r.metrics["auprc"])


def test_finetune_input_errors():
    zm, zt, y = _toy()
    split = P.make_split(y, 0, stratify=True)
    with pytest.raises(ConfigurationError):
        P.finetune("closure", None, zt, y, split, FAST, "mobility")
    with pytest.raises(ConfigurationError):
        P.finetune("closure", zm[:-1], zt, y, split, FAST, "combined")


def test_random_control_scale():
    r = P.random_embeddings(2000, 64, 0)
    assert abs(r.var() - 1 / 64) < 1e-3
    assert np.array_equal(r, P.random_embeddings(2000, 64, 0))


def test_suite_reports_roundtrip(small_world, tmp_path):
    n = len(small_world)
    zm = P.random_embeddings(n, 8, 1)
    zt = np.random.default_rng(2).standard_normal((n, 12))
    cfg = P.ProbeConfig(epochs=2, patience=2, seeds=(0,))
    res = P.run_suite(small_world, zm, zt, cfg, tasks=("price", "busyness"), random_control=True)
    assert {(r.task, r.mode) for r in res} == {(t, m) for t in ("price", "busyness")
                                                for m in (*P.MODES, "random")}
    P.write_reports(res, tmp_path)
    back = P.read_reports(tmp_path)
    assert sorted((r.task, r.mode, r.seed) for r in back) == sorted((r.task, r.mode, r.seed) for r in res)
    assert json.loads((tmp_path / "price_text_seed0.json").read_text())["task"] == "price"
    summary = P.summarize(res)
    table = P.markdown_table(summary)
    assert table.count("\n") == 2 + 4 and "busyness mae / cosine" in table
    paths = P.plot_summary(summary, tmp_path)
    assert all(p.exists() and p.stat().st_size > 0 for p in paths)


def test_subset_metrics_restricts_rows():
    zm, zt, y = _toy()
    split = P.make_split(y, 0, stratify=True)
    r = P.finetune("closure", zm, zt, y, split, FAST, "combined", 0)
    full = P.subset_metrics(r, y, r.test_rows)
    assert full == pytest.approx(r.metrics, nan_ok=True)
    half = P.subset_metrics(r, y, r.test_rows[::2])
    assert set(half) == {"f1", "auprc"}


def test_threshold_tuning():
    s = np.array([0.1, 0.2, 0.3, 0.35, 0.9])
    y = np.array([0, 0, 1, 1, 1])
    t = P.tune_threshold(s, y)
    assert t == pytest.approx(0.25)
    assert P.metric_suite("closure", s[:, None], y, t)["f1"] == 1.0
    # already-separable at 0.5 keeps 0.5
    assert P.tune_threshold(np.array([0.1, 0.9]), np.array([0, 1])) == 0.5


def test_threshold_only_from_validation():
    zm, zt, y = _toy()
    split = P.make_split(y, 0, stratify=True)
    r = P.finetune("closure", zm, zt, y, split, FAST, "combined", 0)
    assert P.metric_suite("closure", r.test_outputs, y[r.test_rows], r.threshold) == pytest.approx(r.metrics)
    ytest_flipped = y.copy()
    ytest_flipped[split.test] = 1 - ytest_flipped[split.test]
    r2 = P.finetune("closure", zm, zt, ytest_flipped, split, FAST, "combined", 0)
    assert r2.threshold == r.threshold  # test labels never influence the cut
