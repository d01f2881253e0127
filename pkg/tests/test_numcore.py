import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mepois import numcore as nc

finite = st.floats(-30, 30, allow_nan=False, allow_infinity=False)


def test_matmul_examples():
    a = nc.tensor([[1.0, 2.0], [3.0, 4.0]])
    assert torch.equal(nc.matmul(torch.eye(2), a), a)
    assert nc.matmul(a, nc.tensor([[1.0], [1.0]])).tolist() == [[3.0], [7.0]]
    with pytest.raises(nc.DimensionError):
        nc.matmul(torch.ones(2, 3), torch.ones(2, 3))


def test_softmax_examples():
    assert torch.allclose(nc.softmax(torch.zeros(3)), torch.full((3,), 1 / 3))
    out = nc.softmax(torch.tensor([0.0, math.log(3.0)], dtype=torch.float64))
    assert torch.allclose(out, torch.tensor([0.25, 0.75], dtype=torch.float64), atol=1e-12)


@given(arrays(np.float64, (4, 7), elements=finite))
@settings(max_examples=50, deadline=None)
def test_softmax_on_simplex(x):
    p = nc.softmax(torch.as_tensor(x), -1)
    assert bool((p > 0).all())
    assert torch.allclose(p.sum(-1), torch.ones(4, dtype=p.dtype), atol=1e-6)


def test_softmax_stable_for_large_logits():
    p = nc.softmax(torch.tensor([1000.0, 1000.0, -1000.0]))
    assert torch.isfinite(p).all() and abs(float(p[0]) - 0.5) < 1e-6


def test_softmax_mask_zeroes_masked_entries():
    p = nc.softmax(torch.tensor([[1.0, 2.0, 3.0]]), -1, torch.tensor([[True, True, False]]))
    assert float(p[0, 2]) == 0.0
    assert abs(float(p.sum()) - 1.0) < 1e-6


def test_layernorm_examples(f64):
    g, b = torch.ones(2), torch.zeros(2)
    assert torch.equal(nc.layernorm(torch.full((1, 2), 5.0), g, b), torch.zeros(1, 2))
    out = nc.layernorm(torch.tensor([[1.0, 3.0]]), g, b)
    expect = 1.0 / math.sqrt(1.0 + nc.LAYERNORM_EPS)
    assert torch.allclose(out, torch.tensor([[-expect, expect]]), atol=1e-12)


def test_cosine_examples():
    v = torch.tensor([0.3, -2.0, 1.0])
    assert abs(float(nc.cosine_sim(v, v)) - 1.0) < 1e-6
    assert float(nc.cosine_sim(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0]))) == 0.0
    assert abs(float(nc.cosine_sim(torch.tensor([1.0, 1.0]), torch.tensor([1.0, 0.0]))) - 1 / math.sqrt(2)) < 1e-6
    assert float(nc.cosine_sim(torch.zeros(3), v)) == 0.0


def test_kl_examples(f64):
    r = torch.tensor([0.2, 0.3, 0.5])
    assert float(nc.kl_divergence(r, r)) == 0.0
    assert abs(float(nc.kl_divergence(torch.tensor([1.0, 0.0]), torch.tensor([0.5, 0.5]))) - math.log(2)) < 1e-12


@given(arrays(np.float64, (2, 6), elements=st.floats(0.0, 1.0)))
@settings(max_examples=60, deadline=None)
def test_kl_nonnegative(raw):
    raw = raw + 1e-3
    r = torch.as_tensor(raw[0] / raw[0].sum())
    q = torch.as_tensor(raw[1] / raw[1].sum())
    kl = float(nc.kl_divergence(r, q))
    assert kl >= -1e-12
    assert abs(float(nc.kl_divergence(r, r))) < 1e-9


def test_kl_gradient_only_to_q(f64):
    r = torch.tensor([0.4, 0.6], requires_grad=True)
    q = torch.tensor([0.5, 0.5], requires_grad=True)
    nc.backward(nc.kl_divergence(r, q))
    assert r.grad is None and q.grad is not None


def test_backward_examples(f64):
    p = torch.randn(5, requires_grad=True)
    nc.backward(0.5 * (p ** 2).sum())
    assert torch.allclose(p.grad, p.detach())
    q = torch.randn(3, requires_grad=True)
    nc.backward(q.sum() * 0.0 + 2.0)
    assert torch.equal(nc.grad_or_zeros(q), torch.zeros(3))
    with pytest.raises(nc.ContractError):
        nc.backward(q * 2)


def test_numerical_gradient_of_matmul(f64):
    a = torch.randn(3, 4, requires_grad=True)
    b = torch.randn(4, 2, requires_grad=True)
    w = torch.randn(3, 2)
    fn = lambda: (nc.matmul(a, b) * w).sum()
    nc.backward(fn())
    for p in (a, b):
        assert nc.relative_error(p.grad, nc.numerical_gradient(fn, p)) < 1e-4


def test_adamw_matches_torch_reference(f64):
    """Our AdamW against torch.optim.AdamW on the same gradient stream."""
    x0 = torch.randn(6)
    a = x0.clone().requires_grad_(True)
    b = x0.clone().requires_grad_(True)
    ours = nc.AdamW({"x": a}, lr=0.05, weight_decay=0.1)
    ref = torch.optim.AdamW([b], lr=0.05, weight_decay=0.1)
    target = torch.linspace(-1, 1, 6)
    for _ in range(25):
        for p in (a, b):
            p.grad = None
            ((p - target) ** 2).sum().backward()
        ours.step()
        ref.step()
    assert torch.allclose(a, b, atol=1e-12)


def test_adam_zero_gradient_leaves_params_up_to_decay():
    p = torch.ones(3, requires_grad=True)
    opt = nc.AdamW({"p": p}, lr=0.1, weight_decay=0.5)
    p.grad = torch.zeros(3)
    opt.step()
    assert torch.allclose(p, torch.full((3,), 1 - 0.1 * 0.5))
    q = torch.ones(3, requires_grad=True)
    opt = nc.Adam({"q": q}, lr=0.1)
    q.grad = torch.zeros(3)
    opt.step()
    assert torch.equal(q, torch.ones(3))


def test_adam_quadratic_converges(f64):
    x = torch.tensor([5.0], requires_grad=True)
    opt = nc.Adam({"x": x}, lr=0.1)
    for _ in range(200):
        opt.zero_grad()
        nc.backward(((x - 2.0) ** 2).sum())
        opt.step()
    assert abs(float(x.detach()) - 2.0) < 0.05


def test_adam_linear_regression_loss_decreases(f64):
    g = torch.Generator().manual_seed(0)
    X = torch.randn(40, 3, generator=g)
    y = X @ torch.tensor([1.0, -2.0, 0.5]) + 0.01 * torch.randn(40, generator=g)
    w = torch.zeros(3, requires_grad=True)
    opt = nc.Adam({"w": w}, lr=0.05)
    losses = []
    for _ in range(5):
        opt.zero_grad()
        loss = ((X @ w - y) ** 2).mean()
        losses.append(loss.item())
        nc.backward(loss)
        opt.step()
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert losses[-1] > float(((X @ torch.linalg.lstsq(X, y).solution - y) ** 2).mean())


def test_nan_gradient_names_parameter():
    p = torch.ones(2, requires_grad=True)
    opt = nc.Adam({"encoder.w": p})
    p.grad = torch.tensor([1.0, float("nan")])
    with pytest.raises(FloatingPointError, match="encoder.w"):
        opt.step()


def test_step_counter_increases():
    p = torch.ones(2, requires_grad=True)
    opt = nc.Adam({"p": p})
    seen = []
    for _ in range(3):
        p.grad = torch.ones(2)
        opt.step()
        seen.append(opt.state.step)
    assert seen == [1, 2, 3]


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    t = {"a": torch.randn(3, 4), "b": torch.randn(5, dtype=torch.float64), "s": torch.tensor(2.5)}
    nc.save_tensors(tmp_path / "ck", t, {"epoch": 3})
    back, meta = nc.load_tensors(tmp_path / "ck")
    assert meta == {"epoch": 3}
    for k in t:
        assert back[k].dtype == t[k].dtype and torch.equal(back[k], t[k])
    nc.save_tensors(tmp_path / "ck", {"a": torch.zeros(1)})
    assert set(nc.load_tensors(tmp_path / "ck")[0]) == {"a"}
    assert not (tmp_path / "ck.tmp").exists()


def test_checkpoint_rejects_truncated_file(tmp_path):
    nc.save_tensors(tmp_path / "ck", {"a": torch.randn(10)})
    f = tmp_path / "ck" / "0000.bin"
    f.write_bytes(f.read_bytes()[:-4])
    with pytest.raises(nc.ContractError):
        nc.load_tensors(tmp_path / "ck")


def test_precision_context_restores():
    before = torch.get_default_dtype()
    with nc.precision(64):
        assert torch.get_default_dtype() == torch.float64
    assert torch.get_default_dtype() == before
    with pytest.raises(ValueError):
        nc.set_precision(16)


def test_forward_deterministic():
    nc.seed_everything(5)
    a = nc.softmax(torch.randn(8, 8), -1)
    nc.seed_everything(5)
    b = nc.softmax(torch.randn(8, 8), -1)
    assert torch.equal(a, b)
