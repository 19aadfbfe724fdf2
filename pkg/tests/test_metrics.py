import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from fse.errors import ConfigError, ShapeError
from fse.metrics import (
    FALLBACK_SEED,
    LossWeights,
    MetricReport,
    RandomFeatureBackend,
    TorchScriptBackend,
    composite_loss,
    load_backend,
    mse,
    perceptual_distance,
    psnr,
    ssim,
)

from oracles import finite_difference_check, mse_loop, ssim_loop


def _pair(seed, size=16, channels=3):
    g = torch.Generator().manual_seed(seed)
    return (torch.rand(1, channels, size, size, generator=g, dtype=torch.float64),
            torch.rand(1, channels, size, size, generator=g, dtype=torch.float64))


def test_mse_examples():
    x = torch.rand(1, 3, 8, 8)
    assert float(mse(x, x)) == 0.0
    assert float(mse(torch.zeros(1, 3, 4, 4), torch.ones(1, 3, 4, 4))) == 1.0
    a, b = _pair(0, 8)
    assert abs(float(mse(a, b)) - mse_loop(a, b)) <= 1e-9
    with pytest.raises(ShapeError):
        mse(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 5))


def test_psnr_examples():
    x = torch.rand(1, 3, 8, 8)
    assert psnr(x, x) == 100.0
    assert psnr(torch.zeros(1, 1, 2, 2), torch.ones(1, 1, 2, 2)) == 0.0
    assert abs(psnr(torch.zeros(1, 1, 2, 2, dtype=torch.float64), torch.full((1, 1, 2, 2), 0.1, dtype=torch.float64)) - 20) < 1e-9


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-8, 1.0))
def test_psnr_mse_consistency(err):
    # constant offset of sqrt(err) gives exactly that mse
    a = torch.zeros(1, 1, 4, 4, dtype=torch.float64)
    b = torch.full_like(a, math.sqrt(err))
    assert abs(psnr(a, b) - 10 * math.log10(1 / float(mse(a, b)))) <= 1e-9


def test_ssim_self_and_uniform():
    a, _ = _pair(1)
    assert float(ssim(a, a)) == 1.0
    zero = torch.zeros(1, 1, 11, 11, dtype=torch.float64)
    one = torch.ones_like(zero)
    c1 = 1e-4
    assert abs(float(ssim(zero, one)) - c1 / (1 + c1)) <= 1e-7


def test_ssim_matches_loop():
    for seed in range(3):
        a, b = _pair(seed)
        assert abs(float(ssim(a, b)) - ssim_loop(a, b)) <= 1e-5


def test_ssim_symmetry_and_range():
    a, b = _pair(5)
    assert abs(float(ssim(a, b)) - float(ssim(b, a))) <= 1e-9
    assert -1 <= float(ssim(a, b)) <= 1


def test_ssim_too_small():
    with pytest.raises(ConfigError):
        ssim(torch.rand(1, 3, 10, 12), torch.rand(1, 3, 10, 12))


def test_batch_permutation_invariance():
    g = torch.Generator().manual_seed(9)
    a = torch.rand(4, 3, 16, 16, generator=g, dtype=torch.float64)
    b = torch.rand(4, 3, 16, 16, generator=g, dtype=torch.float64)
    perm = torch.tensor([2, 0, 3, 1])
    assert abs(float(mse(a, b)) - float(mse(a[perm], b[perm]))) <= 1e-15
    assert abs(float(ssim(a, b)) - float(ssim(a[perm], b[perm]))) <= 1e-12
    assert abs(float(perceptual_distance(a, b)) - float(perceptual_distance(a[perm], b[perm]))) <= 1e-12


# --- perceptual ----------------------------------------------------------------


def _independent_fallback(x, y):
    """Re-derive the documented fallback stack without touching the backend class."""
    gen = torch.Generator().manual_seed(FALLBACK_SEED)
    weights, cin = [], 3
    for cout in (16, 32, 32):
        weights.append(torch.randn((cout, cin, 3, 3), generator=gen) * math.sqrt(2.0 / (cin * 9)))
        cin = cout
    total = 0.0
    fx, fy = 2 * x - 1, 2 * y - 1
    for i, w in enumerate(weights):
        stride = 1 if i == 0 else 2
        fx = F.gelu(F.conv2d(fx, w.double(), stride=stride, padding=1))
        fy = F.gelu(F.conv2d(fy, w.double(), stride=stride, padding=1))
        nx = fx / torch.sqrt((fx**2).sum(1, keepdim=True) + 1e-10)
        ny = fy / torch.sqrt((fy**2).sum(1, keepdim=True) + 1e-10)
        total += float(((nx - ny) ** 2).mean())
    return total


def test_perceptual_examples():
    a, b = _pair(3)
    assert float(perceptual_distance(a, a)) == 0.0
    backend = RandomFeatureBackend()
    assert float(perceptual_distance(a, b, backend)) == float(perceptual_distance(a, b, RandomFeatureBackend()))
    assert abs(float(perceptual_distance(a, b, backend)) - _independent_fallback(a, b)) <= 1e-6
    assert float(perceptual_distance(a, b)) > 0
    assert load_backend("fallback").proxy is True


def test_backend_errors_and_torchscript(tmp_path):
    with pytest.raises(ConfigError, match="perceptual-backend"):
        load_backend(None, allow_fallback=False)

    class Ident(torch.nn.Module):
        def forward(self, x):
            return [x, x * 2]

    path = tmp_path / "b.pt"
    torch.jit.save(torch.jit.script(Ident()), str(path))
    backend = load_backend(str(path))
    assert isinstance(backend, TorchScriptBackend) and backend.proxy is False
    a, b = _pair(4)
    assert float(perceptual_distance(a, b, backend)) > 0


# --- composite loss ----------------------------------------------------------


def test_composite_zero_for_identical():
    a, _ = _pair(6)
    total, terms = composite_loss(a, a)
    assert float(total) == 0.0 and all(float(v) == 0 for v in terms.values())


def test_composite_weighted_sum():
    a, b = _pair(7)
    total, terms = composite_loss(a, b, LossWeights(0.2, 0.2))
    expected = mse_loop(a, b) + 0.2 * (1 - ssim_loop(a, b)) + 0.2 * _independent_fallback(a, b)
    assert abs(float(total) - expected) <= 1e-5
    hand = float(terms["mse"]) + 0.2 * float(terms["ssim_term"]) + 0.2 * float(terms["perc_term"])
    assert abs(float(total) - hand) <= 1e-9


def test_composite_pure_mse():
    a, b = _pair(8)
    total, _ = composite_loss(a, b, LossWeights(0.0, 0.0))
    assert torch.equal(total, mse(a, b))


def test_loss_weight_validation():
    with pytest.raises(ConfigError):
        LossWeights(lambda1=-0.1)


def test_composite_gradient():
    g = torch.Generator().manual_seed(11)
    a = torch.rand(1, 3, 12, 12, generator=g, dtype=torch.float64)
    b = torch.rand(1, 3, 12, 12, generator=g, dtype=torch.float64)
    backend = RandomFeatureBackend()
    errors = finite_difference_check(lambda t: composite_loss(t["a"], b, LossWeights(), backend)[0], {"a": a}, 200)
    assert sum(e <= 1e-3 for e in errors) / len(errors) >= 0.99


# --- report ------------------------------------------------------------------


def test_report_roundtrip():
    r = MetricReport(psnr=31.5, ssim=0.97, mse=0.0007, lpips=0.01, n_samples=4)
    text = r.to_text()
    assert "psnr_db=31.500000" in text and "lpips_proxy=" in text and "n_samples=4" in text
    back = MetricReport.from_text(text)
    assert back.n_samples == 4 and back.lpips_proxy and abs(back.psnr - 31.5) < 1e-9
    real = MetricReport(psnr=1, ssim=0.5, mse=0.1, lpips=None, n_samples=1, lpips_proxy=False)
    assert "lpips=unavailable" in real.to_text()
    assert MetricReport.from_text(real.to_text()).lpips is None
