"""Image-quality metrics and the composite training loss.

All metrics take ``[N, C, H, W]`` tensors in the unit interval. ``mse`` and
``ssim`` return differentiable scalar tensors; ``psnr`` returns a float.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
FALLBACK_SEED = 20240607


def _same_shape(pred: torch.Tensor, target: torch.Tensor) -> None:
    if pred.shape != target.shape:
        raise ShapeError(f"pred {tuple(pred.shape)} and target {tuple(target.shape)} differ")


def mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _same_shape(pred, target)
    return ((pred - target) ** 2).mean()


def psnr(pred: torch.Tensor, target: torch.Tensor, peak: float = 1.0) -> float:
    err = float(mse(pred.detach().double(), target.detach().double()))
    if err < 1e-10:
        return PSNR_CAP_DB
    return 10.0 * math.log10(peak**2 / err)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, dtype=torch.float64) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g).to(dtype)


def ssim(pred: torch.Tensor, target: torch.Tensor, peak: float = 1.0) -> torch.Tensor:
    """Mean SSIM over all valid 11x11 Gaussian windows, channels and batch."""
    _same_shape(pred, target)
    if pred.ndim != 4:
        raise ShapeError(f"expected [N, C, H, W], got {tuple(pred.shape)}")
    n, c, h, w = pred.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ConfigError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    win = gaussian_window(dtype=pred.dtype).to(pred.device).expand(c, 1, SSIM_WINDOW, SSIM_WINDOW)

    def blur(t):
        return F.conv2d(t, win, groups=c)

    mu_x, mu_y = blur(pred), blur(target)
    sxx = blur(pred * pred) - mu_x * mu_x
    syy = blur(target * target) - mu_y * mu_y
    sxy = blur(pred * target) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return (num / den).mean()


# ---------------------------------------------------------------------------
# perceptual distance
# ---------------------------------------------------------------------------


class RandomFeatureBackend(nn.Module):
    """Fixed random 3-layer conv stack standing in for a pretrained LPIPS network.

    Scores from this backend are a deterministic proxy, not LPIPS, and are
    flagged ``proxy=True`` in reports.
    """

    proxy = True

    def __init__(self, seed: int = FALLBACK_SEED, channels: Sequence[int] = (16, 32, 32)):
        super().__init__()
        self.seed = seed
        gen = torch.Generator().manual_seed(seed)
        layers = []
        cin = 3
        for i, cout in enumerate(channels):
            conv = nn.Conv2d(cin, cout, 3, stride=1 if i == 0 else 2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / (cin * 9)))
                conv.bias.zero_()
            layers.append(conv)
            cin = cout
        self.layers = nn.ModuleList(layers)
        self.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        x = 2.0 * x - 1.0
        for conv in self.layers:
            x = F.gelu(F.conv2d(x, conv.weight.to(x.dtype), conv.bias.to(x.dtype), conv.stride, conv.padding))
            feats.append(x)
        return feats


class TorchScriptBackend:
    """User-supplied extractor saved with ``torch.jit.save``; must return a list of feature maps."""

    proxy = False

    def __init__(self, path):
        self.path = str(path)
        self.module = torch.jit.load(self.path, map_location="cpu")
        self.module.eval()

    def __call__(self, x: torch.Tensor) -> list[torch.Tensor]:
        return list(self.module(x))


FeatureBackend = Callable[[torch.Tensor], Sequence[torch.Tensor]]


def load_backend(spec: Optional[str] = "fallback", allow_fallback: bool = True):
    """``"fallback"``/None selects the random-feature proxy, anything else is a TorchScript path."""
    if spec in (None, "", "fallback"):
        if not allow_fallback:
            raise ConfigError(
                "no perceptual backend given and the fallback is disabled; pass "
                "--perceptual-backend <torchscript file> or allow the 'fallback' proxy"
            )
        return RandomFeatureBackend()
    return TorchScriptBackend(spec)


def unit_normalize(f: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    return f / torch.sqrt((f * f).sum(dim=1, keepdim=True) + eps)


def perceptual_distance(pred: torch.Tensor, target: torch.Tensor, backend: Optional[FeatureBackend] = None) -> torch.Tensor:
    """Sum over layers of the mean squared difference of channel-normalized features."""
    _same_shape(pred, target)
    if backend is None:
        backend = load_backend("fallback")
    fp, ft = backend(pred), backend(target)
    total = pred.new_zeros(())
    for a, b in zip(fp, ft):
        total = total + ((unit_normalize(a) - unit_normalize(b)) ** 2).mean()
    return total


def is_proxy(backend) -> bool:
    return bool(getattr(backend, "proxy", False))


# ---------------------------------------------------------------------------
# composite loss
# ---------------------------------------------------------------------------


@dataclass
class LossWeights:
    lambda1: float = 0.2
    lambda2: float = 0.2
    aux_mask_weight: float = 0.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "aux_mask_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be >= 0")


def composite_loss(pred, target, weights: LossWeights | None = None, backend=None):
    """``mse + lambda1 * (1 - ssim) + lambda2 * perceptual``.

    Returns ``(total, terms)`` where ``terms`` holds the unweighted
    ``mse``, ``ssim_term`` (1 - SSIM) and ``perc_term`` tensors. The
    perceptual term is skipped (reported as 0) when its weight is 0.
    """
    weights = weights or LossWeights()
    l_mse = mse(pred, target)
    l_ssim = 1.0 - ssim(pred, target) if weights.lambda1 > 0 else pred.new_zeros(())
    l_perc = perceptual_distance(pred, target, backend) if weights.lambda2 > 0 else pred.new_zeros(())
    total = l_mse + weights.lambda1 * l_ssim + weights.lambda2 * l_perc
    return total, {"mse": l_mse, "ssim_term": l_ssim, "perc_term": l_perc}


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    mse: float
    lpips: Optional[float]
    n_samples: int
    lpips_proxy: bool = True
    dataset: str = ""
    method: str = ""

    def to_text(self) -> str:
        lines = [f"psnr_db={self.psnr:.6f}", f"ssim={self.ssim:.6f}", f"mse={self.mse:.8f}"]
        key = "lpips_proxy" if self.lpips_proxy else "lpips"
        lines.append(f"{key}={'unavailable' if self.lpips is None else f'{self.lpips:.6f}'}")
        lines.append(f"n_samples={self.n_samples}")
        if self.dataset:
            lines.append(f"dataset={self.dataset}")
        if self.method:
            lines.append(f"method={self.method}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricReport":
        kv = {}
        for line in text.splitlines():
            if line.strip() and "=" in line:
                k, v = line.split("=", 1)
                kv[k.strip()] = v.strip()
        proxy = "lpips_proxy" in kv
        raw = kv.get("lpips_proxy", kv.get("lpips", "unavailable"))
        return cls(
            psnr=float(kv["psnr_db"]),
            ssim=float(kv["ssim"]),
            mse=float(kv["mse"]),
            lpips=None if raw == "unavailable" else float(raw),
            n_samples=int(kv["n_samples"]),
            lpips_proxy=proxy,
            dataset=kv.get("dataset", ""),
            method=kv.get("method", ""),
        )
