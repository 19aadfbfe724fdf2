"""Procedural shadow / shadow-free pair synthesis.

A shadow is a binary stencil feathered by a truncated Gaussian and scaled to
a peak opacity. It darkens the clean image multiplicatively, so the result
never exceeds the clean image and pixels outside the penumbra stay untouched.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from PIL import Image, ImageDraw
from scipy import ndimage

from .errors import ConfigError, ShapeError
from .imaging import SamplePair, check_image, check_mask

SHAPES = ("ellipse", "polygon", "band", "occluder_template")
OCCLUDERS = ("hair", "hat", "hand", "blind_slats")
OPACITY_RANGE = (0.15, 0.45)
FLOW_RANGE = (0.10, 0.30)
FEATHER_RANGE = {"hard": (5.0, 15.0), "soft": (25.0, 50.0)}
MASK_THRESHOLD = 0.05
MIN_SIZE = 32
DEFAULT_MICRO_DENSITY = 0.01


@dataclass(frozen=True)
class ShadowSpec:
    shape: str
    opacity: float
    flow: float
    hardness: str
    feather_radius: float
    position: tuple[float, float]
    seed: int

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ConfigError(f"unknown shadow shape {self.shape!r}; expected one of {SHAPES}")
        if not OPACITY_RANGE[0] <= self.opacity <= OPACITY_RANGE[1]:
            raise ConfigError(f"opacity {self.opacity} outside {OPACITY_RANGE}")
        if not FLOW_RANGE[0] <= self.flow <= FLOW_RANGE[1]:
            raise ConfigError(f"flow {self.flow} outside {FLOW_RANGE}")
        if self.hardness not in FEATHER_RANGE:
            raise ConfigError(f"hardness must be 'hard' or 'soft', got {self.hardness!r}")
        lo, hi = FEATHER_RANGE[self.hardness]
        if not lo <= self.feather_radius <= hi:
            raise ConfigError(f"{self.hardness} feather_radius {self.feather_radius} outside [{lo}, {hi}]")
        if len(self.position) != 2 or not all(math.isfinite(p) for p in self.position):
            raise ConfigError(f"position must be two finite numbers, got {self.position}")
        object.__setattr__(self, "position", (float(self.position[0]), float(self.position[1])))

    @property
    def peak_alpha(self) -> float:
        # flow stands in for brush accumulation: 0.10 -> 5/6 of opacity, >=0.15 -> full
        return self.opacity * min(1.0, self.flow / 0.30 + 0.5)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["position"] = list(self.position)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ShadowSpec":
        d = dict(d)
        d["position"] = tuple(d["position"])
        return cls(**d)


@dataclass(frozen=True)
class OccluderTemplate:
    name: str
    silhouette: np.ndarray

    def __post_init__(self):
        if self.name not in OCCLUDERS:
            raise ConfigError(f"unknown occluder {self.name!r}")
        if not np.isin(self.silhouette, (0, 1)).all():
            raise ValueError("occluder silhouette must be binary")


def sample_spec(rng_seed: int, size: tuple[int, int]) -> ShadowSpec:
    h, w = size
    if h < MIN_SIZE or w < MIN_SIZE:
        raise ConfigError(f"image size {h}x{w} too small for shadow synthesis (min {MIN_SIZE})")
    rng = np.random.default_rng(rng_seed)
    shape = SHAPES[int(rng.integers(len(SHAPES)))]
    opacity = float(rng.uniform(*OPACITY_RANGE))
    flow = float(rng.uniform(*FLOW_RANGE))
    hardness = ("hard", "soft")[int(rng.integers(2))]
    feather = float(rng.uniform(*FEATHER_RANGE[hardness]))
    position = (float(rng.uniform(0.0, 1.0)), float(rng.uniform(0.0, 1.0)))
    return ShadowSpec(shape, opacity, flow, hardness, feather, position, int(rng_seed))


# ---------------------------------------------------------------------------
# stencils
# ---------------------------------------------------------------------------


def _grid(size, center):
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return yy + 0.5 - center[1], xx + 0.5 - center[0]


def _rotate(dy, dx, theta):
    c, s = math.cos(theta), math.sin(theta)
    return -s * dx + c * dy, c * dx + s * dy


def _ellipse(size, center, scale, rng):
    a = rng.uniform(0.15, 0.4) * scale
    b = rng.uniform(0.15, 0.4) * scale
    dy, dx = _rotate(*_grid(size, center), rng.uniform(0, math.pi))
    return (dx / a) ** 2 + (dy / b) ** 2 <= 1.0


def _polygon(size, center, scale, rng):
    h, w = size
    n = int(rng.integers(3, 8))
    angles = np.sort(rng.uniform(0, 2 * math.pi, n))
    radii = rng.uniform(0.1, 0.4, n) * scale
    pts = [(center[0] + r * math.cos(t), center[1] + r * math.sin(t)) for r, t in zip(radii, angles)]
    canvas = Image.new("L", (w, h), 0)
    ImageDraw.Draw(canvas).polygon(pts, fill=1)
    return np.asarray(canvas, dtype=bool)


def _band(size, center, scale, rng):
    width = rng.uniform(0.08, 0.3) * scale
    length = rng.uniform(0.5, 1.0) * scale
    dy, dx = _rotate(*_grid(size, center), rng.uniform(0, math.pi))
    return (np.abs(dy) <= width / 2) & (np.abs(dx) <= length)


def _hair(size, center, scale, rng):
    dy, dx = _grid(size, center)
    amp = rng.uniform(0.03, 0.08) * scale
    period = rng.uniform(0.15, 0.35) * scale
    phase = rng.uniform(0, 2 * math.pi)
    thick = rng.uniform(0.1, 0.25) * scale
    edge = amp * np.sin(2 * math.pi * dx / period + phase)
    return (dy >= edge - thick) & (dy <= edge + thick) & (np.abs(dx) <= 0.6 * scale)


def _hat(size, center, scale, rng):
    dy, dx = _rotate(*_grid(size, center), rng.uniform(-0.3, 0.3))
    r = rng.uniform(0.25, 0.5) * scale
    return (dx**2 + dy**2 <= r**2) & (dy <= 0)


def _hand(size, center, scale, rng):
    dy, dx = _rotate(*_grid(size, center), rng.uniform(0, 2 * math.pi))
    base = rng.uniform(0.15, 0.3) * scale
    theta = np.arctan2(dy, dx)
    return np.hypot(dx, dy) <= base * (0.65 + 0.35 * np.cos(5 * theta))


def _blinds(size, center, scale, rng):
    dy, dx = _rotate(*_grid(size, center), rng.uniform(0, math.pi))
    period = rng.uniform(0.08, 0.2) * scale
    duty = rng.uniform(0.3, 0.6)
    extent = rng.uniform(0.3, 0.5) * scale
    stripes = np.mod(dy / period, 1.0) < duty
    return stripes & (np.abs(dy) <= extent) & (np.abs(dx) <= extent)


_OCCLUDER_FNS = {"hair": _hair, "hat": _hat, "hand": _hand, "blind_slats": _blinds}


def occluder_template(name: str, size: tuple[int, int], center=None, seed: int = 0) -> OccluderTemplate:
    h, w = size
    center = (w / 2, h / 2) if center is None else center
    rng = np.random.default_rng(seed)
    sil = _OCCLUDER_FNS[name](size, center, float(min(h, w)), rng)
    return OccluderTemplate(name, sil.astype(np.uint8))


def shape_stencil(spec: ShadowSpec, size: tuple[int, int]) -> np.ndarray:
    """Binary float64 stencil of the shadow shape; every shape stays within 1.1*min(H, W) of its center."""
    h, w = size
    rng = np.random.default_rng(spec.seed)
    center = (spec.position[0] * w, spec.position[1] * h)
    scale = float(min(h, w))
    if spec.shape == "ellipse":
        sil = _ellipse(size, center, scale, rng)
    elif spec.shape == "polygon":
        sil = _polygon(size, center, scale, rng)
    elif spec.shape == "band":
        sil = _band(size, center, scale, rng)
    else:
        name = OCCLUDERS[int(rng.integers(len(OCCLUDERS)))]
        sil = _OCCLUDER_FNS[name](size, center, scale, rng)
    return sil.astype(np.float64)


def gaussian_kernel1d(feather_radius: float) -> np.ndarray:
    """Normalized Gaussian with sigma = radius/3, truncated at the radius (3 sigma)."""
    sigma = feather_radius / 3.0
    r = int(math.ceil(feather_radius))
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def feather(stencil: np.ndarray, feather_radius: float) -> np.ndarray:
    k = gaussian_kernel1d(feather_radius)
    out = ndimage.correlate1d(stencil, k, axis=0, mode="constant", cval=0.0)
    return ndimage.correlate1d(out, k, axis=1, mode="constant", cval=0.0)


def render_shadow_alpha(spec: ShadowSpec, size: tuple[int, int]) -> torch.Tensor:
    """Feathered alpha map ``[1, 1, H, W]`` peaking at ``spec.peak_alpha``."""
    blurred = feather(shape_stencil(spec, size), spec.feather_radius)
    peak = blurred.max()
    if peak <= 0:
        return torch.zeros((1, 1) + tuple(size), dtype=torch.float32)
    alpha = blurred * (spec.peak_alpha / peak)
    return torch.from_numpy(alpha.astype(np.float32))[None, None]


def composite_shadow(clean: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    check_image(clean, "clean", channels=(3,))
    check_mask(alpha, "alpha")
    if clean.shape[0] != 1 or alpha.shape[0] != 1:
        raise ShapeError("composite_shadow expects single images (N=1)")
    if clean.shape[-2:] != alpha.shape[-2:]:
        raise ShapeError(f"alpha size {tuple(alpha.shape[-2:])} does not match image {tuple(clean.shape[-2:])}")
    return clean * (1.0 - alpha)


def micro_shadow_alpha(size: tuple[int, int], density: float, seed: int) -> np.ndarray:
    """Small darkening spots (radius <= 3 px, opacity <= 0.1) covering about ``density`` of the frame."""
    if not 0.0 <= density <= 0.05:
        raise ConfigError(f"micro-shadow density must be in [0, 0.05], got {density}")
    h, w = size
    alpha = np.zeros((h, w), dtype=np.float64)
    if density == 0:
        return alpha
    rng = np.random.default_rng(seed)
    mean_area = math.pi * 2.0**2
    n = max(1, int(round(density * h * w / mean_area)))
    ys = rng.uniform(0, h, n)
    xs = rng.uniform(0, w, n)
    radii = rng.uniform(1.0, 3.0, n)
    opac = rng.uniform(0.02, 0.1, n)
    for cy, cx, r, o in zip(ys, xs, radii, opac):
        y0, y1 = max(0, int(cy - r)), min(h, int(cy + r) + 1)
        x0, x1 = max(0, int(cx - r)), min(w, int(cx + r) + 1)
        yy, xx = np.mgrid[y0:y1, x0:x1]
        d = np.hypot(yy + 0.5 - cy, xx + 0.5 - cx)
        spot = np.where(d <= r, o * (1.0 - (d / r) ** 2), 0.0)
        # max, not product: overlapping spots never exceed the 0.1 opacity cap
        np.maximum(alpha[y0:y1, x0:x1], spot, out=alpha[y0:y1, x0:x1])
    return alpha


def add_micro_shadows(img: torch.Tensor, density: float, seed: int, region: torch.Tensor = None) -> torch.Tensor:
    """Darken small random spots. ``region`` (``[1,1,H,W]``) restricts where spots may land."""
    check_image(img)
    alpha = micro_shadow_alpha(tuple(img.shape[-2:]), density, seed)
    if density == 0:
        return img.clone()
    a = torch.from_numpy(alpha.astype(np.float32))[None, None].to(img.dtype)
    if region is not None:
        a = torch.where(region > 0, a, torch.zeros_like(a))
    return img * (1.0 - a)


def synthesize_pair(
    clean: torch.Tensor,
    spec: ShadowSpec,
    micro_density: float = DEFAULT_MICRO_DENSITY,
    id: str = "",
) -> SamplePair:
    """Build a (shadow, clean, mask) triple from a clean image and a shadow spec.

    Micro-shadows are confined to the feathered shadow support so that pixels
    with zero alpha remain bit-identical to the clean image.
    """
    check_image(clean, "clean", channels=(3,))
    if clean.shape[0] != 1:
        raise ShapeError("synthesize_pair expects a single image (N=1)")
    clean = clean.to(torch.float32)
    alpha = render_shadow_alpha(spec, tuple(clean.shape[-2:]))
    shadow = composite_shadow(clean, alpha)
    shadow = add_micro_shadows(shadow, micro_density, seed=spec.seed + 1, region=alpha)
    mask = (alpha > MASK_THRESHOLD).to(torch.float32)
    return SamplePair(shadow=shadow, target=clean.clone(), mask=mask, id=id)


def synthesize_from_seed(clean: torch.Tensor, seed: int, micro_density: float = DEFAULT_MICRO_DENSITY, id: str = ""):
    spec = sample_spec(seed, tuple(clean.shape[-2:]))
    return synthesize_pair(clean, spec, micro_density, id), spec


def make_clean_image(size: int, seed: int) -> torch.Tensor:
    """A smooth portrait-like test image: shaded background, skin-toned ellipse, mild texture.

    Values stay in [0.2, 0.95] so darkening is always visible.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    bg = rng.uniform(0.3, 0.7, 3)[:, None, None] + 0.15 * (xx - 0.5) * rng.choice([-1, 1])
    cx, cy = rng.uniform(0.4, 0.6, 2)
    ax, ay = rng.uniform(0.25, 0.35), rng.uniform(0.32, 0.42)
    r2 = ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2
    face = np.clip(1.0 - r2, 0.0, 1.0) ** 0.5
    skin = rng.uniform([0.7, 0.5, 0.4], [0.9, 0.7, 0.6])[:, None, None]
    img = bg * (1 - face) + skin * (0.75 + 0.25 * face) * face
    for _ in range(3):
        fx, fy, ph = rng.uniform(2, 10), rng.uniform(2, 10), rng.uniform(0, 2 * math.pi)
        img = img + 0.03 * np.sin(2 * math.pi * (fx * xx + fy * yy) + ph)
    img = np.clip(img, 0.2, 0.95)
    return torch.from_numpy(img.astype(np.float32))[None]
