"""Image I/O, paired datasets, augmentation and initial-mask thresholding.

Images are float32 torch tensors laid out as ``[N, C, H, W]`` with values in
the unit interval. Quantization to 8 bits happens only when reading or
writing files.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image

from .errors import ConfigError, ImageFormatError, PairingError, ShapeError

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")
LUMA_WEIGHTS = (0.299, 0.587, 0.114)
DEFAULT_TAU = 0.05


def check_image(t: torch.Tensor, name: str = "image", channels=(1, 3)) -> None:
    if t.ndim != 4:
        raise ShapeError(f"{name} must be rank-4 [N, C, H, W], got shape {tuple(t.shape)}")
    if t.shape[1] not in channels:
        raise ShapeError(f"{name} must have {' or '.join(map(str, channels))} channels, got {t.shape[1]}")
    if min(t.shape) < 1:
        raise ShapeError(f"{name} has an empty dimension: {tuple(t.shape)}")


def check_mask(m: torch.Tensor, name: str = "mask") -> None:
    check_image(m, name, channels=(1,))


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------


def load_image(path) -> torch.Tensor:
    """Read an 8- or 16-bit PNG/JPEG into a ``[1, C, H, W]`` tensor in [0, 1]."""
    path = Path(path)
    try:
        img = Image.open(path)
        img.load()
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc

    mode = img.mode
    if mode in ("RGBA", "P", "LA", "CMYK", "YCbCr"):
        img = img.convert("RGB" if mode != "LA" else "L")
        mode = img.mode
    if mode == "RGB":
        arr = np.asarray(img, dtype=np.float32) / 255.0
        arr = arr.transpose(2, 0, 1)
    elif mode == "L":
        arr = (np.asarray(img, dtype=np.float32) / 255.0)[None]
    elif mode in ("I;16", "I;16B", "I;16L"):
        arr = (np.asarray(img, dtype=np.float32) / 65535.0)[None]
    else:
        raise ImageFormatError(f"unsupported image mode {mode!r} in {path}")
    return torch.from_numpy(np.ascontiguousarray(arr))[None]


def to_uint8(t: torch.Tensor) -> np.ndarray:
    """Clamp to [0, 1] and quantize a ``[1, C, H, W]`` tensor to an HWC uint8 array."""
    check_image(t)
    if t.shape[0] != 1:
        raise ShapeError(f"expected a single image (N=1), got N={t.shape[0]}")
    arr = t[0].detach().to(torch.float64).clamp(0.0, 1.0).cpu().numpy()
    arr = np.round(arr * 255.0).astype(np.uint8)
    return arr.transpose(1, 2, 0)


def save_image(t: torch.Tensor, path) -> None:
    arr = to_uint8(t)
    if arr.shape[2] == 1:
        pil = Image.fromarray(arr[:, :, 0], mode="L")
    else:
        pil = Image.fromarray(arr, mode="RGB")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pil.save(path)


# ---------------------------------------------------------------------------
# luminance and initial mask
# ---------------------------------------------------------------------------


def rgb_to_luminance(t: torch.Tensor) -> torch.Tensor:
    check_image(t, channels=(3,))
    r, g, b = t[:, 0:1], t[:, 1:2], t[:, 2:3]
    return LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b


def _luminance(t: torch.Tensor) -> torch.Tensor:
    return t if t.shape[1] == 1 else rgb_to_luminance(t)


def initial_mask(input_img: torch.Tensor, target_img: torch.Tensor, tau: float = DEFAULT_TAU) -> torch.Tensor:
    """Binary mask of pixels whose luminance changes by more than ``tau``."""
    check_image(input_img, "input_img")
    check_image(target_img, "target_img")
    if input_img.shape != target_img.shape:
        raise ShapeError(f"input {tuple(input_img.shape)} and target {tuple(target_img.shape)} differ")
    if tau < 0:
        raise ConfigError(f"tau must be non-negative, got {tau}")
    diff = (_luminance(target_img) - _luminance(input_img)).abs()
    return (diff > tau).to(input_img.dtype)


def zero_mask_like(img: torch.Tensor) -> torch.Tensor:
    """Inference-time initial mask: no prior shadow estimate."""
    n, _, h, w = img.shape
    return img.new_zeros((n, 1, h, w))


# ---------------------------------------------------------------------------
# paired samples
# ---------------------------------------------------------------------------


@dataclass
class SamplePair:
    shadow: torch.Tensor
    target: torch.Tensor
    mask: Optional[torch.Tensor] = None
    id: str = ""

    def __post_init__(self):
        check_image(self.shadow, f"shadow[{self.id}]")
        check_image(self.target, f"target[{self.id}]")
        if self.shadow.shape[0] != 1 or self.target.shape[0] != 1:
            raise ShapeError(f"pair {self.id!r}: shadow and target must have N=1")
        if self.shadow.shape != self.target.shape:
            raise ShapeError(
                f"pair {self.id!r}: shadow {tuple(self.shadow.shape)} vs target {tuple(self.target.shape)}"
            )
        if self.mask is not None:
            check_mask(self.mask, f"mask[{self.id}]")
            if self.mask.shape[-2:] != self.shadow.shape[-2:]:
                raise ShapeError(f"pair {self.id!r}: mask size {tuple(self.mask.shape[-2:])} does not match image")

    @property
    def size(self) -> tuple[int, int]:
        return tuple(self.shadow.shape[-2:])


@dataclass
class AugmentSpec:
    crop_size: int
    enable_hflip: bool = True
    rotation_choices: tuple[int, ...] = (0, 90, 180, 270)
    seed: int = 0

    def __post_init__(self):
        bad = [r for r in self.rotation_choices if r not in (0, 90, 180, 270)]
        if bad:
            raise ConfigError(f"rotations must be right angles, got {bad}")
        if not self.rotation_choices:
            raise ConfigError("rotation_choices must not be empty")
        if self.crop_size < 1:
            raise ConfigError(f"crop_size must be positive, got {self.crop_size}")


@dataclass(frozen=True)
class Transform:
    """A concrete crop + flip + right-angle rotation."""

    top: int
    left: int
    size: int
    hflip: bool = False
    rotation: int = 0

    def apply(self, t: torch.Tensor) -> torch.Tensor:
        out = t[..., self.top:self.top + self.size, self.left:self.left + self.size]
        if self.hflip:
            out = torch.flip(out, dims=(-1,))
        k = (self.rotation // 90) % 4
        if k:
            out = torch.rot90(out, k, dims=(-2, -1))
        return out.contiguous()


def sample_transform(spec: AugmentSpec, height: int, width: int) -> Transform:
    if spec.crop_size > min(height, width):
        raise ConfigError(f"crop_size {spec.crop_size} exceeds image size {height}x{width}")
    rng = np.random.default_rng(spec.seed)
    top = int(rng.integers(0, height - spec.crop_size + 1))
    left = int(rng.integers(0, width - spec.crop_size + 1))
    hflip = bool(rng.integers(0, 2)) if spec.enable_hflip else False
    rotation = int(spec.rotation_choices[int(rng.integers(0, len(spec.rotation_choices)))])
    return Transform(top, left, spec.crop_size, hflip, rotation)


def apply_transform(pair: SamplePair, tf: Transform) -> SamplePair:
    return SamplePair(
        shadow=tf.apply(pair.shadow),
        target=tf.apply(pair.target),
        mask=None if pair.mask is None else tf.apply(pair.mask),
        id=pair.id,
    )


def augment(pair: SamplePair, spec: AugmentSpec) -> SamplePair:
    """Apply one seeded geometric transform identically to every image in the pair."""
    h, w = pair.size
    return apply_transform(pair, sample_transform(spec, h, w))


# ---------------------------------------------------------------------------
# directory datasets
# ---------------------------------------------------------------------------


def _index_dir(d: Path) -> dict[str, Path]:
    if not d.is_dir():
        return {}
    out: dict[str, Path] = {}
    for p in d.iterdir():
        if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS:
            if p.stem in out:
                raise PairingError(f"duplicate id {p.stem!r} in {d}: {out[p.stem].name}, {p.name}")
            out[p.stem] = p
    return out


def read_manifest(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip() and not line.lstrip().startswith("#")]


def load_paired_dataset(root, manifest=None) -> list[SamplePair]:
    """Load ``root/shadow/<id>``, ``root/target/<id>`` and optional ``root/mask/<id>``.

    Pairs are returned sorted by id. A manifest (one id per line) restricts
    the split to the listed ids.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    shadows = _index_dir(root / "shadow")
    targets = _index_dir(root / "target")
    masks = _index_dir(root / "mask")

    if manifest is not None:
        ids = sorted(set(read_manifest(manifest)))
        missing = [i for i in ids if i not in shadows or i not in targets]
        if missing:
            raise PairingError(f"manifest ids without a shadow/target pair: {', '.join(missing)}")
    else:
        orphans = sorted(
            [f"shadow/{shadows[i].name}" for i in shadows.keys() - targets.keys()]
            + [f"target/{targets[i].name}" for i in targets.keys() - shadows.keys()]
        )
        if orphans:
            raise PairingError(f"unmatched files in {root}: {', '.join(orphans)}")
        ids = sorted(shadows)

    pairs = []
    for i in ids:
        shadow = load_image(shadows[i])
        target = load_image(targets[i])
        if shadow.shape != target.shape:
            raise ShapeError(f"pair {i!r}: shadow {tuple(shadow.shape)} vs target {tuple(target.shape)}")
        mask = None
        if i in masks:
            mask = load_image(masks[i])
            if mask.shape[1] == 3:
                mask = rgb_to_luminance(mask)
            if mask.shape[-2:] != shadow.shape[-2:]:
                raise ShapeError(f"pair {i!r}: mask size {tuple(mask.shape[-2:])} differs from image")
        pairs.append(SamplePair(shadow, target, mask, i))
    return pairs


def save_paired_sample(pair: SamplePair, root) -> None:
    root = Path(root)
    save_image(pair.shadow, root / "shadow" / f"{pair.id}.png")
    save_image(pair.target, root / "target" / f"{pair.id}.png")
    if pair.mask is not None:
        save_image(pair.mask, root / "mask" / f"{pair.id}.png")


def list_images(d) -> list[Path]:
    d = Path(d)
    return sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)


def resize(t: torch.Tensor, size: int) -> torch.Tensor:
    """Bilinear (antialiased) resize to ``size x size``; a no-op when already that size."""
    if t.shape[-2:] == (size, size):
        return t
    return torch.nn.functional.interpolate(t, size=(size, size), mode="bilinear", align_corners=False, antialias=True)


def default_output_root() -> Path:
    return Path(os.environ.get("FSE_OUTPUT_ROOT", "runs"))
