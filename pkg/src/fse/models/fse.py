"""Three-stage Face Shadow Eraser: mask refinement -> coarse removal -> facial refinement."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn

from ..errors import ConfigError, ShapeError
from .coarse import CoarseGenNet, CoarseNetConfig
from .common import NamedTensorMap, call_with
from .mask import MaskGuideNet, MaskNetConfig
from .refine import RefineFaceNet, RefineNetConfig

STAGES = ("mask", "coarse", "refine")


def normalize_stages(stages) -> frozenset[str]:
    stages = frozenset(stages)
    unknown = stages - set(STAGES)
    if unknown:
        raise ConfigError(f"unknown stage(s) {sorted(unknown)}; expected a subset of {STAGES}")
    if not stages:
        raise ConfigError("at least one pipeline stage must be enabled")
    return stages


@dataclass
class FseConfig:
    mask: MaskNetConfig = field(default_factory=MaskNetConfig)
    coarse: CoarseNetConfig = field(default_factory=CoarseNetConfig)
    refine: RefineNetConfig = field(default_factory=RefineNetConfig)

    @classmethod
    def desk(cls) -> "FseConfig":
        """Reduced profile for 64x64 CPU runs: halved widths, window 4."""
        return cls(
            mask=MaskNetConfig(base_channels=16),
            coarse=CoarseNetConfig(base_channels=24),
            refine=RefineNetConfig(embed_dim=24, window_size=4, irc_hidden=16),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["coarse"]["dilation_rates"] = list(self.coarse.dilation_rates)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FseConfig":
        return cls(
            mask=MaskNetConfig(**d.get("mask", {})),
            coarse=CoarseNetConfig(**d.get("coarse", {})),
            refine=RefineNetConfig(**d.get("refine", {})),
        )


class FaceShadowEraser(nn.Module):
    def __init__(self, config: FseConfig | None = None):
        super().__init__()
        self.config = config = config or FseConfig()
        self.mask = MaskGuideNet(config.mask)
        self.coarse = CoarseGenNet(config.coarse)
        self.refine = RefineFaceNet(config.refine)

    def reset_parameters(self, seed: int) -> None:
        # one derived seed per stage keeps each stage's init independent of the others
        self.mask.reset_parameters(seed * 3 + 0)
        self.coarse.reset_parameters(seed * 3 + 1)
        self.refine.reset_parameters(seed * 3 + 2)

    def forward(self, img: torch.Tensor, init_mask: torch.Tensor, stages=STAGES):
        """Returns ``(R, M', C)``.

        A disabled stage is an identity: no mask stage passes ``init_mask``
        through as M', no coarse stage gives C = img, no refine stage gives R = C.
        """
        stages = normalize_stages(stages)
        if img.ndim != 4 or img.shape[1] != 3:
            raise ShapeError(f"img must be [N, 3, H, W], got {tuple(img.shape)}")
        if init_mask.shape != (img.shape[0], 1) + tuple(img.shape[-2:]):
            raise ShapeError(f"init_mask {tuple(init_mask.shape)} does not match img {tuple(img.shape)}")
        refined = self.mask(img, init_mask) if "mask" in stages else init_mask
        coarse = self.coarse(img, refined) if "coarse" in stages else img
        out = self.refine(coarse, refined) if "refine" in stages else coarse
        return out, refined, coarse

    def named_tensors(self) -> NamedTensorMap:
        return {k: v.detach().clone() for k, v in self.named_parameters()}

    def load_named(self, params: NamedTensorMap) -> None:
        expected = dict(self.named_parameters())
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ShapeError(f"parameter names differ; missing={missing[:5]} extra={extra[:5]}")
        with torch.no_grad():
            for k, p in expected.items():
                if p.shape != params[k].shape:
                    raise ShapeError(f"{k}: expected {tuple(p.shape)}, got {tuple(params[k].shape)}")
                p.copy_(params[k])


def fse_init(config: FseConfig, seed: int) -> NamedTensorMap:
    net = FaceShadowEraser(config)
    net.reset_parameters(seed)
    return net.named_tensors()


def fse_forward(params: NamedTensorMap, img, init_mask, ablation=STAGES, config: FseConfig | None = None):
    if config is None:
        config = FseConfig(
            mask=MaskNetConfig.from_params(params),
            coarse=CoarseNetConfig.from_params(params),
            refine=RefineNetConfig.from_params(params),
        )
    return call_with(FaceShadowEraser(config), params, img, init_mask, ablation)
