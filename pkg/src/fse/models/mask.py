"""MaskGuideNet: refines an initial shadow mask into a soft probability map."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from ..errors import ConfigError, ShapeError
from .common import (
    NamedTensorMap,
    call_with,
    check_finite,
    indices,
    init_parameters,
    leaky,
    prefixed,
    require_shape,
    strip_prefix,
    uniform_fan_in_,
)

PREFIX = "mask."
# float32 sigmoid saturates to exactly 0 or 1 beyond about |17|
LOGIT_LIMIT = 15.0
HEAD_GAIN = 0.1


@dataclass
class MaskNetConfig:
    in_channels: int = 4
    base_channels: int = 32
    num_extract_blocks: int = 2
    num_residual_blocks: int = 4

    def __post_init__(self):
        if self.in_channels != 4:
            raise ConfigError("MaskGuideNet takes RGB + mask, in_channels must be 4")
        if self.base_channels < 8:
            raise ConfigError(f"base_channels must be >= 8, got {self.base_channels}")
        if self.num_extract_blocks < 1 or self.num_residual_blocks < 1:
            raise ConfigError("block counts must be >= 1")

    @classmethod
    def from_params(cls, params: NamedTensorMap) -> "MaskNetConfig":
        names = list(params)
        return cls(
            base_channels=params[PREFIX + "e1.0.weight"].shape[0],
            num_extract_blocks=len(indices(names, r"mask\.e1\.(\d+)\.weight")),
            num_residual_blocks=len(indices(names, r"mask\.d\.(\d+)\.conv1\.weight")),
        )


def conv3x3(cin: int, cout: int) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, padding=1)


class ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = conv3x3(channels, channels)
        self.conv2 = conv3x3(channels, channels)

    def forward(self, x):
        return x + self.conv2(leaky(self.conv1(x)))


class MaskGuideNet(nn.Module):
    """extract -> residual -> extract -> 1x1 logit -> sigmoid, all at full resolution."""

    def __init__(self, config: MaskNetConfig | None = None):
        super().__init__()
        self.config = config = config or MaskNetConfig()
        c = config.base_channels
        self.e1 = nn.ModuleList(
            [conv3x3(config.in_channels if i == 0 else c, c) for i in range(config.num_extract_blocks)]
        )
        self.d = nn.ModuleList([ResBlock(c) for _ in range(config.num_residual_blocks)])
        self.e2 = nn.ModuleList([conv3x3(c, c) for _ in range(config.num_extract_blocks)])
        self.head = nn.Conv2d(c, 1, 1)

    def logits(self, img: torch.Tensor, init_mask: torch.Tensor) -> torch.Tensor:
        require_shape(img, 3, "img")
        require_shape(init_mask, 1, "init_mask")
        if img.shape[0] != init_mask.shape[0] or img.shape[-2:] != init_mask.shape[-2:]:
            raise ShapeError(f"img {tuple(img.shape)} and init_mask {tuple(init_mask.shape)} disagree")
        check_finite(img, "img")
        check_finite(init_mask, "init_mask")
        # channel order is fixed: RGB at 0..2, mask at 3
        x = torch.cat([img, init_mask], dim=1)
        for conv in self.e1:
            x = leaky(conv(x))
        for block in self.d:
            x = block(x)
        for conv in self.e2:
            x = leaky(conv(x))
        return self.head(x)

    def forward(self, img: torch.Tensor, init_mask: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(img, init_mask).clamp(-LOGIT_LIMIT, LOGIT_LIMIT))

    def reset_parameters(self, seed: int) -> None:
        def special(name, p, gen):
            if name == PREFIX + "head.weight":
                uniform_fan_in_(p, gen, gain=HEAD_GAIN)
                return True
            return False

        init_parameters(self, seed, PREFIX, special)


def maskguide_init(config: MaskNetConfig, seed: int) -> NamedTensorMap:
    net = MaskGuideNet(config)
    net.reset_parameters(seed)
    return prefixed({k: v.detach().clone() for k, v in net.state_dict().items()}, PREFIX)


def maskguide_forward(
    params: NamedTensorMap,
    img: torch.Tensor,
    init_mask: torch.Tensor,
    config: MaskNetConfig | None = None,
) -> torch.Tensor:
    local = strip_prefix(params, PREFIX)
    net = MaskGuideNet(config or MaskNetConfig.from_params(params))
    return call_with(net, local, img, init_mask)
