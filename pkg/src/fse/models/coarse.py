"""CoarseGenNet: full-resolution coarse shadow removal with dynamic dilated convolutions."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigError, NumericError, ShapeError
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

PREFIX = "coarse."
SIMPLEX_TOL = 1e-6
HEAD_GAIN = 0.1


@dataclass
class CoarseNetConfig:
    in_channels: int = 4
    base_channels: int = 48
    num_agg_blocks: int = 4
    dilation_rates: tuple[int, ...] = (1, 2, 4, 8)
    num_experts: int = 4
    residual_scale: float = 1.0

    def __post_init__(self):
        self.dilation_rates = tuple(int(d) for d in self.dilation_rates)
        if self.in_channels != 4:
            raise ConfigError("CoarseGenNet takes RGB + refined mask, in_channels must be 4")
        if len(self.dilation_rates) != self.num_agg_blocks:
            raise ConfigError(
                f"need one dilation rate per AggBlock: {self.num_agg_blocks} blocks, rates {self.dilation_rates}"
            )
        if any(d < 1 for d in self.dilation_rates):
            raise ConfigError(f"dilation rates must be positive integers, got {self.dilation_rates}")
        if self.num_experts < 1 or self.base_channels < 1:
            raise ConfigError("num_experts and base_channels must be positive")

    @classmethod
    def from_params(cls, params: NamedTensorMap) -> "CoarseNetConfig":
        names = list(params)
        blocks = indices(names, r"coarse\.agg(\d+)\.router\.weight")
        rates = tuple(max(indices(names, rf"coarse\.agg{i}\.branch(\d+)\.expert0\.weight")) for i in blocks)
        experts = indices(names, rf"coarse\.agg{blocks[0]}\.branch1\.expert(\d+)\.weight")
        return cls(
            base_channels=params[PREFIX + "stem.weight"].shape[0],
            num_agg_blocks=len(blocks),
            dilation_rates=rates,
            num_experts=len(experts),
        )


def dynamic_conv(
    features: torch.Tensor,
    experts: torch.Tensor,
    router_weights: torch.Tensor,
    dilation: int = 1,
) -> torch.Tensor:
    """Per-sample convolution with the router-weighted mixture of expert kernels.

    ``experts`` is ``[K, C_out, C_in, k, k]``; ``router_weights`` is ``[N, K]``
    with rows on the probability simplex. Padding keeps the spatial size.
    """
    n, cin, h, w = features.shape
    k_count, cout, _, kh, kw = experts.shape
    if router_weights.shape != (n, k_count):
        raise ShapeError(f"router weights {tuple(router_weights.shape)} != ({n}, {k_count})")
    rw = router_weights.detach()
    if (rw < -SIMPLEX_TOL).any() or ((rw.sum(dim=1) - 1.0).abs() > SIMPLEX_TOL).any():
        raise NumericError("router weights must lie on the probability simplex")
    kernels = torch.einsum("nk,koihw->noihw", router_weights.to(experts.dtype), experts)
    pad = dilation * (kh // 2)
    out = F.conv2d(
        features.reshape(1, n * cin, h, w),
        kernels.reshape(n * cout, cin, kh, kw),
        padding=pad,
        dilation=dilation,
        groups=n,
    )
    return out.reshape(n, cout, h, w)


class AggBlock(nn.Module):
    """Parallel dynamic convolutions at dilations {1, d}, fused by 1x1 and added residually."""

    def __init__(self, channels: int, dilation: int, num_experts: int, residual_scale: float = 1.0):
        super().__init__()
        self.dilations = sorted({1, dilation})
        self.residual_scale = residual_scale
        for d in self.dilations:
            self.add_module(
                f"branch{d}",
                nn.ModuleDict(
                    {f"expert{k}": nn.Conv2d(channels, channels, 3, bias=False) for k in range(num_experts)}
                ),
            )
        self.router = nn.Linear(channels, num_experts)
        self.fuse = nn.Conv2d(channels * len(self.dilations), channels, 1)

    def route(self, features: torch.Tensor) -> torch.Tensor:
        logits = self.router(features.mean(dim=(2, 3)))
        return torch.softmax(logits.to(torch.float64), dim=1).to(features.dtype)

    def expert_stack(self, d: int) -> torch.Tensor:
        branch = getattr(self, f"branch{d}")
        return torch.stack([branch[f"expert{k}"].weight for k in range(len(branch))])

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        weights = self.route(features)
        outs = [leaky(dynamic_conv(features, self.expert_stack(d), weights, d)) for d in self.dilations]
        return features + self.residual_scale * self.fuse(torch.cat(outs, dim=1))


class CoarseGenNet(nn.Module):
    def __init__(self, config: CoarseNetConfig | None = None):
        super().__init__()
        self.config = config = config or CoarseNetConfig()
        c = config.base_channels
        self.stem = nn.Conv2d(config.in_channels, c, 3, padding=1)
        for i, d in enumerate(config.dilation_rates, start=1):
            self.add_module(f"agg{i}", AggBlock(c, d, config.num_experts, config.residual_scale))
        self.head = nn.Conv2d(c, 3, 3, padding=1)

    @property
    def blocks(self) -> list[AggBlock]:
        return [getattr(self, f"agg{i}") for i in range(1, self.config.num_agg_blocks + 1)]

    def features(self, img: torch.Tensor, refined_mask: torch.Tensor, upto: int | None = None) -> torch.Tensor:
        """Feature map after the stem and the first ``upto`` AggBlocks (all when None)."""
        require_shape(img, 3, "img")
        require_shape(refined_mask, 1, "refined_mask")
        if img.shape[0] != refined_mask.shape[0] or img.shape[-2:] != refined_mask.shape[-2:]:
            raise ShapeError(f"img {tuple(img.shape)} and mask {tuple(refined_mask.shape)} disagree")
        check_finite(img, "img")
        x = leaky(self.stem(torch.cat([img, refined_mask], dim=1)))
        for block in self.blocks[:upto]:
            x = block(x)
        return x

    def forward(self, img: torch.Tensor, refined_mask: torch.Tensor) -> torch.Tensor:
        # global residual: the network predicts a correction to the input image
        return img + self.head(self.features(img, refined_mask))

    def reset_parameters(self, seed: int) -> None:
        def special(name, p, gen):
            if name == PREFIX + "head.weight":
                uniform_fan_in_(p, gen, gain=HEAD_GAIN)
                return True
            return False

        init_parameters(self, seed, PREFIX, special)


def coarse_init(config: CoarseNetConfig, seed: int) -> NamedTensorMap:
    net = CoarseGenNet(config)
    net.reset_parameters(seed)
    return prefixed({k: v.detach().clone() for k, v in net.state_dict().items()}, PREFIX)


def coarse_forward(
    params: NamedTensorMap,
    img: torch.Tensor,
    refined_mask: torch.Tensor,
    config: CoarseNetConfig | None = None,
) -> torch.Tensor:
    net = CoarseGenNet(config or CoarseNetConfig.from_params(params))
    return call_with(net, strip_prefix(params, PREFIX), img, refined_mask)


def agg_block_forward(block_params: NamedTensorMap, features: torch.Tensor, dilation: int) -> torch.Tensor:
    """Run a single AggBlock from its own parameter map (names relative to the block)."""
    k = len(indices(block_params, r"branch1\.expert(\d+)\.weight"))
    block = AggBlock(features.shape[1], dilation, k)
    return call_with(block, block_params, features)
