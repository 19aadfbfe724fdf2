"""RefineFaceNet: windowed attention branch gated by a mask-conditioned modulation branch.

R = C + AHSWA(C) * IRC(C, M'), elementwise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

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

PREFIX = "refine."
HEAD_GAIN = 0.1


@dataclass
class RefineNetConfig:
    embed_dim: int = 48
    window_size: int = 8
    num_heads: int = 4
    depth: int = 2
    num_scales: int = 2
    irc_blocks: int = 3
    irc_hidden: int = 32
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.window_size < 2:
            raise ConfigError(f"window_size must be >= 2, got {self.window_size}")
        if self.depth < 2 or self.depth % 2:
            raise ConfigError(f"depth must be even (regular/shifted pairs), got {self.depth}")
        if self.irc_blocks != 3:
            raise ConfigError(f"IRC uses exactly three modulation blocks, got {self.irc_blocks}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.num_scales < 1:
            raise ConfigError("num_scales must be >= 1")

    @classmethod
    def from_params(cls, params: NamedTensorMap) -> "RefineNetConfig":
        names = list(params)
        table = params[PREFIX + "s1.b1.bias_table.table"]
        embed = params[PREFIX + "embed.weight"].shape[0]
        return cls(
            embed_dim=embed,
            window_size=(math.isqrt(table.shape[0]) + 1) // 2,
            num_heads=table.shape[1],
            depth=len(indices(names, r"refine\.s1\.b(\d+)\.qkv\.weight")),
            num_scales=len(indices(names, r"refine\.s(\d+)\.b1\.qkv\.weight")),
            irc_blocks=len(indices(names, r"refine\.irc\.b(\d+)\.wgamma")),
            irc_hidden=params[PREFIX + "irc.embed.weight"].shape[0],
            mlp_ratio=params[PREFIX + "s1.b1.ffn.0.weight"].shape[0] // embed,
        )


# ---------------------------------------------------------------------------
# window partitioning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WindowLayout:
    """Bookkeeping needed to undo a partition: batch, padded size, pads and shift."""

    batch: int
    height: int
    width: int
    pad_h: int
    pad_w: int
    window: int
    shift: int


def window_partition(x: torch.Tensor, window: int, shift: int = 0) -> tuple[torch.Tensor, WindowLayout]:
    """Split ``[N, C, H, W]`` into ``[N * nWh * nWw, window**2, C]`` token windows.

    The map is reflect-padded on the bottom/right up to a multiple of
    ``window`` and cyclically shifted by ``(-shift, -shift)`` before splitting.
    """
    n, c, h, w = x.shape
    if shift not in (0, window // 2):
        raise ConfigError(f"shift must be 0 or window//2={window // 2}, got {shift}")
    pad_h = (-h) % window
    pad_w = (-w) % window
    if pad_h >= h or pad_w >= w:
        raise ConfigError(f"window {window} too large for a {h}x{w} feature map")
    if pad_h or pad_w:
        x = F.pad(x, (0, pad_w, 0, pad_h), mode="reflect")
    hp, wp = h + pad_h, w + pad_w
    if shift:
        x = torch.roll(x, shifts=(-shift, -shift), dims=(2, 3))
    x = x.reshape(n, c, hp // window, window, wp // window, window)
    windows = x.permute(0, 2, 4, 3, 5, 1).reshape(-1, window * window, c)
    return windows, WindowLayout(n, h, w, pad_h, pad_w, window, shift)


def window_reverse(windows: torch.Tensor, layout: WindowLayout) -> torch.Tensor:
    n, win = layout.batch, layout.window
    hp, wp = layout.height + layout.pad_h, layout.width + layout.pad_w
    c = windows.shape[-1]
    x = windows.reshape(n, hp // win, wp // win, win, win, c).permute(0, 5, 1, 3, 2, 4)
    x = x.reshape(n, c, hp, wp)
    if layout.shift:
        x = torch.roll(x, shifts=(layout.shift, layout.shift), dims=(2, 3))
    return x[:, :, : layout.height, : layout.width]


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def relative_position_index(window: int, table_window: int | None = None) -> torch.Tensor:
    """``[w*w, w*w]`` indices into a ``(2W-1)**2`` bias table, W = ``table_window`` >= w."""
    tw = table_window or window
    if window > tw:
        raise ConfigError(f"window {window} larger than bias table window {tw}")
    coords = torch.stack(torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij")).flatten(1)
    rel = coords[:, :, None] - coords[:, None, :]
    return (rel[0] + tw - 1) * (2 * tw - 1) + (rel[1] + tw - 1)


class RelPosBias(nn.Module):
    def __init__(self, window: int, num_heads: int):
        super().__init__()
        self.window = window
        self.table = nn.Parameter(torch.zeros((2 * window - 1) ** 2, num_heads))
        self.register_buffer("index", relative_position_index(window), persistent=False)

    def forward(self, window: int) -> torch.Tensor:
        idx = self.index if window == self.window else relative_position_index(window, self.window)
        n = window * window
        return self.table[idx.reshape(-1)].reshape(n, n, -1).permute(2, 0, 1)


def layer_norm_channels(x: torch.Tensor, norm: nn.LayerNorm) -> torch.Tensor:
    return norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class SwinBlock(nn.Module):
    """Pre-norm windowed attention, depthwise 3x3 conv, pointwise feed-forward; each residual."""

    def __init__(self, dim: int, num_heads: int, window: int, shifted: bool, mlp_ratio: int = 2):
        super().__init__()
        self.dim = dim
        self.num_heads = num_heads
        self.window = window
        self.shifted = shifted
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.bias_table = RelPosBias(window, num_heads)
        self.dw = nn.Conv2d(dim, dim, 3, padding=1, groups=dim)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def effective_window(self, h: int, w: int) -> tuple[int, int]:
        win = min(self.window, h, w)
        # as in Swin: no shift once a single window covers the map
        shift = win // 2 if self.shifted and min(h, w) > win else 0
        return win, shift

    def attend(self, tokens: torch.Tensor, window: int, return_attn: bool = False):
        """Multi-head attention within each window of ``[B, window**2, C]`` tokens."""
        b, t, c = tokens.shape
        hd = c // self.num_heads
        qkv = self.qkv(tokens).reshape(b, t, 3, self.num_heads, hd).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * hd**-0.5) @ k.transpose(-2, -1) + self.bias_table(window).unsqueeze(0)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, c)
        out = self.proj(out)
        return (out, attn) if return_attn else out

    def attention_branch(self, x: torch.Tensor, return_attn: bool = False):
        win, shift = self.effective_window(*x.shape[-2:])
        windows, layout = window_partition(layer_norm_channels(x, self.norm1), win, shift)
        res = self.attend(windows, win, return_attn)
        out, attn = res if return_attn else (res, None)
        out = window_reverse(out, layout)
        return (out, attn) if return_attn else out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attention_branch(x)
        x = x + self.dw(x)
        y = self.ffn(self.norm2(x.permute(0, 2, 3, 1))).permute(0, 3, 1, 2)
        return x + y


class Stage(nn.Module):
    def __init__(self, dim, num_heads, window, depth, mlp_ratio):
        super().__init__()
        self.depth = depth
        for j in range(1, depth + 1):
            self.add_module(f"b{j}", SwinBlock(dim, num_heads, window, shifted=(j % 2 == 0), mlp_ratio=mlp_ratio))

    def forward(self, x):
        for j in range(1, self.depth + 1):
            x = getattr(self, f"b{j}")(x)
        return x


# ---------------------------------------------------------------------------
# illumination modulation
# ---------------------------------------------------------------------------


def pointwise_mlp(cin: int, hidden: int, cout: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, hidden, 1), nn.LeakyReLU(0.2), nn.Conv2d(hidden, cout, 1))


class ModulationBlock(nn.Module):
    """features <- (gamma(M') * w_gamma + beta(M')) * features"""

    def __init__(self, channels: int, hidden: int):
        super().__init__()
        self.gamma = pointwise_mlp(1, hidden, channels)
        self.beta = pointwise_mlp(1, hidden, channels)
        self.wgamma = nn.Parameter(torch.ones(channels))

    def forward(self, features: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        scale = self.gamma(mask) * self.wgamma.view(1, -1, 1, 1) + self.beta(mask)
        return scale * features


class IRC(nn.Module):
    def __init__(self, hidden: int, num_blocks: int = 3):
        super().__init__()
        self.num_blocks = num_blocks
        self.embed = nn.Conv2d(3, hidden, 3, padding=1)
        for i in range(1, num_blocks + 1):
            self.add_module(f"b{i}", ModulationBlock(hidden, hidden))
        self.out = nn.Conv2d(hidden, 3, 1)

    def forward(self, coarse: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        f = self.embed(coarse)
        for i in range(1, self.num_blocks + 1):
            f = getattr(self, f"b{i}")(f, mask)
        return self.out(f)


# ---------------------------------------------------------------------------
# full refinement stage
# ---------------------------------------------------------------------------


class RefineFaceNet(nn.Module):
    def __init__(self, config: RefineNetConfig | None = None):
        super().__init__()
        self.config = cfg = config or RefineNetConfig()
        self.embed = nn.Conv2d(3, cfg.embed_dim, 3, padding=1)
        for s in range(1, cfg.num_scales + 1):
            self.add_module(
                f"s{s}", Stage(cfg.embed_dim, cfg.num_heads, cfg.window_size * s, cfg.depth, cfg.mlp_ratio)
            )
        self.head = nn.Conv2d(cfg.embed_dim, 3, 1)
        self.irc = IRC(cfg.irc_hidden, cfg.irc_blocks)

    @property
    def stages(self) -> list[Stage]:
        return [getattr(self, f"s{s}") for s in range(1, self.config.num_scales + 1)]

    def ahswa(self, coarse: torch.Tensor) -> torch.Tensor:
        require_shape(coarse, 3, "coarse")
        x = self.embed(coarse)
        for stage in self.stages:
            x = stage(x)
        return self.head(x)

    def forward(self, coarse: torch.Tensor, refined_mask: torch.Tensor) -> torch.Tensor:
        require_shape(coarse, 3, "coarse")
        require_shape(refined_mask, 1, "refined_mask")
        if coarse.shape[0] != refined_mask.shape[0] or coarse.shape[-2:] != refined_mask.shape[-2:]:
            raise ShapeError(f"coarse {tuple(coarse.shape)} and mask {tuple(refined_mask.shape)} disagree")
        check_finite(coarse, "coarse")
        return coarse + self.ahswa(coarse) * self.irc(coarse, refined_mask)

    def reset_parameters(self, seed: int) -> None:
        def special(name, p, gen):
            local = name[len(PREFIX):]
            if local.endswith("bias_table.table"):
                with torch.no_grad():
                    p.copy_((0.02 * torch.randn(p.shape, generator=gen, dtype=torch.float64)).to(p.dtype))
                return True
            if ".norm" in local:
                with torch.no_grad():
                    p.fill_(1.0 if local.endswith("weight") else 0.0)
                return True
            if local.endswith("wgamma"):
                with torch.no_grad():
                    p.fill_(1.0)
                return True
            # last layer of gamma/beta: gamma starts at 0, beta at 1 -> identity blocks
            if ".gamma.2." in local or ".beta.2." in local:
                with torch.no_grad():
                    p.fill_(1.0 if (".beta.2." in local and local.endswith("bias")) else 0.0)
                return True
            if local in ("head.weight", "irc.out.weight"):
                uniform_fan_in_(p, gen, gain=HEAD_GAIN)
                return True
            return False

        init_parameters(self, seed, PREFIX, special)


def refine_init(config: RefineNetConfig, seed: int) -> NamedTensorMap:
    net = RefineFaceNet(config)
    net.reset_parameters(seed)
    return prefixed({k: v.detach().clone() for k, v in net.named_parameters()}, PREFIX)


def _net(params, config):
    return RefineFaceNet(config or RefineNetConfig.from_params(params))


def refine_forward(params: NamedTensorMap, coarse, refined_mask, config: RefineNetConfig | None = None):
    return call_with(_net(params, config), strip_prefix(params, PREFIX), coarse, refined_mask)


def ahswa_forward(params: NamedTensorMap, coarse, config: RefineNetConfig | None = None):
    return call_with(_net(params, config), strip_prefix(params, PREFIX), coarse, method="ahswa")


def irc_forward(params: NamedTensorMap, coarse, refined_mask, config: RefineNetConfig | None = None):
    net = _net(params, config)
    return call_with(net.irc, strip_prefix(params, PREFIX + "irc."), coarse, refined_mask)
