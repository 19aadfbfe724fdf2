"""Helpers shared by the three networks: activation, initialization, named parameter maps."""
from __future__ import annotations

import math
import re
from typing import Callable, Dict, Iterable

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

from ..errors import NumericError, ShapeError, StateError

NamedTensorMap = Dict[str, torch.Tensor]

LEAK = 0.2


def leaky(x: torch.Tensor) -> torch.Tensor:
    return F.leaky_relu(x, LEAK)


def fan_in(weight: torch.Tensor) -> int:
    return int(math.prod(weight.shape[1:])) if weight.ndim > 1 else int(weight.shape[0])


def uniform_fan_in_(weight: torch.Tensor, gen: torch.Generator, gain: float = 1.0) -> torch.Tensor:
    """In-place U(-b, b) with b = gain * sqrt(6 / fan_in)."""
    bound = gain * math.sqrt(6.0 / fan_in(weight))
    with torch.no_grad():
        u = torch.rand(weight.shape, generator=gen, dtype=torch.float64)
        weight.copy_(((2.0 * u - 1.0) * bound).to(weight.dtype))
    return weight


def init_parameters(
    module: nn.Module,
    seed: int,
    prefix: str = "",
    special: Callable[[str, torch.Tensor, torch.Generator], bool] | None = None,
) -> None:
    """Seeded initialization walking parameters in registration order.

    Weights get fan-in scaled uniform noise and biases zeros; ``special`` may
    claim a parameter (returning True) to apply its own rule.
    """
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in module.named_parameters():
            full = prefix + name
            if special is not None and special(full, p, gen):
                continue
            if full.endswith("bias"):
                p.zero_()
            else:
                uniform_fan_in_(p, gen)


def check_finite(t: torch.Tensor, name: str) -> None:
    if not torch.isfinite(t).all():
        raise NumericError(f"{name} contains non-finite values")


def require_shape(t: torch.Tensor, channels: int, name: str) -> None:
    if t.ndim != 4 or t.shape[1] != channels:
        raise ShapeError(f"{name} must be [N, {channels}, H, W], got {tuple(t.shape)}")


def prefixed(state: NamedTensorMap, prefix: str) -> NamedTensorMap:
    return {prefix + k: v for k, v in state.items()}


def strip_prefix(params: NamedTensorMap, prefix: str) -> NamedTensorMap:
    out = {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}
    if not out:
        raise StateError(f"no parameters with prefix {prefix!r}")
    return out


def indices(params: Iterable[str], pattern: str) -> list[int]:
    """Sorted distinct integers captured by ``pattern`` (one group) over parameter names."""
    rx = re.compile(pattern)
    found = {int(m.group(1)) for k in params if (m := rx.fullmatch(k))}
    return sorted(found)


class _Bound(nn.Module):
    def __init__(self, module: nn.Module, method: str):
        super().__init__()
        self.m = module
        self.method = method

    def forward(self, *args, **kwargs):
        return getattr(self.m, self.method)(*args, **kwargs)


def call_with(module: nn.Module, params: NamedTensorMap, *args, method: str | None = None, **kwargs):
    """Run ``module`` (or one of its methods) with an external parameter map.

    Missing or extra parameter names are an error.
    """
    expected = {k for k, _ in module.named_parameters()}
    got = set(params)
    if expected != got:
        missing = sorted(expected - got)
        extra = sorted(got - expected)
        raise StateError(f"parameter map mismatch; missing={missing[:5]} extra={extra[:5]}")
    if method is not None:
        module = _Bound(module, method)
        params = prefixed(params, "m.")
    return functional_call(module, params, args, kwargs, strict=False)
