"""Seeded parameter initialization shared by the network modules."""

from __future__ import annotations

import math

import torch
from torch import nn


def _fan_in(module: nn.Module) -> int:
    w = module.weight
    if isinstance(module, nn.ConvTranspose2d):
        # weight layout is (in_channels, out_channels, kH, kW)
        return w.shape[0] * w.shape[2] * w.shape[3]
    return w[0].numel()


def fan_in_normal_(module: nn.Module, generator: torch.Generator) -> None:
    """Fan-in-scaled normal weights, std sqrt(2/fan_in); zero bias.

    The sqrt(2) gain keeps activation variance roughly constant through the
    half-rectifying nonlinearities; without it the forward signal decays per
    layer and the cosine-based loss sees degenerate near-zero code norms.
    """
    std = math.sqrt(2.0 / _fan_in(module))
    with torch.no_grad():
        module.weight.normal_(0.0, std, generator=generator)
        if module.bias is not None:
            module.bias.zero_()


def small_normal_(module: nn.Module, generator: torch.Generator, std: float = 0.01) -> None:
    """Zero-mean normal weights with a fixed small std; zero bias."""
    with torch.no_grad():
        module.weight.normal_(0.0, std, generator=generator)
        if module.bias is not None:
            module.bias.zero_()


def init_layers(net: nn.Module, seed: int, small_std_names: tuple[str, ...] = ()) -> None:
    """Initialize every conv/linear layer of `net` deterministically.

    Layers whose qualified name is in `small_std_names` get the small-std
    init (used for code-output layers trained from scratch); everything else
    gets fan-in-scaled normals.
    """
    generator = torch.Generator().manual_seed(seed)
    for name, module in net.named_modules():
        if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            if name in small_std_names:
                small_normal_(module, generator)
            else:
                fan_in_normal_(module, generator)
