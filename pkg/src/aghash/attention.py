"""Attention network and attention-image composition.

The network maps an image to a single-channel saliency map (unconstrained
range); normalize_map rescales it to [0, 1] per map, and apply_attention
multiplies it into the image (Hadamard product, broadcast over channels).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from ._init import init_layers


@dataclass(frozen=True)
class AttentionConfig:
    image_shape: tuple[int, int, int] = (32, 32, 3)
    base_channels: int = 8
    depth: int = 3  # stride-2 levels; spatial dims must divide 2**depth

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        h, w, _ = self.image_shape
        down = 2 ** self.depth
        if h % down or w % down:
            raise ValueError(
                f"image height/width must be divisible by {down} for depth {self.depth}"
            )


class AttentionNet(nn.Module):
    """Encoder-decoder saliency network with one mid-resolution skip fusion.

    `depth` stride-2 conv blocks down, the same number of transposed-conv
    blocks up; the first decoder output is fused (summed) with the matching
    encoder feature map, then a 1x1 conv yields the single-channel map. GELU
    keeps the whole net smooth, which the gradient checks rely on.
    """

    def __init__(self, config: AttentionConfig = AttentionConfig()):
        super().__init__()
        self.config = config
        c = config.base_channels
        enc_channels = [c * 2 ** i for i in range(config.depth)]
        prev = config.image_shape[2]
        encoder = []
        for ch in enc_channels:
            encoder.append(nn.Conv2d(prev, ch, 3, stride=2, padding=1))
            prev = ch
        self.encoder = nn.ModuleList(encoder)
        dec_out = enc_channels[-2::-1] + [c]
        decoder = []
        for ch in dec_out:
            decoder.append(nn.ConvTranspose2d(prev, ch, 4, stride=2, padding=1))
            prev = ch
        self.decoder = nn.ModuleList(decoder)
        self.head = nn.Conv2d(c, 1, 1)

    def reset_parameters(self, seed: int) -> None:
        init_layers(self, seed)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, C, H, W) images -> (B, 1, H, W) raw saliency maps."""
        feats = []
        for conv in self.encoder:
            x = F.gelu(conv(x))
            feats.append(x)
        for i, up in enumerate(self.decoder):
            x = F.gelu(up(x))
            if i == 0 and len(feats) >= 2:
                x = x + feats[-2]  # skip fusion at the mid resolution
        return self.head(x)


def _expect_image(image, image_shape) -> torch.Tensor:
    t = torch.as_tensor(image)
    if not t.is_floating_point():
        t = t.double()
    if tuple(t.shape) != tuple(image_shape):
        raise ValueError(f"image shape {tuple(t.shape)} != configured {tuple(image_shape)}")
    return t


def attention_forward(image, net: AttentionNet) -> torch.Tensor:
    """Raw (pre-normalization) H x W saliency map for one H x W x C image."""
    t = _expect_image(image, net.config.image_shape)
    nchw = t.permute(2, 0, 1)[None].to(next(net.parameters()).dtype)
    return net(nchw)[0, 0]


def normalize_map(values) -> torch.Tensor:
    """Min-max rescale each map over its spatial extent to [0, 1].

    Works on (..., H, W): the last two dims are one map, leading dims batch.
    A constant map has no range to stretch, so it becomes all 0.5 (passes a
    neutral half-signal instead of dividing by zero).
    """
    v = torch.as_tensor(values)
    if not v.is_floating_point():
        v = v.double()
    if v.ndim < 2:
        raise ValueError("map must have at least 2 dims (H, W)")
    if not bool(torch.isfinite(v).all()):
        raise ValueError("map contains non-finite values")
    lo = v.amin(dim=(-2, -1), keepdim=True)
    hi = v.amax(dim=(-2, -1), keepdim=True)
    span = hi - lo
    flat = span == 0
    scaled = (v - lo) / torch.where(flat, torch.ones_like(span), span)
    return torch.where(flat, torch.full_like(scaled, 0.5), scaled)


def apply_attention(image, norm_map) -> torch.Tensor:
    """Hadamard product of an H x W x C image with an H x W map.

    The single-channel map broadcasts across channels; with map values in
    [0, 1] this only attenuates, never amplifies.
    """
    img = torch.as_tensor(image)
    if not img.is_floating_point():
        img = img.double()
    m = torch.as_tensor(norm_map).to(img.dtype)
    if img.ndim != 3 or m.ndim != 2 or img.shape[:2] != m.shape:
        raise ValueError(
            f"spatial shapes must match: image {tuple(img.shape)} vs map {tuple(m.shape)}"
        )
    return img * m[..., None]


def attend(images: torch.Tensor, net: AttentionNet) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched attention composition on (B, C, H, W) tensors.

    Returns (attended images, normalized maps (B, 1, H, W)); differentiable
    end to end so attention parameters train through the downstream loss.
    """
    maps = normalize_map(net(images))
    return images * maps, maps


def save_map_png(path, norm_map) -> None:
    """Write a [0,1] map as an 8-bit grayscale PNG (values x255, rounded)."""
    from PIL import Image

    arr = np.asarray(torch.as_tensor(norm_map).detach().cpu().numpy(), dtype=np.float64)
    Image.fromarray(np.round(arr * 255).astype(np.uint8), mode="L").save(path)
