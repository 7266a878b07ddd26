"""Shared U-Net backbone.

Four encoder levels (resolutions H, H/2, H/4, H/8), two middle blocks and a
mirrored decoder with skip connections. The same network serves as the prior
network, the diffusion denoiser and the regression baseline.

Feature taps export, per encoder level, the activation right before
downsampling (``b_d``) and the output of each middle block (``b_m``). Bias
ports add a pyramid of the same shapes back in at exactly those points.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import UNetConfig
from .errors import ConfigurationError, ShapeError

logger = logging.getLogger(__name__)

Shape = Tuple[int, int, int]


@dataclass
class FeaturePyramid:
    """Batched feature maps: ``b_d`` has 4 entries, ``b_m`` has 2."""

    b_d: List[torch.Tensor]
    b_m: List[torch.Tensor]

    def tensors(self) -> List[torch.Tensor]:
        return list(self.b_d) + list(self.b_m)

    def shapes(self) -> Tuple[List[Shape], List[Shape]]:
        return [tuple(t.shape[1:]) for t in self.b_d], [tuple(t.shape[1:]) for t in self.b_m]

    def map(self, fn) -> "FeaturePyramid":
        return FeaturePyramid([fn(t) for t in self.b_d], [fn(t) for t in self.b_m])

    def detach(self) -> "FeaturePyramid":
        return self.map(lambda t: t.detach())

    def to(self, device) -> "FeaturePyramid":
        return self.map(lambda t: t.to(device))

    def zeros_like(self) -> "FeaturePyramid":
        return self.map(torch.zeros_like)

    def masked(self, keep: torch.Tensor) -> "FeaturePyramid":
        """Zero every item whose ``keep`` flag is False."""
        return self.map(lambda t: t * keep.to(t.dtype).view(-1, 1, 1, 1))

    def is_finite(self) -> bool:
        return all(bool(torch.isfinite(t).all()) for t in self.tensors())


def tap_shapes(config: UNetConfig) -> Tuple[List[Shape], List[Shape]]:
    """Per-item (C, h, w) of every ``b_d`` and ``b_m`` entry."""
    size = config.image_size
    b_d = []
    for level, mult in enumerate(config.channel_multipliers):
        res = size // (2 ** level)
        b_d.append((config.base_channels * mult, res, res))
    last = b_d[-1]
    return b_d, [last, last]


def null_pyramid(config: UNetConfig, batch: int, device=None, dtype=None) -> FeaturePyramid:
    b_d, b_m = tap_shapes(config)
    dtype = dtype or torch.get_default_dtype()
    return FeaturePyramid(
        [torch.zeros(batch, *s, device=device, dtype=dtype) for s in b_d],
        [torch.zeros(batch, *s, device=device, dtype=dtype) for s in b_m],
    )


def timestep_embedding(t, dim: int) -> torch.Tensor:
    """Sinusoidal embedding laid out as interleaved [sin, cos, sin, cos, ...]."""
    scalar = not isinstance(t, torch.Tensor) or t.dim() == 0
    t = torch.as_tensor(t).reshape(-1).to(torch.float64)
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64, device=t.device) / max(half, 1))
    args = t[:, None] * freqs[None, :]
    emb = torch.stack([torch.sin(args), torch.cos(args)], dim=-1).reshape(t.shape[0], 2 * half)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    emb = emb.to(torch.get_default_dtype())
    return emb[0] if scalar else emb


def _groups(channels: int) -> int:
    for g in (8, 4, 2):
        if channels % g == 0 and channels // g >= 2:
            return g
    return 1


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: Optional[int], dropout: float = 0.0):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, out_ch) if temb_dim else None
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.dropout = nn.Dropout(dropout)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: Optional[torch.Tensor] = None) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        if self.temb_proj is not None and temb is not None:
            h = h + self.temb_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(self.dropout(F.silu(self.norm2(h))))
        return h + self.skip(x)


class AttentionBlock(nn.Module):
    """Single-head spatial self-attention with a residual connection."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.qkv = nn.Conv2d(channels, channels * 3, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(dim=1)
        attn = torch.softmax(torch.einsum("bci,bcj->bij", q, k) / math.sqrt(c), dim=-1)
        out = torch.einsum("bij,bcj->bci", attn, v).reshape(b, c, h, w)
        return x + self.proj(out)


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class Level(nn.Module):
    def __init__(self, blocks: List[ResBlock], attention: bool, channels: int, resample: Optional[nn.Module]):
        super().__init__()
        self.blocks = nn.ModuleList(blocks)
        self.attns = nn.ModuleList([AttentionBlock(channels) if attention else nn.Identity() for _ in blocks])
        self.resample = resample


class FeatureUNet(nn.Module):
    def __init__(self, config: UNetConfig):
        super().__init__()
        if config.image_size % 8 != 0 or config.image_size < 8:
            raise ConfigurationError(f"image_size must be divisible by 8, got {config.image_size}")
        self.config = config
        base = config.base_channels
        mults = config.channel_multipliers
        n_blocks = config.n_res_blocks_per_level

        self.temb_dim = (config.time_embedding_dim or 4 * base) if config.time_embedding else None
        if self.temb_dim:
            self.time_mlp = nn.Sequential(nn.Linear(base, self.temb_dim), nn.SiLU(), nn.Linear(self.temb_dim, self.temb_dim))
        else:
            self.time_mlp = None

        self.conv_in = nn.Conv2d(config.in_channels, base, 3, padding=1)
        skip_channels = [base]
        now = base
        self.encoder = nn.ModuleList()
        for i, mult in enumerate(mults):
            out = base * mult
            blocks = []
            for _ in range(n_blocks):
                blocks.append(ResBlock(now, out, self.temb_dim, config.dropout))
                now = out
                skip_channels.append(now)
            down = Downsample(now) if i < len(mults) - 1 else None
            if down is not None:
                skip_channels.append(now)
            self.encoder.append(Level(blocks, i in config.attention_levels, now, down))

        self.mid_block1 = ResBlock(now, now, self.temb_dim, config.dropout)
        self.mid_attn = AttentionBlock(now)
        self.mid_block2 = ResBlock(now, now, self.temb_dim, config.dropout)

        self.decoder = nn.ModuleList()
        for i in reversed(range(len(mults))):
            out = base * mults[i]
            blocks = []
            for _ in range(n_blocks + 1):
                blocks.append(ResBlock(skip_channels.pop() + now, out, self.temb_dim, config.dropout))
                now = out
            up = Upsample(now) if i > 0 else None
            self.decoder.append(Level(blocks, i in config.attention_levels, now, up))

        self.norm_out = nn.GroupNorm(_groups(now), now)
        self.conv_out = nn.Conv2d(now, config.out_channels, 3, padding=1)
        if config.zero_init_output:
            nn.init.zeros_(self.conv_out.weight)
            nn.init.zeros_(self.conv_out.bias)

        self.adapters = None
        if config.bias_adapter:
            b_d, b_m = tap_shapes(config)
            self.adapters = nn.ModuleList([nn.Conv2d(s[0], s[0], 1) for s in b_d + b_m])
            for conv in self.adapters:
                nn.init.dirac_(conv.weight)
                nn.init.zeros_(conv.bias)

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    @property
    def tap_shapes(self) -> Tuple[List[Shape], List[Shape]]:
        return tap_shapes(self.config)

    def _check_input(self, x: torch.Tensor) -> None:
        expected = (self.config.in_channels, self.config.image_size, self.config.image_size)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeError(f"expected input (B, {expected[0]}, {expected[1]}, {expected[2]}), got {tuple(x.shape)}")

    def _check_pyramid(self, pyramid: FeaturePyramid, batch: int) -> None:
        b_d, b_m = pyramid.shapes()
        want_d, want_m = self.tap_shapes
        if b_d != want_d or b_m != want_m:
            raise ShapeError(f"pyramid shapes {b_d} / {b_m} do not match taps {want_d} / {want_m}")
        if any(t.shape[0] != batch for t in pyramid.tensors()):
            raise ShapeError("pyramid batch size does not match input batch size")

    def _bias(self, port: int, feature: torch.Tensor) -> torch.Tensor:
        return self.adapters[port](feature) if self.adapters is not None else feature

    def forward(
        self,
        x: torch.Tensor,
        t: Optional[torch.Tensor] = None,
        pyramid: Optional[FeaturePyramid] = None,
        return_taps: bool = False,
    ):
        self._check_input(x)
        if pyramid is not None:
            self._check_pyramid(pyramid, x.shape[0])

        temb = None
        if self.time_mlp is not None:
            if t is None:
                raise ConfigurationError("this network is time-conditioned; a timestep is required")
            t = torch.as_tensor(t, device=x.device).reshape(-1).expand(x.shape[0])
            temb = self.time_mlp(timestep_embedding(t, self.config.base_channels).to(x.device, x.dtype))

        taps_d: List[torch.Tensor] = []
        taps_m: List[torch.Tensor] = []
        h = self.conv_in(x)
        skips = [h]
        for i, level in enumerate(self.encoder):
            last = len(level.blocks) - 1
            for j, (block, attn) in enumerate(zip(level.blocks, level.attns)):
                h = attn(block(h, temb))
                if j == last:
                    taps_d.append(h)
                    if pyramid is not None:
                        h = h + self._bias(i, pyramid.b_d[i])
                skips.append(h)
            if level.resample is not None:
                h = level.resample(h)
                skips.append(h)

        h = self.mid_attn(self.mid_block1(h, temb))
        taps_m.append(h)
        if pyramid is not None:
            h = h + self._bias(4, pyramid.b_m[0])
        h = self.mid_block2(h, temb)
        taps_m.append(h)
        if pyramid is not None:
            h = h + self._bias(5, pyramid.b_m[1])

        for level in self.decoder:
            for block, attn in zip(level.blocks, level.attns):
                h = attn(block(torch.cat([h, skips.pop()], dim=1), temb))
            if level.resample is not None:
                h = level.resample(h)

        out = self.conv_out(F.silu(self.norm_out(h)))
        if return_taps:
            return out, FeaturePyramid(taps_d, taps_m)
        return out


def build_unet(config: UNetConfig) -> FeatureUNet:
    net = FeatureUNet(config)
    logger.info("Built U-Net: %d parameters, taps %s", net.parameter_count, tap_shapes(config)[0])
    return net


def forward_with_taps(net: FeatureUNet, x: torch.Tensor, t: Optional[torch.Tensor] = None):
    """Ordinary forward pass that also returns the feature pyramid."""
    return net(x, t, return_taps=True)


def forward_with_biases(
    net: FeatureUNet, x: torch.Tensor, t: Optional[torch.Tensor], pyramid: Optional[FeaturePyramid]
) -> torch.Tensor:
    """Forward pass with ``pyramid`` added at the tap points; None means all zeros."""
    if pyramid is None:
        pyramid = null_pyramid(net.config, x.shape[0], device=x.device, dtype=x.dtype)
    return net(x, t, pyramid=pyramid)
