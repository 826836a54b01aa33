"""Multi-scale contrast encoder: a VGG13-style backbone with side saliency heads.

Five convolution blocks, each followed by 2x2 average pooling. The last two
pools keep stride 1 and the convolutions after them are dilated so the
receptive field matches the plain stride-2 network, while the output stays at
1/8 of the input resolution. Each of the first four pooled maps feeds a
three-layer side head whose last layer predicts a single-channel saliency map.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

DESK_CHANNELS = (16, 32, 64, 64, 64)
FULL_CHANNELS = (64, 128, 256, 512, 512)


@dataclass(frozen=True)
class EncoderConfig:
    channels: tuple[int, ...] = DESK_CHANNELS
    convs_per_block: tuple[int, ...] = (2, 2, 2, 2, 2)
    pool_strides: tuple[int, ...] = (2, 2, 2, 1, 1)
    dilations: tuple[int, ...] = (1, 1, 1, 1, 2)
    leaky_relu_slope: float = 0.1
    side_head_blocks: tuple[int, ...] = (1, 2, 3, 4)
    side_channels: int = 16
    in_channels: int = 3
    kernel_size: int = 3

    def __post_init__(self):
        for name in ("channels", "convs_per_block", "pool_strides", "dilations"):
            if len(getattr(self, name)) != 5:
                raise ValueError(f"encoder needs exactly 5 blocks ({name})")
        if tuple(self.pool_strides[3:]) != (1, 1):
            raise ValueError("the final two pool strides must be 1")
        if any(s not in (1, 2) for s in self.pool_strides):
            raise ValueError("pool strides must be 1 or 2")
        if not set(self.side_head_blocks) <= {1, 2, 3, 4}:
            raise ValueError("side heads attach to the first four pools only")

    @property
    def downsample(self) -> int:
        return int(np.prod(self.pool_strides))

    @property
    def out_channels(self) -> int:
        return self.channels[-1] + len(self.side_head_blocks)


def effective_receptive_field(config: EncoderConfig) -> list[int]:
    """Receptive field (input pixels) of each block's last convolution.

    Uses the standard recursion ``rf += (k_eff - 1) * jump`` with
    ``k_eff = d (k - 1) + 1`` for convolutions and ``k = 2`` for pools.
    """
    rf, jump, out = 1, 1, []
    k = config.kernel_size
    for n_conv, d, s in zip(config.convs_per_block, config.dilations, config.pool_strides):
        for _ in range(n_conv):
            rf += d * (k - 1) * jump
        out.append(rf)
        rf += (2 - 1) * jump
        jump *= s
    return out


def _conv_block(cin: int, cout: int, n: int, dilation: int, slope: float, k: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i in range(n):
        layers.append(nn.Conv2d(cin if i == 0 else cout, cout, k, padding=dilation * (k // 2), dilation=dilation))
        layers.append(nn.LeakyReLU(slope))
    return nn.Sequential(*layers)


def he_uniform_(module: nn.Module, slope: float) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.kaiming_uniform_(m.weight, a=slope, nonlinearity="leaky_relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def avg_pool(x: torch.Tensor, stride: int) -> torch.Tensor:
    if stride == 1:
        # 2x2 window, right/bottom edge replicated so the size is kept
        return F.avg_pool2d(F.pad(x, (0, 1, 0, 1), mode="replicate"), 2, stride=1)
    return F.avg_pool2d(x, 2, stride=stride)


@dataclass
class FeatureBundle:
    backbone: torch.Tensor
    side_saliency: list[torch.Tensor]
    stacked: torch.Tensor
    # pre-pool output of every block, used for skip connections
    intermediates: list[torch.Tensor] = field(default_factory=list)


class Encoder(nn.Module):
    def __init__(self, config: EncoderConfig | None = None):
        super().__init__()
        self.config = cfg = config or EncoderConfig()
        cins = (cfg.in_channels,) + tuple(cfg.channels[:-1])
        self.blocks = nn.ModuleList([
            _conv_block(ci, co, n, d, cfg.leaky_relu_slope, cfg.kernel_size)
            for ci, co, n, d in zip(cins, cfg.channels, cfg.convs_per_block, cfg.dilations)])
        self.side_heads = nn.ModuleDict()
        for b in cfg.side_head_blocks:
            c = cfg.channels[b - 1]
            self.side_heads[str(b)] = nn.Sequential(
                nn.Conv2d(c, cfg.side_channels, 3, padding=1), nn.LeakyReLU(cfg.leaky_relu_slope),
                nn.Conv2d(cfg.side_channels, cfg.side_channels, 3, padding=1), nn.LeakyReLU(cfg.leaky_relu_slope),
                nn.Conv2d(cfg.side_channels, 1, 3, padding=1))
        he_uniform_(self, cfg.leaky_relu_slope)

    def check_input(self, x: torch.Tensor) -> None:
        H, W = x.shape[-2:]
        f = self.config.downsample
        if H % f or W % f:
            raise ValueError(f"input size {H}x{W} is not divisible by {f}")

    def forward(self, x: torch.Tensor) -> FeatureBundle:
        self.check_input(x)
        cfg = self.config
        intermediates, pooled = [], []
        for block, stride in zip(self.blocks, cfg.pool_strides):
            x = block(x)
            intermediates.append(x)
            x = avg_pool(x, stride)
            pooled.append(x)
        size = x.shape[-2:]
        side = [self.side_heads[str(b)](pooled[b - 1]) for b in cfg.side_head_blocks]
        resampled = [
            s if s.shape[-2:] == size else F.interpolate(
                s, size=size, mode="bilinear", align_corners=False, antialias=True)
            for s in side]
        stacked = torch.cat([x] + resampled, dim=1)
        return FeatureBundle(backbone=x, side_saliency=side, stacked=stacked, intermediates=intermediates)


def encode(image, encoder: Encoder) -> FeatureBundle:
    """Run the encoder on a CSAS image (or a tensor batch)."""
    x = _as_batch(image, encoder)
    return encoder(x)


def _as_batch(image, module: nn.Module) -> torch.Tensor:
    dtype = next(module.parameters()).dtype
    if isinstance(image, torch.Tensor):
        x = image
    else:
        arr = image.to_network() if hasattr(image, "to_network") else np.asarray(image)
        x = torch.from_numpy(np.ascontiguousarray(arr))
    if x.ndim == 3:
        x = x[None]
    return x.to(dtype)


@torch.no_grad()
def export_activations(image, encoder: Encoder, block: int, out_dir: str | Path | None = None) -> list[np.ndarray]:
    """Per-channel activation maps of one block, at its pre-pool resolution.

    If ``out_dir`` is given each map is also written as an 8-bit PNG,
    min-max normalized per channel.
    """
    if not 1 <= block <= 5:
        raise ValueError("block must be in 1..5")
    was_training = encoder.training
    encoder.eval()
    try:
        feats = encoder(_as_batch(image, encoder)).intermediates[block - 1][0]
    finally:
        encoder.train(was_training)
    maps = [m.cpu().numpy().astype(np.float64) for m in feats]
    if out_dir is not None:
        from PIL import Image

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for i, m in enumerate(maps):
            lo, hi = float(m.min()), float(m.max())
            scaled = np.zeros_like(m) if hi <= lo else (m - lo) / (hi - lo)
            Image.fromarray((scaled * 255).round().astype(np.uint8)).save(out / f"block{block}_ch{i:03d}.png")
    return maps
