"""Single-pass mean-field refinement of a saliency map.

Each pixel gathers a message from its window, weighted by a bilateral kernel
over guide features and position; the centre pixel is excluded from its own
message. The update is one Jacobi (mean-field) step of a Gaussian random field
whose pairwise term penalizes squared disagreement between kernel-linked
pixels with a learned weight ``mu``:

    q(x) = (p(x) + mu * m(x)) / (1 + mu)

so ``mu = 0`` is the identity, outputs stay in [0, 1], and a map that is
constant wherever the guide is constant is left unchanged.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class ParsingConfig:
    window: int = 9
    feature_bandwidth: float = 0.1
    spatial_bandwidth: float = 2.0
    init_compatibility: float = 1.0

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("parsing window must be an odd integer >= 3")
        if self.feature_bandwidth <= 0 or self.spatial_bandwidth <= 0:
            raise ValueError("bandwidths must be positive")
        if self.init_compatibility < 0:
            raise ValueError("compatibility weight must be >= 0")


def _patches(x: torch.Tensor, window: int, pad_value: float = 0.0) -> torch.Tensor:
    N, C, H, W = x.shape
    pad = window // 2
    padded = F.pad(x, (pad,) * 4, value=pad_value)
    return F.unfold(padded, window).view(N, C, window * window, H, W)


def bilateral_kernel(guide: torch.Tensor, cfg: ParsingConfig) -> torch.Tensor:
    """Unnormalized kernel weights, shape (N, window^2, H, W).

    Out-of-image neighbours and the centre tap get weight zero.
    """
    w = cfg.window
    N, _, H, W = guide.shape
    g = _patches(guide, w)
    feat = (g - guide[:, :, None]).pow(2).sum(1)
    r = torch.arange(w, dtype=guide.dtype, device=guide.device) - w // 2
    spatial = (r[:, None] ** 2 + r[None, :] ** 2).reshape(1, w * w, 1, 1)
    k = torch.exp(-feat / (2 * cfg.feature_bandwidth ** 2) - spatial / (2 * cfg.spatial_bandwidth ** 2))
    valid = _patches(torch.ones(N, 1, H, W, dtype=guide.dtype, device=guide.device), w)[:, 0]
    valid[:, (w * w) // 2] = 0.0
    return k * valid


def mean_field_message(p: torch.Tensor, guide: torch.Tensor, cfg: ParsingConfig) -> torch.Tensor:
    """Kernel-weighted mean of the neighbours' probabilities.

    Accumulates one window offset at a time, which gives the same result as
    contracting :func:`bilateral_kernel` with the patches but never holds the
    full window^2 stack in memory.
    """
    w = cfg.window
    r = w // 2
    H, W = p.shape[-2:]
    gp = F.pad(guide, (r,) * 4)
    pp = F.pad(p, (r,) * 4)
    ones = F.pad(torch.ones_like(p), (r,) * 4)
    num = torch.zeros_like(p)
    den = torch.zeros_like(p)
    inv_f = 1.0 / (2 * cfg.feature_bandwidth ** 2)
    inv_s = 1.0 / (2 * cfg.spatial_bandwidth ** 2)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy == 0 and dx == 0:
                continue
            sl = (..., slice(r + dy, r + dy + H), slice(r + dx, r + dx + W))
            d2 = (gp[sl] - guide).pow(2).sum(1, keepdim=True)
            k = torch.exp(-d2 * inv_f - (dy * dy + dx * dx) * inv_s) * ones[sl]
            num = num + k * pp[sl]
            den = den + k
    return num / den.clamp_min(1e-300)


def quadratic_update(p: torch.Tensor, message: torch.Tensor, mu: torch.Tensor) -> torch.Tensor:
    """Pull each pixel toward its message with weight ``mu / (1 + mu)``."""
    return (p + mu * message) / (1.0 + mu)


class DeepParsing(nn.Module):
    def __init__(self, config: ParsingConfig | None = None):
        super().__init__()
        self.config = config or ParsingConfig()
        self.mu = nn.Parameter(torch.tensor(float(self.config.init_compatibility)))

    @property
    def compatibility(self) -> torch.Tensor:
        return self.mu.clamp_min(0.0)

    def forward(self, p: torch.Tensor, guide: torch.Tensor) -> torch.Tensor:
        if p.shape[-2:] != guide.shape[-2:]:
            raise ValueError("map and guide differ in size")
        m = mean_field_message(p, guide, self.config)
        return quadratic_update(p, m, self.compatibility.to(p.dtype))


def refine(saliency, guide, cfg: ParsingConfig | None = None, mu: float | None = None,
           module: DeepParsing | None = None):
    """Refine a single H x W saliency map with an H x W x C (or C x H x W) guide.

    Accepts numpy arrays or tensors; numpy in gives numpy out.
    """
    is_np = not isinstance(saliency, torch.Tensor)
    p = torch.as_tensor(np.ascontiguousarray(saliency) if is_np else saliency, dtype=torch.float64)
    if hasattr(guide, "to_rgb"):
        guide = guide.to_rgb()
    g = guide if isinstance(guide, torch.Tensor) else torch.as_tensor(np.ascontiguousarray(guide))
    g = g.to(torch.float64)
    if g.ndim == 2:
        g = g[None]
    elif g.shape[-1] in (1, 3) and g.shape[0] not in (1, 3):
        g = g.permute(2, 0, 1)
    if module is None:
        module = DeepParsing(cfg or ParsingConfig()).to(torch.float64)
        if mu is not None:
            with torch.no_grad():
                module.mu.fill_(mu)
    with torch.no_grad():
        out = module(p[None, None], g[None].to(p.dtype))[0, 0]
    return out.numpy() if is_np else out
