"""Dual SDN13 decoder branches and the content-gated branch merge.

Both branches are six blocks / thirteen transposed a-trous convolutions with
nearest-replication ("average") unpooling between resolutions. The
unsupervised branch additionally concatenates encoder features at every
stage and carries extra layers before its classifier.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import EncoderConfig, he_uniform_

EPS = 1e-7


@dataclass(frozen=True)
class DecoderConfig:
    widths: tuple[int, ...] = (64, 64, 32, 16, 16, 16)
    layers: tuple[int, ...] = (2, 2, 2, 2, 2, 3)
    dilations: tuple[int, ...] = (4, 2, 1, 1, 1, 1)
    # 1-indexed blocks followed by a x2 unpool
    unpool_after: tuple[int, ...] = (2, 3, 4)
    # decoder block (1-indexed) -> encoder block whose pre-pool output is concatenated
    skip_sources: tuple[tuple[int, int], ...] = ((2, 4), (3, 3), (4, 2), (5, 1))
    batch_norm: bool = True
    bn_momentum: float = 0.1
    extra_layers_unsup: int = 2
    leaky_relu_slope: float = 0.1

    def __post_init__(self):
        if len(self.widths) != 6 or len(self.layers) != 6 or len(self.dilations) != 6:
            raise ValueError("SDN13 has six blocks")
        if sum(self.layers) != 13:
            raise ValueError(f"SDN13 has thirteen layers, got {sum(self.layers)}")
        if self.extra_layers_unsup < 0:
            raise ValueError("extra_layers_unsup must be >= 0")

    @property
    def upsample(self) -> int:
        return 2 ** len(self.unpool_after)


def unpool(x: torch.Tensor, factor: int = 2) -> torch.Tensor:
    """Average unpooling: every cell replicated over its factor x factor window."""
    return x.repeat_interleave(factor, dim=-2).repeat_interleave(factor, dim=-1)


class _TConvBNAct(nn.Sequential):
    def __init__(self, cin, cout, dilation, cfg: DecoderConfig):
        mods: list[nn.Module] = [nn.ConvTranspose2d(cin, cout, 3, padding=dilation, dilation=dilation)]
        if cfg.batch_norm:
            mods.append(nn.BatchNorm2d(cout, momentum=cfg.bn_momentum))
        mods.append(nn.LeakyReLU(cfg.leaky_relu_slope))
        super().__init__(*mods)


@dataclass
class BranchOutput:
    logits: torch.Tensor
    probabilities: torch.Tensor

    @property
    def foreground(self) -> torch.Tensor:
        return self.probabilities[:, 1:2]


class SDN13(nn.Module):
    """One decoder branch.

    With ``skip_channels`` empty this is the supervised branch. Otherwise
    ``skip_channels`` maps decoder block index to the channel count of the
    encoder map concatenated at that block's input.
    """

    def __init__(self, in_channels: int, config: DecoderConfig | None = None,
                 skip_channels: dict[int, int] | None = None, extra_layers: int = 0):
        super().__init__()
        self.config = cfg = config or DecoderConfig()
        self.skip_channels = dict(skip_channels or {})
        self.blocks = nn.ModuleList()
        cin = in_channels
        for b in range(6):
            cin += self.skip_channels.get(b + 1, 0)
            n = cfg.layers[b]
            last = b == 5
            mods: list[nn.Module] = []
            body = n - 1 if last else n
            for i in range(body):
                mods.append(_TConvBNAct(cin, cfg.widths[b], cfg.dilations[b], cfg))
                cin = cfg.widths[b]
            if last:
                for _ in range(extra_layers):
                    mods.append(_TConvBNAct(cin, cfg.widths[b], 1, cfg))
                # classifier: plain transposed convolution producing two logits
                mods.append(nn.ConvTranspose2d(cin, 2, 3, padding=1))
            self.blocks.append(nn.Sequential(*mods))
        he_uniform_(self, cfg.leaky_relu_slope)

    def forward(self, x: torch.Tensor, skips: dict[int, torch.Tensor] | None = None) -> BranchOutput:
        skips = skips or {}
        for b, block in enumerate(self.blocks, start=1):
            if b in self.skip_channels:
                if b not in skips:
                    raise ValueError(f"missing skip input for decoder block {b}")
                s = skips[b]
                if s.shape[-2:] != x.shape[-2:]:
                    s = F.interpolate(s, size=x.shape[-2:], mode="bilinear", align_corners=False)
                x = torch.cat([x, s], dim=1)
            x = block(x)
            if b in self.config.unpool_after:
                x = unpool(x)
        return BranchOutput(logits=x, probabilities=torch.softmax(x, dim=1))


def skip_channel_map(enc: EncoderConfig, dec: DecoderConfig) -> dict[int, int]:
    return {d: enc.channels[e - 1] for d, e in dec.skip_sources}


def decode_supervised(features, branch: SDN13) -> BranchOutput:
    if features.stacked.shape[1] != branch.blocks[0][0][0].in_channels:
        raise ValueError("feature channels do not match the decoder configuration")
    return branch(features.stacked)


def decode_unsupervised(features, intermediates, branch: SDN13, sources: dict[int, int]) -> BranchOutput:
    """``sources`` maps decoder block -> encoder block (1-indexed)."""
    skips = {}
    for d, e in sources.items():
        if e - 1 >= len(intermediates) or intermediates[e - 1] is None:
            raise ValueError(f"missing encoder block {e} for skip connection")
        skips[d] = intermediates[e - 1]
    return branch(features.stacked, skips)


def local_mean(x: torch.Tensor, window: int) -> torch.Tensor:
    """Box mean over a window; borders average only the in-image pixels."""
    pad = window // 2
    ones = torch.ones_like(x[:, :1])
    num = F.avg_pool2d(F.pad(x, (pad,) * 4), window, stride=1, divisor_override=1)
    den = F.avg_pool2d(F.pad(ones, (pad,) * 4), window, stride=1, divisor_override=1)
    return num / den


def local_similarity(guide: torch.Tensor, window: int, bandwidth: float = 0.1) -> torch.Tensor:
    """Mean Gaussian feature affinity between each pixel and its window."""
    N, C, H, W = guide.shape
    pad = window // 2
    patches = F.unfold(F.pad(guide, (pad,) * 4, mode="replicate"), window).view(N, C, window * window, H, W)
    d2 = (patches - guide[:, :, None]).pow(2).sum(1)
    return torch.exp(-d2 / (2 * bandwidth ** 2)).mean(1, keepdim=True)


def merge_statistics(sup: torch.Tensor, unsup: torch.Tensor, guide: torch.Tensor, window: int = 5) -> torch.Tensor:
    """Local window statistics that drive the merge gate, one channel each.

    Both foreground maps, their local means and local disagreement, the local
    variance of the guide features and the mean guide affinity in the window.
    """
    mean_s = local_mean(sup, window)
    mean_u = local_mean(unsup, window)
    disagreement = local_mean((sup - unsup).abs(), window)
    g_mean = local_mean(guide, window)
    g_var = (local_mean(guide * guide, window) - g_mean * g_mean).clamp_min(0).sum(1, keepdim=True)
    return torch.cat([sup, unsup, mean_s, mean_u, disagreement, g_var, local_similarity(guide, window)], dim=1)


def convex_merge(sup: torch.Tensor, unsup: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    return w * sup + (1.0 - w) * unsup


class StructuredMerge(nn.Module):
    """Content-gated convex combination of two foreground maps.

    The gate is a learned logistic function of local window statistics; the
    combined map then passes through one final 3x3 convolution in logit space,
    initialized to the identity.
    """

    n_stats = 7

    def __init__(self, window: int = 5):
        super().__init__()
        self.window = window
        self.gate = nn.Conv2d(self.n_stats, 1, 1)
        self.final = nn.Conv2d(1, 1, 3, padding=1, padding_mode="replicate")
        nn.init.zeros_(self.gate.weight)
        nn.init.zeros_(self.gate.bias)
        with torch.no_grad():
            self.final.weight.zero_()
            self.final.weight[0, 0, 1, 1] = 1.0
            self.final.bias.zero_()

    def weights(self, sup, unsup, guide) -> torch.Tensor:
        return torch.sigmoid(self.gate(merge_statistics(sup, unsup, guide, self.window)))

    def forward(self, sup, unsup, guide, w: torch.Tensor | None = None):
        """Returns (saliency after the final conv, convex combination, gate)."""
        if w is None:
            w = self.weights(sup, unsup, guide)
        combined = convex_merge(sup, unsup, w)
        p = combined.clamp(EPS, 1 - EPS)
        out = torch.sigmoid(self.final(torch.log(p) - torch.log1p(-p)))
        return out, combined, w


def merge_branches(sup: BranchOutput, unsup: BranchOutput, image_features: torch.Tensor,
                   merge: StructuredMerge, w: torch.Tensor | None = None) -> torch.Tensor:
    if sup.probabilities.shape[-2:] != unsup.probabilities.shape[-2:]:
        raise ValueError("branch outputs differ in size")
    out, _, _ = merge(sup.foreground, unsup.foreground, image_features, w)
    return out
