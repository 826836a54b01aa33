"""Pyramidal flow network for aligning repeat surveys, plus warping and aggregation.

Flow convention: ``flow[0] = u`` is the column displacement and ``flow[1] = v``
the row displacement. ``estimate_flow(a, b)`` returns the field F with
``a(x) ~ b(x + F(x))``, so ``warp(b, F)`` brings ``b`` into the frame of ``a``.

The network shares a three-level convolutional feature pyramid (1/2, 1/4, 1/8)
between both images. Coarse to fine, each level warps the second image's
features by the upsampled flow, builds a local correlation cost volume and
predicts a residual. The finest level adds a sub-pixel refinement block and a
feature-driven normalized local smoothing step, and the result is upsampled x2.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

FLO_MAGIC = 202021.25
LEVEL_WEIGHTS = (0.32, 0.08, 0.02)


@dataclass
class FlowField:
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise ValueError("u and v must be H x W arrays of one shape")
        if not (np.isfinite(self.u).all() and np.isfinite(self.v).all()):
            raise ValueError("flow must be finite")

    @classmethod
    def zeros(cls, shape) -> "FlowField":
        return cls(np.zeros(shape), np.zeros(shape))

    @classmethod
    def from_array(cls, arr) -> "FlowField":
        a = np.asarray(arr)
        return cls(a[0], a[1])

    def to_array(self) -> np.ndarray:
        return np.stack([self.u, self.v])

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    @property
    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u, self.v)


@dataclass(frozen=True)
class FlowConfig:
    pyramid_levels: int = 3
    max_displacement: int = 4
    extra_interlevel_convs: int = 2
    channels: tuple[int, ...] = (16, 32, 48)
    estimator_width: int = 32
    smoothing_window: int = 3
    leaky_relu_slope: float = 0.1

    def __post_init__(self):
        if self.pyramid_levels < 2:
            raise ValueError("need at least two pyramid levels")
        if self.max_displacement < 1:
            raise ValueError("correlation radius must be >= 1")
        if len(self.channels) != self.pyramid_levels:
            raise ValueError("one channel width per pyramid level")
        if self.smoothing_window % 2 == 0:
            raise ValueError("smoothing window must be odd")

    @property
    def divisor(self) -> int:
        return 2 ** self.pyramid_levels


# narrower pyramid that trains in minutes on one CPU core
DESK_FLOW = FlowConfig(channels=(8, 16, 24), estimator_width=16)


# ---------------------------------------------------------------------------
# warping and correlation


def warp_tensor(x: torch.Tensor, flow: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Bilinear backward warp ``out(p) = x(p + flow(p))``.

    Returns the warped tensor and a validity mask (1 where the sample point lies
    inside the image). Bilinear weights come from the fractional part directly,
    so integer flows copy values exactly.
    """
    N, C, H, W = x.shape
    rows = torch.arange(H, dtype=flow.dtype, device=flow.device).view(1, H, 1)
    cols = torch.arange(W, dtype=flow.dtype, device=flow.device).view(1, 1, W)
    sx = cols + flow[:, 0]
    sy = rows + flow[:, 1]
    valid = ((sx >= 0) & (sx <= W - 1) & (sy >= 0) & (sy <= H - 1)).to(x.dtype)
    x0 = torch.floor(sx)
    y0 = torch.floor(sy)
    fx = (sx - x0).unsqueeze(1)
    fy = (sy - y0).unsqueeze(1)
    x0 = x0.long()
    y0 = y0.long()
    flat = x.reshape(N, C, H * W)

    def tap(yy, xx):
        inside = ((xx >= 0) & (xx < W) & (yy >= 0) & (yy < H)).unsqueeze(1).to(x.dtype)
        idx = (yy.clamp(0, H - 1) * W + xx.clamp(0, W - 1)).view(N, 1, H * W).expand(N, C, H * W)
        return torch.gather(flat, 2, idx).view(N, C, H, W) * inside

    out = ((1 - fy) * ((1 - fx) * tap(y0, x0) + fx * tap(y0, x0 + 1))
           + fy * ((1 - fx) * tap(y0 + 1, x0) + fx * tap(y0 + 1, x0 + 1)))
    return out, valid.unsqueeze(1)


def _image_planes(obj) -> tuple[np.ndarray, str]:
    from .aspect_color import CsasImage, hsv_embedding

    if isinstance(obj, CsasImage):
        return hsv_embedding(obj.hsv).transpose(2, 0, 1), "csas"
    a = np.asarray(obj, dtype=np.float64)
    if a.ndim == 2:
        return a[None], "map"
    if a.ndim == 3 and a.shape[-1] in (1, 3):
        return a.transpose(2, 0, 1), "hwc"
    return a, "chw"


def warp(obj, flow: FlowField, return_valid: bool = False):
    """Backward-warp a saliency map, CSAS image, or array by ``flow``.

    CSAS images are interpolated in the circular hue embedding. Out-of-bounds
    samples are zero and flagged invalid in the optional mask.
    """
    from .aspect_color import CsasImage, embedding_to_hsv

    planes, kind = _image_planes(obj)
    if planes.shape[-2:] != flow.shape:
        raise ValueError("map and flow differ in size")
    x = torch.from_numpy(np.ascontiguousarray(planes, dtype=np.float64))[None]
    f = torch.from_numpy(flow.to_array())[None]
    out, valid = warp_tensor(x, f)
    out = out[0].numpy()
    if kind == "csas":
        res = CsasImage(embedding_to_hsv(out.transpose(1, 2, 0)))
    elif kind == "map":
        res = out[0]
    elif kind == "hwc":
        res = out.transpose(1, 2, 0)
    else:
        res = out
    return (res, valid[0, 0].numpy().astype(bool)) if return_valid else res


def correlation(f1: torch.Tensor, f2: torch.Tensor, radius: int) -> torch.Tensor:
    """Local cost volume: ``out[d] = <f1(p), f2(p + d)> / C`` for |dy|, |dx| <= radius.

    Displacements are ordered with dy as the outer and dx as the inner index;
    ``f2`` is zero-padded.
    """
    N, C, H, W = f1.shape
    k = 2 * radius + 1
    padded = F.pad(f2, (radius,) * 4)
    patches = F.unfold(padded, k).view(N, C, k * k, H, W)
    return (f1.unsqueeze(2) * patches).sum(1) / C


# ---------------------------------------------------------------------------
# network


def _conv(cin, cout, stride=1, slope=0.1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=stride, padding=1), nn.LeakyReLU(slope))


def upsample_flow(flow: torch.Tensor, size) -> torch.Tensor:
    """Bilinear resize of a flow field with its vectors rescaled to the new grid."""
    sy = size[0] / flow.shape[-2]
    sx = size[1] / flow.shape[-1]
    up = F.interpolate(flow, size=size, mode="bilinear", align_corners=False)
    return torch.cat([up[:, :1] * sx, up[:, 1:] * sy], dim=1)


class FeaturePyramid(nn.Module):
    def __init__(self, cfg: FlowConfig, in_channels: int = 3):
        super().__init__()
        self.levels = nn.ModuleList()
        cin = in_channels
        for c in cfg.channels:
            self.levels.append(nn.Sequential(_conv(cin, c, 2, cfg.leaky_relu_slope), _conv(c, c, 1, cfg.leaky_relu_slope)))
            cin = c

    def forward(self, x):
        feats = []
        for level in self.levels:
            x = level(x)
            feats.append(x)
        return feats


class FlowEstimator(nn.Module):
    """Residual flow from a cost volume, first-image features and the current flow."""

    def __init__(self, cin: int, cfg: FlowConfig):
        super().__init__()
        w = cfg.estimator_width
        mods = [_conv(cin, w, 1, cfg.leaky_relu_slope)]
        for _ in range(cfg.extra_interlevel_convs):
            mods.append(_conv(w, w, 1, cfg.leaky_relu_slope))
        self.body = nn.Sequential(*mods)
        self.out = nn.Conv2d(w, 2, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x):
        return self.out(self.body(x))


class LocalSmoothing(nn.Module):
    """Normalized local filtering of flow with weights from feature distance."""

    def __init__(self, cin: int, cfg: FlowConfig, embed: int = 8):
        super().__init__()
        self.window = cfg.smoothing_window
        self.embed = nn.Conv2d(cin, embed, 1)
        self.log_scale = nn.Parameter(torch.zeros(()))

    def forward(self, flow, feats):
        k = self.window
        N, _, H, W = flow.shape
        g = self.embed(feats)
        pad = k // 2
        gp = F.unfold(F.pad(g, (pad,) * 4, mode="replicate"), k).view(N, g.shape[1], k * k, H, W)
        wts = torch.exp(-torch.exp(self.log_scale) * (gp - g.unsqueeze(2)).pow(2).sum(1))
        fp = F.unfold(F.pad(flow, (pad,) * 4, mode="replicate"), k).view(N, 2, k * k, H, W)
        return (wts.unsqueeze(1) * fp).sum(2) / wts.sum(1, keepdim=True)


class LFN(nn.Module):
    def __init__(self, cfg: FlowConfig | None = None, in_channels: int = 3):
        super().__init__()
        self.config = cfg = cfg or FlowConfig()
        self.pyramid = FeaturePyramid(cfg, in_channels)
        n_corr = (2 * cfg.max_displacement + 1) ** 2
        self.estimators = nn.ModuleList([FlowEstimator(n_corr + c + 2, cfg) for c in cfg.channels])
        c0 = cfg.channels[0]
        self.subpixel = FlowEstimator(2 * c0 + 2, cfg)
        self.smooth = LocalSmoothing(c0, cfg)
        for mod in self.modules():
            if isinstance(mod, nn.Conv2d) and mod.out_channels != 2:
                nn.init.kaiming_uniform_(mod.weight, a=cfg.leaky_relu_slope, nonlinearity="leaky_relu")
                nn.init.zeros_(mod.bias)

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> list[torch.Tensor]:
        """Flow predictions coarse to fine, each in its own level's pixel units.

        The last entry is the full-resolution output.
        """
        H, W = a.shape[-2:]
        d = self.config.divisor
        if H % d or W % d:
            raise ValueError(f"input size {H}x{W} is not divisible by {d}")
        # images arrive in [0, 1]; centre them
        fa = self.pyramid(a - 0.5)
        fb = self.pyramid(b - 0.5)
        r = self.config.max_displacement
        flow = None
        outputs = []
        for lvl in reversed(range(len(fa))):
            f1, f2 = fa[lvl], fb[lvl]
            if flow is None:
                flow = f1.new_zeros(f1.shape[0], 2, *f1.shape[-2:])
                warped = f2
            else:
                flow = upsample_flow(flow, f1.shape[-2:])
                warped, _ = warp_tensor(f2, flow)
            cost = correlation(f1, warped, r)
            flow = flow + self.estimators[lvl](torch.cat([cost, f1, flow], 1))
            if lvl == 0:
                warped, _ = warp_tensor(f2, flow)
                flow = flow + self.subpixel(torch.cat([f1, warped, flow], 1))
                flow = self.smooth(flow, f1)
            outputs.append(flow)
        outputs.append(upsample_flow(flow, (H, W)))
        return outputs


def multiscale_epe(outputs: Sequence[torch.Tensor], truth: torch.Tensor,
                   weights: Sequence[float] = LEVEL_WEIGHTS) -> torch.Tensor:
    """Weighted endpoint error, coarse to fine.

    Each pyramid prediction is upsampled to full resolution (vectors rescaled)
    and compared with the full-resolution truth, so every term is in input
    pixels. The last output is the upsampled finest level.
    """
    levels = outputs[:-1]
    if len(levels) != len(weights):
        raise ValueError("one weight per pyramid level")
    size = truth.shape[-2:]
    loss = truth.new_zeros(())
    for w, f in zip(weights, levels):
        loss = loss + w * (upsample_flow(f, size) - truth).pow(2).sum(1).add(1e-12).sqrt().mean()
    return loss


# ---------------------------------------------------------------------------
# inference API


def _network_input(image) -> torch.Tensor:
    if hasattr(image, "to_network"):
        return torch.from_numpy(image.to_network())
    a = np.asarray(image, dtype=np.float32)
    if a.ndim == 2:
        a = a[None]
    elif a.shape[-1] == 3:
        a = a.transpose(2, 0, 1)
    return torch.from_numpy(np.ascontiguousarray(a))


@torch.no_grad()
def estimate_flow(img_a, img_b, model: LFN) -> FlowField:
    xa, xb = _network_input(img_a), _network_input(img_b)
    if xa.shape != xb.shape:
        raise ValueError(f"image sizes differ: {tuple(xa.shape)} vs {tuple(xb.shape)}")
    was = model.training
    model.eval()
    try:
        out = model(xa[None].float(), xb[None].float())[-1][0].double().numpy()
    finally:
        model.train(was)
    return FlowField(out[0], out[1])


def aggregation_weights(guides_warped: Sequence[np.ndarray], valids: Sequence[np.ndarray], guide: np.ndarray | None,
                        tau: float, window: int = 5) -> np.ndarray:
    """Softmax over views of ``-tau`` times the local mean squared guide mismatch.

    Invalid samples get weight zero. ``tau = 0`` gives uniform weights over the
    valid views.
    """
    from scipy import ndimage

    scores = []
    for gw, valid in zip(guides_warped, valids):
        if guide is None or tau == 0:
            s = np.zeros(valid.shape)
        else:
            d2 = ((gw - guide) ** 2).sum(-1) if gw.ndim == 3 else (gw - guide) ** 2
            s = -tau * ndimage.uniform_filter(d2, size=window, mode="nearest")
        scores.append(np.where(valid, s, -np.inf))
    scores = np.stack(scores)
    top = scores.max(0)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(np.isfinite(scores), np.exp(scores - top), 0.0)
    total = e.sum(0)
    n = len(scores)
    return np.where(total > 0, e / np.where(total > 0, total, 1.0), 1.0 / n)


def aggregate_multi(maps: Sequence[np.ndarray], flows: Sequence[FlowField | None], guide=None,
                    guides: Sequence | None = None, tau: float = 0.0, window: int = 5) -> np.ndarray:
    """Fuse saliency maps from several surveys into the reference frame.

    Args:
        maps: one map per view, each in its own frame.
        flows: per view, the field taking it to the reference frame (None for
            the reference itself).
        guide: reference image (CsasImage or H x W x C array) for gating.
        guides: the other views' images, warped together with their maps.
        tau: gate sharpness; 0 gives a plain average of valid samples.

    Returns:
        The per-pixel convex combination of the valid warped maps.
    """
    if not maps:
        raise ValueError("need at least one map")
    if len(maps) == 1:
        return np.clip(np.asarray(maps[0], dtype=np.float64), 0, 1)
    if len(flows) != len(maps):
        raise ValueError("one flow per map")
    to_arr = lambda g: g.to_rgb() if hasattr(g, "to_rgb") else np.asarray(g, dtype=np.float64)
    ref_guide = None if guide is None else to_arr(guide)
    warped, valids, gws = [], [], []
    for i, (m, f) in enumerate(zip(maps, flows)):
        m = np.asarray(m, dtype=np.float64)
        g = None if guides is None or guides[i] is None else to_arr(guides[i])
        if f is None:
            warped.append(m)
            valids.append(np.ones(m.shape, dtype=bool))
            gws.append(ref_guide if g is None else g)
            continue
        wm, valid = warp(m, f, return_valid=True)
        warped.append(wm)
        valids.append(valid)
        gws.append(None if g is None else warp(g, f))
    use_gate = ref_guide is not None and tau != 0 and all(g is not None for g in gws)
    w = aggregation_weights(gws if use_gate else [None] * len(maps), valids, ref_guide if use_gate else None,
                            tau if use_gate else 0.0, window)
    out = (w * np.stack(warped)).sum(0)
    return np.clip(out, 0, 1)


def flow_metrics(pred: FlowField, truth: FlowField, img_pair=None) -> tuple[float, float]:
    """(AEE, AIE).

    AEE is the mean endpoint error. AIE is the RMS difference between the second
    image warped by the true flow and by the predicted flow, over samples valid
    under both (NaN without an image pair).
    """
    if pred.shape != truth.shape:
        raise ValueError("flow fields differ in size")
    aee = float(np.mean(np.hypot(pred.u - truth.u, pred.v - truth.v)))
    if img_pair is None:
        return aee, float("nan")
    b = img_pair[1]
    b = b.to_rgb() if hasattr(b, "to_rgb") else np.asarray(b, dtype=np.float64)
    wt, vt = warp(b, truth, return_valid=True)
    wp, vp = warp(b, pred, return_valid=True)
    valid = vt & vp
    if not valid.any():
        return aee, float("nan")
    diff = (wt - wp) ** 2
    if diff.ndim == 3:
        diff = diff.mean(-1)
    return aee, float(np.sqrt(diff[valid].mean()))


# ---------------------------------------------------------------------------
# synthetic training pairs


def smooth_flow(rng: np.random.Generator, shape, max_disp: float = 8.0, rotate: float = 5.0,
                scale: float = 0.05, shift: float = 6.0, deform: float = 2.0, sigma: float = 8.0) -> FlowField:
    """Similarity transform about the centre plus a smooth random deformation.

    The field is rescaled if needed so that no vector exceeds ``max_disp``.
    """
    from scipy import ndimage

    H, W = shape
    r, c = np.meshgrid(np.arange(H) - (H - 1) / 2, np.arange(W) - (W - 1) / 2, indexing="ij")
    th = np.radians(rng.uniform(-rotate, rotate))
    s = 1 + rng.uniform(-scale, scale)
    tu, tv = rng.uniform(-shift, shift, 2)
    u = s * (np.cos(th) * c - np.sin(th) * r) - c + tu
    v = s * (np.sin(th) * c + np.cos(th) * r) - r + tv
    for comp in (u, v):
        n = ndimage.gaussian_filter(rng.standard_normal((H, W)), sigma, mode="wrap")
        comp += deform * n / (np.abs(n).max() + 1e-12)
    mag = np.hypot(u, v).max()
    if mag > max_disp:
        u, v = u * max_disp / mag, v * max_disp / mag
    return FlowField(u, v)


def make_flow_pair(rng: np.random.Generator, size: int = 64, max_disp: float = 8.0, noise: float = 0.01):
    """Render a scene, crop it as image b, resample image a = b(x + F(x)).

    Returns (rgb_a, rgb_b, flow) with rgb as H x W x 3 float32.
    """
    from scipy import ndimage

    from .aspect_color import colorize
    from .scene import add_speckle, generate_scene, random_scene_spec

    pad = int(np.ceil(max_disp)) + 1
    big = size + 2 * pad
    spec = random_scene_spec(rng, height=big, width=big)
    stack, _ = generate_scene(spec)
    stack = add_speckle(stack, 0.3, int(rng.integers(2 ** 31)))
    base = colorize(stack).to_rgb()
    flow = smooth_flow(rng, (size, size), max_disp)
    r, c = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    coords = [r + pad + flow.v, c + pad + flow.u]
    a = np.stack([ndimage.map_coordinates(base[..., ch], coords, order=1, mode="nearest") for ch in range(3)], -1)
    b = base[pad:pad + size, pad:pad + size]
    a = np.clip(a + noise * rng.standard_normal(a.shape), 0, 1)
    b = np.clip(b + noise * rng.standard_normal(b.shape), 0, 1)
    return a.astype(np.float32), b.astype(np.float32), flow


def make_flow_dataset(n: int, seed: int, size: int = 64, max_disp: float = 8.0):
    rng = np.random.default_rng(seed)
    a, b, f = [], [], []
    for _ in range(n):
        pa, pb, fl = make_flow_pair(rng, size, max_disp)
        a.append(pa.transpose(2, 0, 1))
        b.append(pb.transpose(2, 0, 1))
        f.append(fl.to_array())
    return (torch.from_numpy(np.stack(a)), torch.from_numpy(np.stack(b)),
            torch.from_numpy(np.stack(f).astype(np.float32)))


def train_flow(model: LFN, data, epochs: int = 30, batch_size: int = 32, lr: float = 1e-3, seed: int = 0,
               log=None) -> list[float]:
    """Adam on the multi-scale endpoint error; returns the per-epoch mean loss."""
    a, b, f = data
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    model.train()
    history = []
    for epoch in range(epochs):
        perm = torch.randperm(a.shape[0], generator=gen)
        total, count = 0.0, 0
        for start in range(0, len(perm), batch_size):
            idx = perm[start:start + batch_size]
            outs = model(a[idx], b[idx])
            loss = multiscale_epe(outs, f[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        history.append(total / count)
        if log is not None:
            log(f"flow epoch {epoch + 1}: loss {history[-1]:.4f}")
    return history


@torch.no_grad()
def evaluate_flow(model: LFN, data) -> tuple[float, float]:
    """Mean AEE and the median endpoint magnitude of the predictions."""
    a, b, f = data
    model.eval()
    preds = torch.cat([model(a[i:i + 64], b[i:i + 64])[-1] for i in range(0, a.shape[0], 64)])
    aee = float((preds - f).pow(2).sum(1).sqrt().mean())
    return aee, float(preds.pow(2).sum(1).sqrt().median())


# ---------------------------------------------------------------------------
# persistence and display


def write_flo(flow: FlowField, path: str | Path) -> None:
    """Middlebury ``.flo``: float magic, int32 width and height, interleaved u, v float32."""
    H, W = flow.shape
    data = np.stack([flow.u, flow.v], axis=-1).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<fii", FLO_MAGIC, W, H))
        fh.write(data.tobytes())


def read_flo(path: str | Path) -> FlowField:
    with open(path, "rb") as fh:
        magic, W, H = struct.unpack("<fii", fh.read(12))
        if magic != np.float32(FLO_MAGIC):
            raise ValueError(f"{path}: bad flow magic {magic}")
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != H * W * 2:
        raise ValueError(f"{path}: truncated flow file")
    data = data.reshape(H, W, 2)
    return FlowField(data[..., 0], data[..., 1])


def flow_to_rgb(flow: FlowField, max_magnitude: float | None = None) -> np.ndarray:
    """Color wheel: hue = direction, saturation = magnitude over the maximum."""
    from skimage.color import hsv2rgb

    mag = flow.magnitude
    top = max_magnitude if max_magnitude is not None else float(mag.max())
    hue = (np.arctan2(-flow.v, flow.u) / (2 * np.pi)) % 1.0
    sat = np.clip(mag / top, 0, 1) if top > 0 else np.zeros_like(mag)
    return hsv2rgb(np.stack([hue, sat, np.ones_like(mag)], -1))
