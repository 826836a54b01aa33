"""Color-by-aspect rendering of sub-aperture stacks.

Hue encodes the dominant scattering direction, saturation the angular
anisotropy and value the log-scaled reflectivity power mean. Images are held
in HSV with every channel in [0, 1]; :meth:`CsasImage.to_rgb` is the display
and network-input conversion.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np
from skimage.color import hsv2rgb

if TYPE_CHECKING:
    from .scene import SubApertureStack

# 0 deg -> red, 120 deg -> blue, 240 deg -> green
DEFAULT_ANCHORS = ((0.0, 0.0), (120.0, 2.0 / 3.0), (240.0, 1.0 / 3.0))

_SAT_EPS = 1e-12


@dataclass
class CsasImage:
    hsv: np.ndarray

    def __post_init__(self):
        self.hsv = np.asarray(self.hsv, dtype=np.float64)
        if self.hsv.ndim != 3 or self.hsv.shape[-1] != 3:
            raise ValueError("CSAS image must be H x W x 3")

    @property
    def shape(self) -> tuple[int, int]:
        return self.hsv.shape[:2]

    @property
    def hue(self) -> np.ndarray:
        return self.hsv[..., 0]

    @property
    def saturation(self) -> np.ndarray:
        return self.hsv[..., 1]

    @property
    def value(self) -> np.ndarray:
        return self.hsv[..., 2]

    def to_rgb(self) -> np.ndarray:
        return hsv2rgb(np.clip(self.hsv, 0.0, 1.0))

    def to_network(self) -> np.ndarray:
        """Channels-first float32 RGB."""
        return np.ascontiguousarray(self.to_rgb().transpose(2, 0, 1), dtype=np.float32)


@dataclass(frozen=True)
class ColorMapConfig:
    """Angle-to-hue mapping and rendering options.

    ``hue_anchors`` are (angle, hue) pairs interpolated around the circle.
    ``compression`` is an optional list of (hue_in, hue_out) knots applied
    after the anchor map, used for reduced-hue colormaps. A compressed map is
    no longer a bijection of the circle, so hue rotation is refused for it.
    """

    hue_anchors: tuple[tuple[float, float], ...] = DEFAULT_ANCHORS
    compression: tuple[tuple[float, float], ...] | None = None
    saturation_scale: float = 1.0
    power_mean_exponent: float = 1.0
    value_percentiles: tuple[float, float] = (1.0, 99.0)

    def __post_init__(self):
        if self.power_mean_exponent == 0:
            raise ValueError("power mean exponent must be non-zero")
        angles, _ = _unwrapped_anchors(self.hue_anchors)
        if np.any(np.diff(angles) <= 0):
            raise ValueError("hue anchor angles must be distinct")

    @property
    def is_bijective(self) -> bool:
        if self.compression is not None:
            return False
        _, hues = _unwrapped_anchors(self.hue_anchors)
        d = np.diff(hues)
        return bool((np.all(d > 0) or np.all(d < 0)) and abs(abs(hues[-1] - hues[0]) - 1.0) < 1e-9)


def compressed_colormap(hue_range: float = 0.15) -> ColorMapConfig:
    """Few-hue colormap carrying only a little directional information."""
    return ColorMapConfig(compression=((0.0, 0.0), (1.0, hue_range)))


def _unwrapped_anchors(anchors) -> tuple[np.ndarray, np.ndarray]:
    pts = sorted((a % 360.0, h % 1.0) for a, h in anchors)
    angles = np.array([p[0] for p in pts] + [pts[0][0] + 360.0])
    hues = [pts[0][1]]
    for _, h in pts[1:] + pts[:1]:
        d = (h - hues[-1] + 0.5) % 1.0 - 0.5
        hues.append(hues[-1] + d)
    return angles, np.array(hues)


def angle_to_hue(angles, cfg: ColorMapConfig | None = None) -> np.ndarray:
    cfg = cfg or ColorMapConfig()
    xa, xh = _unwrapped_anchors(cfg.hue_anchors)
    a = (np.asarray(angles, dtype=np.float64) - xa[0]) % 360.0 + xa[0]
    hue = np.interp(a, xa, xh) % 1.0
    if cfg.compression is not None:
        knots = np.asarray(sorted(cfg.compression), dtype=np.float64)
        hue = np.interp(hue, knots[:, 0], knots[:, 1])
    return hue


def hue_to_angle(hue, cfg: ColorMapConfig | None = None) -> np.ndarray:
    cfg = cfg or ColorMapConfig()
    if not cfg.is_bijective:
        raise ValueError("hue map is not a bijection of the circle")
    xa, xh = _unwrapped_anchors(cfg.hue_anchors)
    if xh[-1] < xh[0]:
        xa, xh = xa[::-1], xh[::-1]
    h = (np.asarray(hue, dtype=np.float64) - xh[0]) % 1.0 + xh[0]
    return np.interp(h, xh, xa) % 360.0


def power_mean(stack: "SubApertureStack", p: float = 1.0) -> np.ndarray:
    r = stack.reflectivity
    if p == 1.0:
        return r.mean(axis=0)
    return np.mean(r ** p, axis=0) ** (1.0 / p)


def circular_resultant(stack: "SubApertureStack") -> tuple[np.ndarray, np.ndarray]:
    """Resultant angle (degrees) and normalized magnitude per pixel."""
    r = stack.reflectivity
    t = np.radians(stack.center_angles)[:, None, None]
    c = np.sum(r * np.cos(t), axis=0)
    s = np.sum(r * np.sin(t), axis=0)
    total = r.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mag = np.where(total > 0, np.hypot(c, s) / total, 0.0)
    mag = np.where(mag < _SAT_EPS, 0.0, np.clip(mag, 0.0, 1.0))
    angle = np.where(mag > 0, np.degrees(np.arctan2(s, c)) % 360.0, 0.0)
    return angle, mag


def _stretch_log(m: np.ndarray, percentiles) -> np.ndarray:
    peak = float(m.max()) if m.size else 0.0
    if peak <= 0:
        return np.zeros_like(m)
    ll = np.log(m + 1e-6 * peak)
    lo, hi = np.percentile(ll, percentiles)
    if hi - lo <= 1e-12:
        return np.where(m > 0, 1.0, 0.0)
    return np.clip((ll - lo) / (hi - lo), 0.0, 1.0)


def colorize(stack: "SubApertureStack", cfg: ColorMapConfig | None = None) -> CsasImage:
    """Render a sub-aperture stack as a color-by-aspect image.

    Args:
        stack: K x H x W reflectivity with uniformly spaced center angles.
        cfg: hue mapping, compression and value-scaling options.

    Returns:
        CsasImage whose hue is the mapped circular-resultant angle, whose
        saturation is the resultant magnitude over total reflectivity, and whose
        value is the per-image percentile-stretched log power mean.
    """
    cfg = cfg or ColorMapConfig()
    angle, mag = circular_resultant(stack)
    hue = angle_to_hue(angle, cfg)
    sat = np.clip(mag * cfg.saturation_scale, 0.0, 1.0)
    val = _stretch_log(power_mean(stack, cfg.power_mean_exponent), cfg.value_percentiles)
    return CsasImage(np.stack([hue, sat, val], axis=-1))


def reflectivity_only(stack: "SubApertureStack", cfg: ColorMapConfig | None = None) -> CsasImage:
    """Gray rendering that drops all aspect information."""
    cfg = cfg or ColorMapConfig()
    val = _stretch_log(power_mean(stack, cfg.power_mean_exponent), cfg.value_percentiles)
    z = np.zeros_like(val)
    return CsasImage(np.stack([z, z, val], axis=-1))


def entropy_map(stack: "SubApertureStack") -> np.ndarray:
    """Shannon entropy of each pixel's aperture distribution over log K."""
    r = stack.reflectivity
    K = r.shape[0]
    total = r.sum(axis=0)
    if K < 2:
        return np.zeros(total.shape)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = np.where(total > 0, r / total, 0.0)
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    ent = terms.sum(axis=0) / np.log(K)
    return np.clip(np.where(total > 0, ent, 0.0), 0.0, 1.0)


def shift_hue_degrees(image: CsasImage, degrees: float, cfg: ColorMapConfig | None = None) -> CsasImage:
    """Rotate every encoded aspect angle by ``degrees`` through the hue map.

    Gray pixels (saturation 0) carry no direction and keep their hue.
    """
    cfg = cfg or ColorMapConfig()
    hsv = image.hsv.copy()
    if degrees % 360.0 == 0:
        return CsasImage(hsv)
    rotated = angle_to_hue(hue_to_angle(hsv[..., 0], cfg) + degrees, cfg)
    hsv[..., 0] = np.where(hsv[..., 1] > 0, rotated, hsv[..., 0])
    return CsasImage(hsv)


def hue_rotate(image: CsasImage, shift_slots: int, K: int, cfg: ColorMapConfig | None = None) -> CsasImage:
    """Circularly shift the hue wheel by ``shift_slots`` aperture spacings."""
    if not 0 <= shift_slots < K:
        raise ValueError(f"shift_slots must lie in [0, {K}), got {shift_slots}")
    return shift_hue_degrees(image, shift_slots * 360.0 / K, cfg)


def hsv_embedding(hsv: np.ndarray) -> np.ndarray:
    """Map HSV to (s cos h, s sin h, v), where linear interpolation respects hue periodicity."""
    ang = 2 * np.pi * hsv[..., 0]
    return np.stack([hsv[..., 1] * np.cos(ang), hsv[..., 1] * np.sin(ang), hsv[..., 2]], axis=-1)


def embedding_to_hsv(emb: np.ndarray) -> np.ndarray:
    x, y, v = emb[..., 0], emb[..., 1], emb[..., 2]
    hue = (np.arctan2(y, x) / (2 * np.pi)) % 1.0
    return np.stack([hue, np.clip(np.hypot(x, y), 0, 1), np.clip(v, 0, 1)], axis=-1)


def hue_distance(h1, h2) -> np.ndarray:
    """Circular distance between hues in [0, 0.5]."""
    d = np.abs(np.asarray(h1) - np.asarray(h2)) % 1.0
    return np.minimum(d, 1.0 - d)
