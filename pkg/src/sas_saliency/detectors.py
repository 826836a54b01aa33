"""Classical weak saliency detectors used as fusion inputs.

Each detector is a pure function ``CsasImage -> H x W map in [0, 1]``. External
maps (from any other detector) can be loaded from files and mixed with these.
"""
from __future__ import annotations

from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage
from skimage.color import rgb2lab

Detector = Callable[[object], np.ndarray]


def _rgb(image) -> np.ndarray:
    return image.to_rgb() if hasattr(image, "to_rgb") else np.asarray(image, dtype=np.float64)


def minmax(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    lo, hi = float(x.min()), float(x.max())
    if hi - lo <= 1e-12:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def color_contrast(image, sigma: float = 1.0) -> np.ndarray:
    """Frequency-tuned global contrast: Lab distance of the blurred image to its mean color."""
    lab = rgb2lab(_rgb(image))
    blurred = ndimage.gaussian_filter(lab, sigma=(sigma, sigma, 0))
    mean = lab.reshape(-1, 3).mean(0)
    return minmax(np.linalg.norm(blurred - mean, axis=-1))


def boundary_prior(image, border: int = 3, sigma: float = 1.0) -> np.ndarray:
    """Background-prior saliency: color distance to each image border strip.

    Taking the minimum over the four borders keeps regions that touch any one
    border dark.
    """
    lab = ndimage.gaussian_filter(rgb2lab(_rgb(image)), sigma=(sigma, sigma, 0))
    strips = (lab[:border], lab[-border:], lab[:, :border], lab[:, -border:])
    dists = []
    for strip in strips:
        ref = strip.reshape(-1, 3)
        mu = ref.mean(0)
        scale = np.sqrt(ref.var(0).sum()) + 1.0
        dists.append(np.linalg.norm(lab - mu, axis=-1) / scale)
    return minmax(np.min(dists, axis=0))


def spectral_residual(image, avg: int = 3, sigma: float = 2.0) -> np.ndarray:
    """Spectral-residual saliency on the value (brightness) channel."""
    if hasattr(image, "value"):
        v = image.value
    else:
        v = _rgb(image).max(axis=-1)
    spec = np.fft.fft2(v)
    log_amp = np.log(np.abs(spec) + 1e-9)
    residual = log_amp - ndimage.uniform_filter(log_amp, size=avg, mode="wrap")
    sal = np.abs(np.fft.ifft2(np.exp(residual + 1j * np.angle(spec)))) ** 2
    return minmax(ndimage.gaussian_filter(sal, sigma))


BUILTIN_DETECTORS: dict[str, Detector] = {
    "color_contrast": color_contrast,
    "boundary_prior": boundary_prior,
    "spectral_residual": spectral_residual,
}


def run_detectors(image, names: Sequence[str] = tuple(BUILTIN_DETECTORS)) -> np.ndarray:
    """Stack of weak maps, shape (m, H, W)."""
    unknown = set(names) - set(BUILTIN_DETECTORS)
    if unknown:
        raise KeyError(f"unknown detectors: {sorted(unknown)}")
    return np.stack([np.clip(BUILTIN_DETECTORS[n](image), 0, 1) for n in names])


def load_map(path: str | Path) -> np.ndarray:
    """Read an external weak map: ``.npy`` floats in [0, 1] or an 8-bit image."""
    path = Path(path)
    if path.suffix == ".npy":
        m = np.load(path).astype(np.float64)
    else:
        from PIL import Image

        m = np.asarray(Image.open(path).convert("L"), dtype=np.float64) / 255.0
    if m.ndim != 2:
        raise ValueError(f"{path}: weak map must be 2-D")
    return np.clip(m, 0, 1)
