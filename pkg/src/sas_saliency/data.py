"""In-memory datasets of rendered scenes, repeat-survey views and generic images."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from scipy import ndimage
from skimage.color import rgb2hsv

from .aspect_color import ColorMapConfig, CsasImage, colorize
from .scene import SceneSpec, add_haze, add_speckle, generate_scene, random_scene_spec


@dataclass
class SaliencyDataset:
    """Images (HSV, N x H x W x 3) with binary masks.

    ``views`` optionally holds extra surveys per scene, N x V-1 x H x W x 3,
    with ``view_offsets`` (N x V x 2, the reference first) and per-view masks.
    ``hue_is_aspect`` says whether hue encodes aspect, in which case rotation
    augmentation also turns the hue wheel.
    """

    hsv: np.ndarray
    masks: np.ndarray
    kinds: list[str] = field(default_factory=list)
    views: np.ndarray | None = None
    view_masks: np.ndarray | None = None
    view_offsets: np.ndarray | None = None
    colormap: ColorMapConfig = field(default_factory=ColorMapConfig)
    hue_is_aspect: bool = True
    # cached weak detector maps (N x m x H x W) and superpixel labels (N x H x W)
    weak_raw: np.ndarray | None = None
    superpixels: np.ndarray | None = None

    def __post_init__(self):
        if self.hsv.ndim != 4 or self.hsv.shape[-1] != 3:
            raise ValueError("dataset images must be N x H x W x 3")
        if self.masks.shape != self.hsv.shape[:3]:
            raise ValueError("one H x W mask per image")
        if not self.kinds:
            self.kinds = ["scene"] * len(self)

    def __len__(self) -> int:
        return self.hsv.shape[0]

    @property
    def num_views(self) -> int:
        return 1 if self.views is None else 1 + self.views.shape[1]

    def image(self, i: int) -> CsasImage:
        return CsasImage(self.hsv[i])

    def network_input(self, idx=None) -> torch.Tensor:
        idx = range(len(self)) if idx is None else idx
        return torch.from_numpy(np.stack([self.image(i).to_network() for i in idx]))

    def view_images(self, i: int) -> list[CsasImage]:
        out = [self.image(i)]
        if self.views is not None:
            out += [CsasImage(v) for v in self.views[i]]
        return out

    def subset(self, idx: Sequence[int]) -> "SaliencyDataset":
        idx = np.asarray(idx, dtype=int)
        pick = lambda a: None if a is None else a[idx]
        return dataclasses.replace(self, hsv=self.hsv[idx], masks=self.masks[idx], kinds=[self.kinds[i] for i in idx],
                                   views=pick(self.views), view_masks=pick(self.view_masks),
                                   view_offsets=pick(self.view_offsets), weak_raw=pick(self.weak_raw),
                                   superpixels=pick(self.superpixels))


def view_specs(spec: SceneSpec, rng: np.random.Generator, num_views: int, jitter: int = 3,
               coverage_change_prob: float = 0.5) -> list[SceneSpec]:
    """Repeat surveys of one scene: the reference plus jittered centre points.

    Each extra view shifts the content by an integer offset of at most
    ``jitter`` pixels and may lose coverage of a different aspect arc.
    """
    out = [spec]
    for _ in range(num_views - 1):
        off = tuple(int(o) for o in rng.integers(-jitter, jitter + 1, 2))
        loss = spec.coverage_loss
        if rng.random() < coverage_change_prob:
            loss = (float(rng.uniform(0, 360)), float(rng.uniform(90, 180)))
        out.append(dataclasses.replace(spec, offset=off, coverage_loss=loss))
    return out


def degrade(stack, rng: np.random.Generator, speckle: float, haze_prob: float):
    """Speckle every stack; with probability ``haze_prob`` also haze a random patch."""
    out = add_speckle(stack, speckle, int(rng.integers(2 ** 31))) if speckle > 0 else stack
    if rng.random() < haze_prob:
        H, W = stack.shape
        h, w = int(rng.integers(H // 6, H // 3)), int(rng.integers(W // 6, W // 3))
        r0, c0 = int(rng.integers(0, H - h)), int(rng.integers(0, W - w))
        out = add_haze(out, (r0, c0, r0 + h, c0 + w), float(rng.uniform(0.4, 0.8)))
    return out


def render_scene(spec: SceneSpec, rng: np.random.Generator, *, num_views: int = 1, jitter: int = 3,
                 speckle: float = 0.25, haze_prob: float = 0.3):
    """Degraded sub-aperture stacks and masks for every survey of one scene.

    Returns (view specs, stacks, masks) with the reference survey first.
    """
    specs = view_specs(spec, rng, num_views, jitter)
    stacks, masks = [], []
    for v in specs:
        stack, mask = generate_scene(v)
        stacks.append(degrade(stack, rng, speckle, haze_prob))
        masks.append(mask)
    return specs, stacks, masks


def dataset_from_stacks(scenes: Sequence[tuple[Sequence[SceneSpec], Sequence, Sequence[np.ndarray]]],
                        colormap: ColorMapConfig | None = None) -> SaliencyDataset:
    """Colorize rendered or loaded scenes, each a (view specs, stacks, masks) triple."""
    cfg = colormap or ColorMapConfig()
    hsv, masks, kinds, views, vmasks, offsets = [], [], [], [], [], []
    for vs, stacks, ms in scenes:
        images = [colorize(st, cfg).hsv for st in stacks]
        hsv.append(images[0])
        masks.append(ms[0])
        kinds.append(vs[0].seafloor_kind)
        views.append(images[1:])
        vmasks.append(list(ms[1:]))
        offsets.append([v.offset for v in vs])
    extra = len(scenes) > 0 and len(scenes[0][1]) > 1
    return SaliencyDataset(
        hsv=np.stack(hsv), masks=np.stack(masks), kinds=kinds,
        views=np.array(views) if extra else None, view_masks=np.array(vmasks) if extra else None,
        view_offsets=np.array(offsets) if extra else None, colormap=cfg)


def build_sonar_dataset(n: int, seed: int, *, size: int = 64, num_apertures: int = 36, num_views: int = 1,
                        colormap: ColorMapConfig | None = None, speckle: float = 0.25, haze_prob: float = 0.3,
                        jitter: int = 3, specs: Sequence[SceneSpec] | None = None) -> SaliencyDataset:
    """Render ``n`` random scenes (or the given specs) with ``num_views`` surveys each."""
    rng = np.random.default_rng(seed)
    scenes = []
    for i in range(n):
        spec = specs[i] if specs is not None else random_scene_spec(rng, height=size, width=size,
                                                                      num_apertures=num_apertures)
        scenes.append(render_scene(spec, rng, num_views=num_views, jitter=jitter, speckle=speckle,
                                   haze_prob=haze_prob))
    return dataset_from_stacks(scenes, colormap)


def build_generic_dataset(n: int, seed: int, size: int = 64) -> SaliencyDataset:
    """Procedural "natural-like" images: a smooth colored background with one or
    two contrasting colored blobs as the salient objects."""
    rng = np.random.default_rng(seed)
    hsv, masks = [], []
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    for _ in range(n):
        bg = rng.uniform(0.2, 0.8, 3)
        noise = ndimage.gaussian_filter(rng.standard_normal((size, size, 3)), (6, 6, 0))
        img = bg + 0.08 * noise / noise.std()
        mask = np.zeros((size, size), dtype=np.uint8)
        for _ in range(int(rng.integers(1, 3))):
            cr, cc = rng.uniform(0.25, 0.75, 2) * size
            a, b = rng.uniform(0.08, 0.2, 2) * size
            t = rng.uniform(0, np.pi)
            u = (cols - cc) * np.cos(t) + (rows - cr) * np.sin(t)
            v = -(cols - cc) * np.sin(t) + (rows - cr) * np.cos(t)
            wobble = 1 + 0.2 * np.sin(3 * np.arctan2(v, u) + rng.uniform(0, 2 * np.pi))
            blob = (u / a) ** 2 + (v / b) ** 2 <= wobble
            color = np.clip(1 - bg + rng.normal(0, 0.15, 3), 0, 1)
            img[blob] = color + 0.05 * rng.standard_normal((blob.sum(), 3))
            mask |= blob.astype(np.uint8)
        hsv.append(rgb2hsv(np.clip(img, 0, 1)))
        masks.append(mask)
    return SaliencyDataset(np.stack(hsv), np.stack(masks), kinds=["generic"] * n, hue_is_aspect=False)


def load_image_mask_dir(directory, size: int | None = None) -> SaliencyDataset:
    """Generic pretraining pairs from a directory of ``<name>.png`` + ``<name>_mask.png``."""
    from pathlib import Path

    from PIL import Image

    d = Path(directory)
    pairs = sorted(p for p in d.glob("*.png") if not p.stem.endswith("_mask"))
    hsv, masks = [], []
    for p in pairs:
        mpath = p.with_name(p.stem + "_mask.png")
        if not mpath.exists():
            continue
        img, m = Image.open(p).convert("RGB"), Image.open(mpath).convert("L")
        if size is not None:
            img, m = img.resize((size, size), Image.BILINEAR), m.resize((size, size), Image.NEAREST)
        hsv.append(rgb2hsv(np.asarray(img, dtype=np.float64) / 255.0))
        masks.append((np.asarray(m) > 127).astype(np.uint8))
    if not hsv:
        from .io import MalformedDataset

        raise MalformedDataset(f"{d}: no image/mask pairs found")
    return SaliencyDataset(np.stack(hsv), np.stack(masks), kinds=["generic"] * len(hsv), hue_is_aspect=False)


def write_scene_tree(directory, scenes) -> list[str]:
    """One ``scene_NNNN`` directory per (view specs, stacks, masks) triple."""
    from pathlib import Path

    from .io import write_scene

    names = []
    for i, (vs, stacks, masks) in enumerate(scenes):
        name = f"scene_{i:04d}"
        write_scene(Path(directory) / name, list(stacks), list(masks),
                    {"views": [v.to_dict() for v in vs]})
        names.append(name)
    return names


def read_scene_tree(directory, colormap: ColorMapConfig | None = None) -> tuple[SaliencyDataset, list[str]]:
    """Load every scene directory under ``directory`` (sorted by name) and colorize it."""
    from pathlib import Path

    from .io import MalformedDataset, read_scene

    d = Path(directory)
    if not d.is_dir():
        raise MalformedDataset(f"{d}: not a directory")
    dirs = sorted(p for p in d.iterdir() if p.is_dir() and (p / "stack.npz").exists())
    if not dirs:
        raise MalformedDataset(f"{d}: no scene directories found")
    scenes = []
    for p in dirs:
        stacks, masks, spec = read_scene(p)
        try:
            vs = [SceneSpec.from_dict(v) for v in spec["views"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedDataset(f"{p}: bad spec.json ({exc})") from exc
        if len(vs) != len(stacks):
            raise MalformedDataset(f"{p}: {len(stacks)} stacks but {len(vs)} view specs")
        scenes.append((vs, stacks, masks))
    if len({len(s[1]) for s in scenes}) != 1 or len({s[2][0].shape for s in scenes}) != 1:
        raise MalformedDataset(f"{d}: scenes differ in view count or size")
    return dataset_from_stacks(scenes, colormap), [p.name for p in dirs]
