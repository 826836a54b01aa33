"""Synthetic multi-aspect sonar scenes and the sonar-specific augmentations.

A scene is rendered as a stack of sub-aperture reflectivity images, one per
aspect slice of the circular collection, together with a binary mask of the
target support. Angles are in degrees, measured counter-clockwise from the
+column axis with rows pointing down, so the unit vector for angle ``t`` in
(row, col) coordinates is ``(-sin t, cos t)``.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

SEAFLOOR_KINDS = ("flat_sand", "rippled_sand", "rocky", "pitted")
TARGET_SHAPES = ("disc", "rectangle", "capsule", "polyline")

_ANGLE_TOL = 1e-9


def wrap_degrees(angle):
    """Wrap angles to [-180, 180)."""
    return (np.asarray(angle, dtype=np.float64) + 180.0) % 360.0 - 180.0


@dataclass(frozen=True)
class Facet:
    """A scattering facet: gain and the aspect band it reflects into."""

    gain: float
    band_center: float
    band_width: float

    def __post_init__(self):
        if self.gain < 0:
            raise ValueError(f"facet gain must be >= 0, got {self.gain}")
        if not 0.0 < self.band_width <= 360.0:
            raise ValueError(f"facet band width must be in (0, 360], got {self.band_width}")

    def in_band(self, angles) -> np.ndarray:
        if self.band_width >= 360.0:
            return np.ones(np.shape(angles), dtype=bool)
        return np.abs(wrap_degrees(np.asarray(angles) - self.band_center)) <= self.band_width / 2 + _ANGLE_TOL


@dataclass(frozen=True)
class TargetSpec:
    shape: str
    center: tuple[float, float]
    rotation: float = 0.0
    scale: tuple[float, float] = (6.0, 6.0)
    facets: tuple[Facet, ...] = (Facet(4.0, 0.0, 360.0),)
    burial_fraction: float = 0.0
    # polyline vertices in units of scale[0], local (u, v) frame
    vertices: tuple[tuple[float, float], ...] = ((-1.0, -0.4), (0.0, 0.4), (1.0, -0.4))

    def __post_init__(self):
        if self.shape not in TARGET_SHAPES:
            raise ValueError(f"unknown target shape {self.shape!r}")
        if not 0.0 <= self.burial_fraction <= 1.0:
            raise ValueError("burial_fraction must lie in [0, 1]")
        if min(self.scale) <= 0:
            raise ValueError("target scale must be positive")
        object.__setattr__(self, "facets", tuple(
            f if isinstance(f, Facet) else Facet(**f) for f in self.facets))
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "scale", tuple(float(s) for s in self.scale))
        object.__setattr__(self, "vertices", tuple(tuple(map(float, v)) for v in self.vertices))


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    height: int = 64
    width: int = 64
    seafloor_kind: str = "flat_sand"
    targets: tuple[TargetSpec, ...] = ()
    full_aspect_radius: float = 24.0
    center: tuple[float, float] | None = None
    num_apertures: int = 100
    aperture_spacing: float = 3.6
    full_aspect_gain: float = 1.5
    ripple_wavelength: float = 8.0
    ripple_direction: float = 30.0
    # translation of the whole scene content (view jitter), integer pixels
    offset: tuple[int, int] = (0, 0)
    # aspect arc (center, width) in which target facets are poorly covered
    coverage_loss: tuple[float, float] | None = None
    coverage_gain: float = 0.15

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(
            t if isinstance(t, TargetSpec) else TargetSpec(**t) for t in self.targets))
        if self.center is None:
            object.__setattr__(self, "center", ((self.height - 1) / 2, (self.width - 1) / 2))
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "offset", tuple(int(o) for o in self.offset))
        if self.coverage_loss is not None:
            object.__setattr__(self, "coverage_loss", tuple(float(c) for c in self.coverage_loss))
        self.validate()

    def validate(self) -> None:
        if self.seafloor_kind not in SEAFLOOR_KINDS:
            raise ValueError(f"unknown seafloor kind {self.seafloor_kind!r}")
        if self.height < 1 or self.width < 1:
            raise ValueError("scene dimensions must be positive")
        if self.num_apertures < 1:
            raise ValueError("num_apertures must be >= 1")
        if abs(self.num_apertures * self.aperture_spacing - 360.0) > 1e-9:
            raise ValueError(
                f"num_apertures * aperture_spacing must equal 360, got "
                f"{self.num_apertures} * {self.aperture_spacing}")
        if not self.full_aspect_radius < min(self.height, self.width) / 2:
            raise ValueError("full_aspect_radius must be < min(height, width) / 2")
        if self.full_aspect_gain <= 0:
            raise ValueError("full_aspect_gain must be positive")

    @property
    def center_angles(self) -> np.ndarray:
        return np.arange(self.num_apertures) * self.aperture_spacing

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["targets"] = tuple(
            TargetSpec(**{**t, "facets": tuple(Facet(**f) for f in t["facets"])}) for t in d.get("targets", ()))
        for key in ("center", "offset", "coverage_loss"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class SubApertureStack:
    """Per-aspect reflectivity volume (linear power), shape K x H x W."""

    reflectivity: np.ndarray
    center_angles: np.ndarray

    def __post_init__(self):
        self.reflectivity = np.asarray(self.reflectivity, dtype=np.float64)
        self.center_angles = np.asarray(self.center_angles, dtype=np.float64)
        if self.reflectivity.ndim != 3:
            raise ValueError("reflectivity must be K x H x W")
        if self.center_angles.shape != (self.reflectivity.shape[0],):
            raise ValueError("need one center angle per aperture")

    @property
    def num_apertures(self) -> int:
        return self.reflectivity.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.reflectivity.shape[1:]

    def check(self) -> None:
        r = self.reflectivity
        if not np.all(np.isfinite(r)) or np.any(r < 0):
            raise ValueError("reflectivity must be finite and non-negative")
        if self.num_apertures > 1:
            steps = np.diff(self.center_angles)
            if np.any(steps <= 0) or np.ptp(steps) > 1e-6:
                raise ValueError("center angles must be strictly increasing and uniform")

    def replace(self, reflectivity: np.ndarray) -> "SubApertureStack":
        return SubApertureStack(reflectivity, self.center_angles.copy())


# ---------------------------------------------------------------------------
# rendering


def _pixel_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    return np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")


def _local_coords(target: TargetSpec, rows, cols, offset) -> tuple[np.ndarray, np.ndarray]:
    # (u, v) in the target frame; u along the rotation axis
    dr = rows - (target.center[0] + offset[0])
    dc = cols - (target.center[1] + offset[1])
    x, y = dc, -dr
    t = math.radians(target.rotation)
    u = x * math.cos(t) + y * math.sin(t)
    v = -x * math.sin(t) + y * math.cos(t)
    return u, v


def _segment_distance(u, v, p0, p1) -> np.ndarray:
    p0 = np.asarray(p0)
    d = np.asarray(p1) - p0
    denom = float(d @ d)
    s = np.zeros_like(u) if denom == 0 else np.clip(((u - p0[0]) * d[0] + (v - p0[1]) * d[1]) / denom, 0, 1)
    return np.hypot(u - (p0[0] + s * d[0]), v - (p0[1] + s * d[1]))


def target_support(target: TargetSpec, height: int, width: int, offset=(0, 0)) -> np.ndarray:
    """Boolean support of one target on the pixel grid."""
    rows, cols = _pixel_grid(height, width)
    u, v = _local_coords(target, rows, cols, offset)
    a, b = target.scale
    if target.shape == "disc":
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    if target.shape == "rectangle":
        return (np.abs(u) <= a) & (np.abs(v) <= b)
    if target.shape == "capsule":
        half = max(a - b, 0.0)
        return _segment_distance(u, v, (-half, 0.0), (half, 0.0)) <= b
    verts = [(vx * a, vy * a) for vx, vy in target.vertices]
    dist = np.full(u.shape, np.inf)
    for p0, p1 in zip(verts[:-1], verts[1:]):
        dist = np.minimum(dist, _segment_distance(u, v, p0, p1))
    return dist <= b


def _smooth_noise(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    field_ = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    std = field_.std()
    return field_ / std if std > 0 else field_


def _seafloor(spec: SceneSpec, rng: np.random.Generator, pad: int) -> tuple[np.ndarray, np.ndarray | None]:
    """Isotropic baseline reflectivity, plus an anisotropic ripple component."""
    shape = (spec.height + 2 * pad, spec.width + 2 * pad)
    base = 1.0 + 0.12 * _smooth_noise(rng, shape, 1.5)
    ripple = None
    kind = spec.seafloor_kind
    if kind == "rippled_sand":
        rows, cols = _pixel_grid(*shape)
        t = math.radians(spec.ripple_direction)
        phase = rng.uniform(0, 2 * np.pi)
        warp = 1.5 * _smooth_noise(rng, shape, 6.0)
        proj = cols * math.cos(t) - rows * math.sin(t) + warp
        ripple = 0.45 * (1.0 + np.sin(2 * np.pi * proj / spec.ripple_wavelength + phase))
    elif kind == "rocky":
        blobs = _smooth_noise(rng, shape, 2.5)
        rocks = np.clip(blobs - 1.2, 0, None)
        base = base + 3.0 * rocks / max(rocks.max(), 1e-12)
    elif kind == "pitted":
        blobs = _smooth_noise(rng, shape, 1.2)
        pits = np.clip(blobs - 1.4, 0, None)
        pits = pits / max(pits.max(), 1e-12)
        rim = ndimage.grey_dilation(pits, size=3) - pits
        base = base * (1.0 - 0.7 * pits) + 0.6 * rim
    base = np.clip(base, 0.05, None)
    return base, ripple


def _crop(a: np.ndarray, pad: int, spec: SceneSpec) -> np.ndarray:
    r0 = pad - spec.offset[0]
    c0 = pad - spec.offset[1]
    return a[..., r0:r0 + spec.height, c0:c0 + spec.width]


def generate_scene(spec: SceneSpec, *, pad: int = 16) -> tuple[SubApertureStack, np.ndarray]:
    """Render a scene into a sub-aperture stack and its ground-truth mask.

    The output is a pure function of ``spec``. Target pixels receive their
    facet reflectivity only in apertures inside each facet's aspect band; in
    all other apertures they hold exactly the seafloor value. Content is
    shifted by ``spec.offset`` and the seafloor texture is cropped from a
    padded canvas so that views with different offsets stay consistent.

    Raises:
        ValueError: if a target does not touch the image or ``|offset| > pad``.
    """
    spec.validate()
    if max(abs(o) for o in spec.offset) > pad:
        raise ValueError(f"offset {spec.offset} exceeds canvas padding {pad}")
    rng = np.random.default_rng(spec.seed)
    H, W = spec.height, spec.width
    angles = spec.center_angles

    base, ripple = _seafloor(spec, rng, pad)
    base = _crop(base, pad, spec)
    rows, cols = _pixel_grid(H, W)
    fa_center = (spec.center[0] + spec.offset[0], spec.center[1] + spec.offset[1])
    inside = np.hypot(rows - fa_center[0], cols - fa_center[1]) <= spec.full_aspect_radius
    gain = np.where(inside, spec.full_aspect_gain, 1.0)

    refl = np.broadcast_to(base * gain, (len(angles), H, W)).copy()
    if ripple is not None:
        # ripple crests backscatter most when ensonified across the crest line
        aspect = np.cos(np.radians(angles - spec.ripple_direction)) ** 2
        refl += aspect[:, None, None] * (_crop(ripple, pad, spec) * gain)[None]

    mask = np.zeros((H, W), dtype=np.uint8)
    for target in spec.targets:
        support = target_support(target, H, W, spec.offset)
        if not support.any():
            raise ValueError(f"target at {target.center} lies fully outside the image")
        mask |= support.astype(np.uint8)
        texture = np.clip(1.0 + 0.2 * _smooth_noise(rng, (H, W), 1.0), 0.2, None)
        dr = rows - (target.center[0] + spec.offset[0])
        dc = cols - (target.center[1] + spec.offset[1])
        phi = np.degrees(np.arctan2(-dr, dc))
        strength = (1.0 - target.burial_fraction) * texture * support
        for facet in target.facets:
            facing = 0.6 + 0.4 * np.cos(np.radians(phi - facet.band_center))
            band = facet.in_band(angles).astype(np.float64)
            if spec.coverage_loss is not None:
                lost = Facet(1.0, *spec.coverage_loss).in_band(angles)
                band = np.where(lost, band * spec.coverage_gain, band)
            refl += band[:, None, None] * (facet.gain * facing * strength)[None]

    return SubApertureStack(refl, angles.copy()), mask


def random_scene_spec(
    rng: np.random.Generator,
    *,
    height: int = 64,
    width: int = 64,
    num_apertures: int = 36,
    min_targets: int = 1,
    max_targets: int = 2,
    seafloor_kinds: Sequence[str] = SEAFLOOR_KINDS,
    coverage_loss_prob: float = 0.4,
) -> SceneSpec:
    """Sample a scene spec with 1-2 targets inside the full-aspect region."""
    radius = 0.4 * min(height, width)
    center = ((height - 1) / 2, (width - 1) / 2)
    n_targets = int(rng.integers(min_targets, max_targets + 1))
    targets: list[TargetSpec] = []
    size_scale = min(height, width) / 64
    attempts = 0
    while len(targets) < n_targets and attempts < 200:
        attempts += 1
        shape = TARGET_SHAPES[int(rng.integers(len(TARGET_SHAPES)))]
        a = rng.uniform(4.0, 9.0) * size_scale
        b = a * rng.uniform(0.45, 1.0) if shape != "disc" else a * rng.uniform(0.7, 1.0)
        if shape == "polyline":
            b = rng.uniform(1.5, 2.5) * size_scale
        r = rng.uniform(0, radius - a)
        t = rng.uniform(0, 2 * np.pi)
        c = (center[0] - r * math.sin(t), center[1] + r * math.cos(t))
        if any(math.dist(c, o.center) < a + max(o.scale) + 3 for o in targets):
            continue
        n_facets = int(rng.integers(1, 4))
        contrast = rng.uniform(0.8, 2.5)
        facets = []
        for _ in range(n_facets):
            w = rng.uniform(40.0, 140.0)
            facets.append(Facet(contrast * 360.0 / (n_facets * w), rng.uniform(0, 360), w))
        targets.append(TargetSpec(
            shape=shape, center=c, rotation=float(rng.uniform(0, 180)), scale=(a, b),
            facets=tuple(facets), burial_fraction=float(rng.choice([0.0, 0.0, rng.uniform(0, 0.5)]))))
    loss = None
    if rng.random() < coverage_loss_prob:
        loss = (float(rng.uniform(0, 360)), float(rng.uniform(90, 180)))
    return SceneSpec(
        seed=int(rng.integers(2**31)), height=height, width=width,
        seafloor_kind=str(seafloor_kinds[int(rng.integers(len(seafloor_kinds)))]),
        targets=tuple(targets), full_aspect_radius=radius,
        num_apertures=num_apertures, aperture_spacing=360.0 / num_apertures,
        ripple_direction=float(rng.uniform(0, 180)), ripple_wavelength=float(rng.uniform(5, 10)),
        coverage_loss=loss)


# ---------------------------------------------------------------------------
# stack-level augmentation


def add_speckle(stack: SubApertureStack, sigma: float, seed) -> SubApertureStack:
    """Multiplicative speckle: every value times ``max(0, 1 + eps)``, eps ~ N(0, sigma^2)."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return stack.replace(stack.reflectivity.copy())
    rng = np.random.default_rng(seed)
    factor = np.maximum(0.0, 1.0 + sigma * rng.standard_normal(stack.reflectivity.shape))
    return stack.replace(stack.reflectivity * factor)


def box_blur(image: np.ndarray, size: int = 5) -> np.ndarray:
    """Box filter over the last two axes with edge replication."""
    sizes = (1,) * (image.ndim - 2) + (size, size)
    return ndimage.uniform_filter(image, size=sizes, mode="nearest")


def add_haze(stack: SubApertureStack, patch_rect, attenuation: float, *, blur: bool = True) -> SubApertureStack:
    """Attenuate and box-blur a rectangular patch ``(row0, col0, row1, col1)``.

    The whole attenuated image is blurred with a 5x5 box (edge replicated) and
    only the patch pixels are taken from the blurred result.
    """
    if not 0.0 < attenuation <= 1.0:
        raise ValueError("attenuation must lie in (0, 1]")
    r0, c0, r1, c1 = (int(v) for v in patch_rect)
    H, W = stack.shape
    if not (0 <= r0 < r1 <= H and 0 <= c0 < c1 <= W):
        raise ValueError(f"patch {patch_rect} is not inside the {H}x{W} image")
    scaled = stack.reflectivity.copy()
    scaled[:, r0:r1, c0:c1] *= attenuation
    if not blur:
        return stack.replace(scaled)
    out = stack.reflectivity.copy()
    out[:, r0:r1, c0:c1] = box_blur(scaled)[:, r0:r1, c0:c1]
    return stack.replace(out)


# ---------------------------------------------------------------------------
# image-level geometric augmentation


@dataclass(frozen=True)
class AugmentPolicy:
    """Geometric transform applied identically to an image and its mask.

    Rotation is counter-clockwise in degrees; translation is (rows, cols);
    scale is isotropic about the image center. The transform is applied as
    scale, then rotation, then translation.
    """

    translate: tuple[float, float] | None = None
    rotate: float | None = None
    scale: float | None = None

    def __post_init__(self):
        if self.scale is not None and self.scale <= 0:
            raise ValueError("scale factor must be positive")

    def inverse(self) -> "AugmentPolicy":
        return AugmentPolicy(
            translate=None if self.translate is None else (-self.translate[0], -self.translate[1]),
            rotate=None if self.rotate is None else -self.rotate,
            scale=None if self.scale is None else 1.0 / self.scale)

    @property
    def is_identity(self) -> bool:
        return not any([
            self.translate is not None and any(self.translate),
            self.rotate is not None and self.rotate % 360 != 0,
            self.scale is not None and self.scale != 1.0])


def random_policy(rng: np.random.Generator, *, max_shift: float = 6, max_rotate: float = 180,
                  scale_range: tuple[float, float] = (0.9, 1.1)) -> AugmentPolicy:
    return AugmentPolicy(
        translate=(int(rng.integers(-max_shift, max_shift + 1)), int(rng.integers(-max_shift, max_shift + 1))),
        rotate=float(rng.uniform(-max_rotate, max_rotate)),
        scale=float(rng.uniform(*scale_range)))


def _forward_matrix(policy: AugmentPolicy) -> np.ndarray:
    # maps centered (row, col) input coords to output coords
    s = 1.0 if policy.scale is None else policy.scale
    t = math.radians(policy.rotate or 0.0)
    # counter-clockwise on screen with rows pointing down
    rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    to_xy = np.array([[0.0, 1.0], [-1.0, 0.0]])
    return to_xy.T @ rot @ to_xy * s


def _warp_plane(plane: np.ndarray, policy: AugmentPolicy, order: int) -> np.ndarray:
    H, W = plane.shape
    rot = policy.rotate or 0.0
    if policy.scale in (None, 1.0) and rot % 90 == 0:
        out = np.rot90(plane, k=int(rot // 90) % 4) if H == W or rot % 180 == 0 else None
        if out is not None:
            dr, dc = policy.translate or (0, 0)
            if float(dr).is_integer() and float(dc).is_integer():
                return _integer_shift(out, int(dr), int(dc))
    A = _forward_matrix(policy)
    Ainv = np.linalg.inv(A)
    ctr = np.array([(H - 1) / 2, (W - 1) / 2])
    shift = np.asarray(policy.translate or (0.0, 0.0), dtype=np.float64)
    # input = Ainv @ (output - ctr - shift) + ctr
    offset = ctr - Ainv @ (ctr + shift)
    return ndimage.affine_transform(plane, Ainv, offset=offset, order=order, mode="constant", cval=0.0)


def _integer_shift(a: np.ndarray, dr: int, dc: int) -> np.ndarray:
    out = np.zeros_like(a)
    H, W = a.shape
    rs, rd = (slice(0, H - dr), slice(dr, H)) if dr >= 0 else (slice(-dr, H), slice(0, H + dr))
    cs, cd = (slice(0, W - dc), slice(dc, W)) if dc >= 0 else (slice(-dc, W), slice(0, W + dc))
    out[rd, cd] = a[rs, cs]
    return out


def augment(image, mask: np.ndarray, policy: AugmentPolicy, cfg=None, *, rotate_hue: bool = True):
    """Apply one geometric transform to a CSAS image and its mask.

    Rotations also shift the hue wheel by the rotation angle, since rotating
    the scene rotates every ensonification direction by the same amount
    (disable with ``rotate_hue=False`` for images whose hue is ordinary color).
    Image channels are resampled bilinearly in the circular (s cos h, s sin h, v)
    embedding; the mask uses nearest-neighbour resampling and stays binary.
    """
    from .aspect_color import CsasImage, embedding_to_hsv, hsv_embedding, shift_hue_degrees

    if policy.is_identity:
        return CsasImage(image.hsv.copy()), mask.copy()
    emb = hsv_embedding(image.hsv)
    warped = np.stack([_warp_plane(emb[..., c], policy, order=1) for c in range(3)], axis=-1)
    out = CsasImage(embedding_to_hsv(warped))
    if policy.rotate and rotate_hue:
        out = shift_hue_degrees(out, policy.rotate, cfg)
    new_mask = (_warp_plane(mask.astype(np.float64), policy, order=0) > 0.5).astype(mask.dtype)
    return out, new_mask
