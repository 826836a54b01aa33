"""On-disk formats: scene directories, tensor containers and checkpoints.

Tensor container: a ``.npz`` archive whose arrays are stored little-endian
(float32 for real data) plus a ``__meta__`` entry holding UTF-8 JSON with a
format version. Checkpoints add a sha256 digest of the model config and refuse
to load when the digest does not match the expected config.
"""
from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
# fixed member timestamp so identical content gives identical bytes
_ZIP_TIME = (1980, 1, 1, 0, 0, 0)


class DigestMismatch(ValueError):
    pass


class MalformedDataset(ValueError):
    pass


def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=list).encode()
    return hashlib.sha256(blob).hexdigest()


def _le(a: np.ndarray, float64: bool = False) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype.kind == "f":
        return a.astype("<f8" if float64 else "<f4")
    if a.dtype.kind in "iu" and a.dtype.itemsize > 1:
        return a.astype(a.dtype.newbyteorder("<"))
    return a


def save_container(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None,
                   float64: bool = False) -> None:
    """Write an ``.npz``-compatible archive; floats are float32 unless ``float64``."""
    meta = {"format_version": FORMAT_VERSION, **(meta or {})}
    payload = {k: _le(v, float64) for k, v in arrays.items()}
    payload["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(payload):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(payload[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=_ZIP_TIME), buf.getvalue())


def load_container(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as data:
        if "__meta__" not in data:
            raise MalformedDataset(f"{path}: missing metadata entry")
        meta = json.loads(bytes(data["__meta__"]).decode())
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
    if meta.get("format_version") != FORMAT_VERSION:
        raise MalformedDataset(f"{path}: unsupported format version {meta.get('format_version')}")
    return arrays, meta


# ---------------------------------------------------------------------------
# scenes


def save_stack(path, stack) -> None:
    save_container(path, {"reflectivity": stack.reflectivity, "center_angles": stack.center_angles},
                   {"kind": "sub_aperture_stack", "shape": list(stack.reflectivity.shape)})


def load_stack(path):
    from .scene import SubApertureStack

    arrays, meta = load_container(path)
    if meta.get("kind") != "sub_aperture_stack" or "reflectivity" not in arrays:
        raise MalformedDataset(f"{path}: not a sub-aperture stack")
    r = arrays["reflectivity"].astype(np.float64)
    if list(r.shape) != meta.get("shape"):
        raise MalformedDataset(f"{path}: shape header disagrees with data")
    return SubApertureStack(r, arrays["center_angles"].astype(np.float64))


def save_mask(path, mask: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path)


def load_mask(path) -> np.ndarray:
    from PIL import Image

    m = np.asarray(Image.open(path).convert("L"))
    return (m > 127).astype(np.uint8)


def save_png(path, image: np.ndarray) -> None:
    """Write a [0, 1] gray or RGB array as an 8-bit PNG."""
    from PIL import Image

    Image.fromarray((np.clip(image, 0, 1) * 255).round().astype(np.uint8)).save(path)


def write_scene(directory, stacks, mask, spec) -> None:
    """Scene directory: ``stack.npz`` (or ``stack_v{n}.npz`` per view), ``mask.png`` for
    each view and ``spec.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    if not isinstance(stacks, (list, tuple)):
        stacks, mask = [stacks], [mask]
    for v, (stack, m) in enumerate(zip(stacks, mask)):
        suffix = "" if v == 0 else f"_v{v}"
        save_stack(d / f"stack{suffix}.npz", stack)
        save_mask(d / f"mask{suffix}.png", m)
    (d / "spec.json").write_text(spec if isinstance(spec, str) else json.dumps(spec, indent=2, sort_keys=True))


def read_scene(directory):
    """Returns (stacks, masks, spec dict) over all views of a scene directory."""
    d = Path(directory)
    if not (d / "stack.npz").exists() or not (d / "mask.png").exists() or not (d / "spec.json").exists():
        raise MalformedDataset(f"{d}: missing stack.npz, mask.png or spec.json")
    stacks, masks = [load_stack(d / "stack.npz")], [load_mask(d / "mask.png")]
    v = 1
    while (d / f"stack_v{v}.npz").exists():
        stacks.append(load_stack(d / f"stack_v{v}.npz"))
        masks.append(load_mask(d / f"mask_v{v}.png"))
        v += 1
    for s, m in zip(stacks, masks):
        if s.shape != m.shape:
            raise MalformedDataset(f"{d}: mask and stack differ in size")
    try:
        spec = json.loads((d / "spec.json").read_text())
    except json.JSONDecodeError as exc:
        raise MalformedDataset(f"{d}: bad spec.json ({exc})") from exc
    return stacks, masks, spec


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model, extra: dict | None = None) -> str:
    """Write model weights and config; returns the config digest."""
    from .model import namespaced_state

    cfg = model.config.to_dict()
    digest = config_digest(cfg)
    arrays = {k: v.detach().cpu().numpy() for k, v in namespaced_state(model).items()}
    # keep integer buffers (BN batch counters) exact, weights as float32
    save_container(path, arrays, {"kind": "checkpoint", "config": cfg, "config_digest": digest, **(extra or {})})
    return digest


def load_checkpoint(path, expected_config=None):
    """Rebuild a model from a checkpoint.

    With ``expected_config`` (a ModelConfig) the stored digest must match it.
    """
    import torch

    from .model import MBCEDN, ModelConfig, load_namespaced_state

    arrays, meta = load_container(path)
    if meta.get("kind") != "checkpoint":
        raise MalformedDataset(f"{path}: not a checkpoint")
    stored = meta["config_digest"]
    if config_digest(meta["config"]) != stored:
        raise DigestMismatch(f"{path}: stored config does not match its digest")
    if expected_config is not None and config_digest(expected_config.to_dict()) != stored:
        raise DigestMismatch(f"{path}: checkpoint was written for a different config")
    model = MBCEDN(ModelConfig.from_dict(meta["config"]))
    ref = model.state_dict()
    state = {}
    for k, v in arrays.items():
        key = k.replace("/", ".", 1)
        state[k] = torch.from_numpy(np.ascontiguousarray(v)).to(ref[key].dtype)
    load_namespaced_state(model, state)
    return model, meta
