"""Experiment configuration as flat ``key = value`` text, and seed derivation."""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    # data
    n_scenes: int = 200
    size: int = 64
    num_apertures: int = 36
    num_views: int = 1
    colormap: str = "default"
    speckle: float = 0.25
    haze_prob: float = 0.3
    view_jitter: int = 3
    # network and ablation toggles
    width: str = "small"
    use_supervised_branch: bool = True
    use_unsupervised_branch: bool = True
    use_parsing: bool = True
    use_multi_image: bool = False
    # optimisation
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    ridge: float = 1e-4
    patience: int = 10
    augment: bool = True
    # supervision by fusion
    fusion_rounds: int = 3
    fusion_epochs: int = 5
    replace_count: int = 1
    superpixels: int = 64
    # generic pretraining stage
    pretrain_epochs: int = 5
    pretrain_size: int = 200
    pretrain_dir: str = ""
    # protocol
    monte_carlo_trials: int = 1
    # flow network
    flow_pairs: int = 2000
    flow_epochs: int = 30
    flow_size: int = 32
    aggregation_tau: float = 0.0
    # detection post-processing
    min_area_frac: float = 0.002
    morph_radius: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not (self.use_supervised_branch or self.use_unsupervised_branch):
            raise ConfigError("at least one decoder branch must be enabled")
        if self.num_views < 1:
            raise ConfigError("num_views must be >= 1")
        if self.colormap not in ("default", "compressed"):
            raise ConfigError(f"unknown colormap {self.colormap!r}")
        if self.width not in ("small", "full"):
            raise ConfigError(f"unknown width {self.width!r}")
        if self.size % 8:
            raise ConfigError("size must be divisible by 8")
        if self.ridge < 0:
            raise ConfigError("ridge weight must be >= 0")
        if self.n_scenes < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("n_scenes, batch_size must be positive and epochs >= 0")

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        types = typing.get_type_hints(cls)
        known = {f.name for f in fields(cls)}
        values = {}
        for n, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"line {n}: unknown key {key!r}")
            values[key] = _parse(val, types[key], key)
        try:
            return cls(**values)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    def digest(self) -> str:
        from .io import config_digest

        return config_digest(dataclasses.asdict(self))


def _parse(val: str, typ, key: str):
    try:
        if typ is bool:
            if val.lower() in ("true", "1", "yes"):
                return True
            if val.lower() in ("false", "0", "no"):
                return False
            raise ValueError(val)
        if typ is int:
            return int(val)
        if typ is float:
            return float(val)
        return val
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {val!r} as {typ.__name__}") from None


def derive_seed(root: int, label: str) -> int:
    """Independent 32-bit seed for a named consumer of randomness."""
    ss = np.random.SeedSequence(entropy=int(root), spawn_key=tuple(label.encode()))
    return int(ss.generate_state(1)[0])
