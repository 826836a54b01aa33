"""Full dual-branch network: encoder, two decoders, merge and parsing."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .decoders import SDN13, BranchOutput, DecoderConfig, StructuredMerge, skip_channel_map
from .encoder import Encoder, EncoderConfig
from .refine import DeepParsing, ParsingConfig

SMALL_ENCODER = EncoderConfig(channels=(8, 16, 32, 32, 32), side_channels=8)
SMALL_DECODER = DecoderConfig(widths=(32, 32, 16, 8, 8, 8))


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    parsing: ParsingConfig = field(default_factory=ParsingConfig)
    merge_window: int = 5
    use_supervised_branch: bool = True
    use_unsupervised_branch: bool = True
    use_parsing: bool = True

    def __post_init__(self):
        if not (self.use_supervised_branch or self.use_unsupervised_branch):
            raise ValueError("at least one decoder branch must be enabled")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        def tup(x):
            return tuple(tup(v) for v in x) if isinstance(x, list) else x

        return cls(encoder=EncoderConfig(**{k: tup(v) for k, v in d["encoder"].items()}),
                   decoder=DecoderConfig(**{k: tup(v) for k, v in d["decoder"].items()}),
                   parsing=ParsingConfig(**d["parsing"]),
                   **{k: v for k, v in d.items() if k not in ("encoder", "decoder", "parsing")})


SMALL_PARSING = ParsingConfig(window=5)


def small_model_config(**kw) -> ModelConfig:
    """Half-width network with a 5 x 5 parsing window, for fast runs on one CPU core."""
    return ModelConfig(encoder=SMALL_ENCODER, decoder=SMALL_DECODER, parsing=SMALL_PARSING, **kw)


@dataclass
class ModelOutput:
    sup: BranchOutput | None
    unsup: BranchOutput | None
    merged: torch.Tensor       # pre-parsing foreground map, N x 1 x H x W
    saliency: torch.Tensor     # final map after parsing
    gate: torch.Tensor | None


class MBCEDN(nn.Module):
    """Encoder with a supervised and an unsupervised decoder branch.

    In training mode the unsupervised branch sees detached encoder features and
    the merge/parse stage sees detached branch outputs, so a sum of the three
    losses (supervised, fusion-supervised, final) routes each one only to its
    own parameters in a single backward pass.
    """

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = cfg = config or ModelConfig()
        self.encoder = Encoder(cfg.encoder)
        cin = cfg.encoder.out_channels
        self.sup = SDN13(cin, cfg.decoder) if cfg.use_supervised_branch else None
        self.unsup = (SDN13(cin, cfg.decoder, skip_channel_map(cfg.encoder, cfg.decoder), cfg.decoder.extra_layers_unsup)
                      if cfg.use_unsupervised_branch else None)
        self.merge = StructuredMerge(cfg.merge_window)
        self.parse = DeepParsing(cfg.parsing)
        self.skip_sources = dict(cfg.decoder.skip_sources)

    def forward(self, x: torch.Tensor, route_gradients: bool = True) -> ModelOutput:
        """Forward pass. ``route_gradients`` inserts the detaches described above."""
        cfg = self.config
        feats = self.encoder(x)
        sup = self.sup(feats.stacked) if self.sup is not None else None
        unsup = None
        if self.unsup is not None:
            # without a supervised branch the fusion loss has to train the encoder
            cut_enc = route_gradients and self.sup is not None
            stacked = feats.stacked.detach() if cut_enc else feats.stacked
            skips = {d: (feats.intermediates[e - 1].detach() if cut_enc else feats.intermediates[e - 1])
                     for d, e in self.skip_sources.items()}
            unsup = self.unsup(stacked, skips)
        cut = (lambda t: t.detach()) if route_gradients else (lambda t: t)
        gate = None
        if sup is not None and unsup is not None:
            merged, _, gate = self.merge(cut(sup.foreground), cut(unsup.foreground), x)
        else:
            merged = cut((sup or unsup).foreground)
        saliency = self.parse(merged, x) if cfg.use_parsing else merged
        return ModelOutput(sup, unsup, merged, saliency, gate)

    def param_groups(self) -> dict[str, list[nn.Parameter]]:
        """Parameters trained by each loss."""
        enc = list(self.encoder.parameters())
        groups = {"sup": [], "unsup": [], "final": []}
        if self.sup is not None:
            groups["sup"] = enc + list(self.sup.parameters())
        if self.unsup is not None:
            groups["unsup"] = list(self.unsup.parameters()) + ([] if self.sup is not None else enc)
        if self.sup is not None and self.unsup is not None:
            groups["final"] += list(self.merge.parameters())
        if self.config.use_parsing:
            groups["final"] += list(self.parse.parameters())
        return groups


def namespaced_state(model: MBCEDN) -> dict[str, torch.Tensor]:
    """State dict with checkpoint namespaces ``encoder/``, ``sup/``, ``unsup/``, ``merge/``, ``parse/``."""
    out = {}
    for key, value in model.state_dict().items():
        head, _, rest = key.partition(".")
        out[f"{head}/{rest}"] = value
    return out


def load_namespaced_state(model: MBCEDN, state: dict[str, torch.Tensor]) -> None:
    model.load_state_dict({k.replace("/", ".", 1): v for k, v in state.items()})
