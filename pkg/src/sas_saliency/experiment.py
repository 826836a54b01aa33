"""Glue from an :class:`ExperimentConfig` to datasets, models, training and reports.

Also hosts multi-survey inference and the directional trend study that
compares the full network against single-branch variants, multi-view
aggregation against one view, and the compressed colormap against the default.
"""
from __future__ import annotations

import dataclasses
import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .aspect_color import ColorMapConfig, CsasImage, compressed_colormap
from .config import ExperimentConfig, derive_seed
from .data import SaliencyDataset, build_generic_dataset, build_sonar_dataset, load_image_mask_dir
from .evalpost import MetricsReport, evaluate_maps
from .flow import DESK_FLOW, LFN, FlowField, aggregate_multi, estimate_flow, make_flow_dataset, train_flow
from .model import MBCEDN, ModelConfig, small_model_config
from .train import Stage, TrainConfig, TrainResult, attach_weak_maps, predict, split_indices, train_loop

ABLATION_TOGGLES = ("use_supervised_branch", "use_unsupervised_branch", "use_parsing", "use_multi_image")


def colormap_for(cfg: ExperimentConfig) -> ColorMapConfig:
    return compressed_colormap() if cfg.colormap == "compressed" else ColorMapConfig()


def model_config(cfg: ExperimentConfig) -> ModelConfig:
    kw = dict(use_supervised_branch=cfg.use_supervised_branch, use_unsupervised_branch=cfg.use_unsupervised_branch,
              use_parsing=cfg.use_parsing)
    return small_model_config(**kw) if cfg.width == "small" else ModelConfig(**kw)


def make_model(cfg: ExperimentConfig, seed: int | None = None) -> MBCEDN:
    torch.manual_seed(derive_seed(cfg.seed if seed is None else seed, "model_init"))
    return MBCEDN(model_config(cfg))


def train_config(cfg: ExperimentConfig, seed: int | None = None) -> TrainConfig:
    return TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr, ridge=cfg.ridge,
                       patience=cfg.patience, augment=cfg.augment, fusion_rounds=cfg.fusion_rounds,
                       fusion_epochs=cfg.fusion_epochs, replace_count=cfg.replace_count,
                       superpixels=cfg.superpixels, seed=derive_seed(cfg.seed if seed is None else seed, "train"))


def build_dataset(cfg: ExperimentConfig) -> SaliencyDataset:
    return build_sonar_dataset(cfg.n_scenes, derive_seed(cfg.seed, "scenes"), size=cfg.size,
                               num_apertures=cfg.num_apertures, num_views=cfg.num_views,
                               colormap=colormap_for(cfg), speckle=cfg.speckle, haze_prob=cfg.haze_prob,
                               jitter=cfg.view_jitter)


def pretrain_dataset(cfg: ExperimentConfig) -> SaliencyDataset | None:
    if cfg.pretrain_epochs <= 0:
        return None
    if cfg.pretrain_dir:
        return load_image_mask_dir(cfg.pretrain_dir, size=cfg.size)
    return build_generic_dataset(cfg.pretrain_size, derive_seed(cfg.seed, "generic"), size=cfg.size)


def train_flow_model(cfg: ExperimentConfig, log=None) -> tuple[LFN, tuple, list[float]]:
    """Train the desk-scale flow network on synthetic pairs.

    Returns the model, a held-out set of 100 pairs and the per-epoch losses.
    """
    torch.manual_seed(derive_seed(cfg.seed, "flow_init"))
    model = LFN(DESK_FLOW)
    data = make_flow_dataset(cfg.flow_pairs, derive_seed(cfg.seed, "flow_train"), size=cfg.flow_size)
    history = train_flow(model, data, epochs=cfg.flow_epochs, seed=derive_seed(cfg.seed, "flow_order"), log=log)
    held_out = make_flow_dataset(100, derive_seed(cfg.seed, "flow_test"), size=cfg.flow_size)
    return model, held_out, history


# ---------------------------------------------------------------------------
# multi-survey inference


def view_flows(views: Sequence[CsasImage], flow_model: LFN | None = None,
               offsets: np.ndarray | None = None) -> list[FlowField | None]:
    """Per view, the field that warps it into the reference (first) view's frame.

    With a flow model the fields are estimated from the images; otherwise the
    known survey offsets give constant fields.
    """
    out: list[FlowField | None] = [None]
    shape = views[0].shape
    for n in range(1, len(views)):
        if flow_model is not None:
            out.append(estimate_flow(views[0], views[n], flow_model))
        elif offsets is not None:
            d = np.asarray(offsets[n], dtype=np.float64) - np.asarray(offsets[0], dtype=np.float64)
            out.append(FlowField(np.full(shape, d[1]), np.full(shape, d[0])))
        else:
            raise ValueError("need a flow model or the survey offsets")
    return out


def multi_view_predict(model: MBCEDN, ds: SaliencyDataset, flow_model: LFN | None = None, tau: float = 0.0,
                       map_key: str = "saliency") -> np.ndarray:
    """Saliency per scene in the reference frame, aggregated over all of its views."""
    if ds.views is None:
        return predict(model, ds.network_input())[map_key]
    V = ds.num_views
    H, W = ds.hsv.shape[1:3]
    stacked = np.concatenate([ds.hsv[:, None], ds.views], axis=1).reshape(-1, H, W, 3)
    x = torch.from_numpy(np.stack([CsasImage(h).to_network() for h in stacked]))
    maps = predict(model, x)[map_key].reshape(len(ds), V, H, W)
    out = []
    for i in range(len(ds)):
        views = ds.view_images(i)
        flows = view_flows(views, flow_model, None if ds.view_offsets is None else ds.view_offsets[i])
        out.append(aggregate_multi(list(maps[i]), flows, views[0], views, tau=tau))
    return np.stack(out)


# ---------------------------------------------------------------------------
# single trials and the ablation matrix


@dataclass
class TrialOutcome:
    config: ExperimentConfig
    result: TrainResult
    split: tuple[np.ndarray, np.ndarray, np.ndarray]
    reports: dict[str, MetricsReport] = field(default_factory=dict)


def run_trial(cfg: ExperimentConfig, dataset: SaliencyDataset | None = None, *, flow_model: LFN | None = None,
              history_path=None, log=None) -> TrialOutcome:
    """Split, (optionally pretrain and) train, then evaluate the test partition.

    Reports cover the final map, each enabled branch and, when the dataset
    holds several views and ``use_multi_image`` is set, multi-view aggregation.
    """
    ds = dataset if dataset is not None else build_dataset(cfg)
    if cfg.use_unsupervised_branch and ds.weak_raw is None:
        attach_weak_maps(ds, superpixels=cfg.superpixels)
    tr, va, te = split_indices(len(ds), derive_seed(cfg.seed, "split"))
    model = make_model(cfg)
    tcfg = train_config(cfg)
    stages = []
    generic = pretrain_dataset(cfg)
    if generic is not None:
        ptr, pva, _ = split_indices(len(generic), derive_seed(cfg.seed, "pretrain_split"))
        stages.append(Stage("pretrain_generic", generic.subset(ptr), generic.subset(pva), cfg.pretrain_epochs))
    stages.append(Stage("finetune_sonar", ds.subset(tr), ds.subset(va), cfg.epochs))
    result = train_loop(model, stages, tcfg, history_path=history_path, log=log)
    test = ds.subset(te)
    ev = lambda maps: evaluate_maps(maps, test.masks, test.kinds, cfg.min_area_frac, cfg.morph_radius)
    reports = {k: ev(v) for k, v in predict(model, test.network_input()).items()}
    if cfg.use_multi_image and test.views is not None:
        reports["multi_view"] = ev(multi_view_predict(model, test, flow_model, cfg.aggregation_tau))
    return TrialOutcome(cfg, result, (tr, va, te), reports)


def ablation_grid(base: ExperimentConfig, toggles: Sequence[str]) -> list[tuple[dict, ExperimentConfig | None]]:
    """Cartesian product of on/off values for the named toggles.

    Each row is (toggle values, config); rows that disable both branches keep
    their place with a config of None so the table stays a full product.
    """
    for t in toggles:
        if t not in ABLATION_TOGGLES:
            raise ValueError(f"unknown ablation toggle {t!r}")
    rows = []
    for values in itertools.product((True, False), repeat=len(toggles)):
        kw = dict(zip(toggles, values))
        valid = (kw.get("use_supervised_branch", base.use_supervised_branch)
                 or kw.get("use_unsupervised_branch", base.use_unsupervised_branch))
        rows.append((kw, base.replace(**kw) if valid else None))
    return rows


# ---------------------------------------------------------------------------
# directional trend study


@dataclass
class TrendResult:
    """Per-seed test AIOU for each variant, and the margins between them."""

    aiou: dict[str, list[float]]

    def mean(self, key: str) -> float:
        return float(np.mean(self.aiou[key]))

    def margins(self) -> dict[str, float]:
        m = self.mean
        return {"full_minus_best_single": m("full") - max(m("sup_only"), m("unsup_only")),
                "multi_minus_single_view": m("multi_view") - m("full"),
                "default_minus_compressed": m("full") - m("compressed")}


def trend_config(seed: int, **overrides) -> ExperimentConfig:
    """Desk-scale setting of the trend study: 200 scenes, 3 views, no pretraining."""
    base = ExperimentConfig(seed=seed, n_scenes=200, num_views=3, epochs=20, batch_size=8, lr=2e-3,
                            fusion_rounds=3, fusion_epochs=3, pretrain_epochs=0, use_multi_image=True)
    return base.replace(**overrides)


def trend_study(seeds: Sequence[int] = (0, 1, 2), flow_model: LFN | None = None, log: Callable | None = None,
                **overrides) -> TrendResult:
    aiou: dict[str, list[float]] = {k: [] for k in ("full", "sup_only", "unsup_only", "multi_view", "compressed")}
    for seed in seeds:
        cfg = trend_config(seed, **overrides)
        ds = build_dataset(cfg)
        full = run_trial(cfg, ds, flow_model=flow_model)
        aiou["full"].append(full.reports["saliency"].AIOU)
        aiou["multi_view"].append(full.reports["multi_view"].AIOU)
        for key, toggle in (("sup_only", "use_unsupervised_branch"), ("unsup_only", "use_supervised_branch")):
            aiou[key].append(run_trial(cfg.replace(**{toggle: False}, use_multi_image=False), ds)
                             .reports["saliency"].AIOU)
        comp = cfg.replace(colormap="compressed", use_multi_image=False)
        aiou["compressed"].append(run_trial(comp, build_dataset(comp)).reports["saliency"].AIOU)
        if log:
            log(f"seed {seed}: " + ", ".join(f"{k} {v[-1]:.3f}" for k, v in aiou.items()))
    return TrendResult(aiou)
