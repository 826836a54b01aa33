"""Losses, the staged training loop, early stopping and Monte Carlo trials.

Both objectives are minimized: mean-over-images of the per-pixel cross-entropy
summed over pixels, plus a ridge penalty ``lam * ||theta||^2`` on the
parameters the loss trains.

* supervised: ``(1/n) sum_ij CE(omega_ij, psi_ij)``
* unsupervised: ``(1/n) sum_ij gamma_i beta_ij [CE(kappa_ij, psi_ij) + CE(pi_ij, psi_ij)]``

with ``CE(t, p) = -(t log p + (1 - t) log(1 - p))`` and ``psi`` clamped to
``[eps, 1 - eps]``.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .config import derive_seed
from .data import SaliencyDataset
from .detectors import BUILTIN_DETECTORS, run_detectors
from .evalpost import MetricsReport, aggregate_reports, evaluate_maps
from .fusion import (FusionMaps, GladState, WeakMapSet, build_fusion_maps, confidence_weights, glad_em,
                     replace_lowest_reliability, superpixelize)
from .model import MBCEDN
from .scene import augment, random_policy, _warp_plane

EPS = 1e-7


# ---------------------------------------------------------------------------
# losses


def check_finite(pred: torch.Tensor, name: str = "predictions") -> None:
    bad = ~torch.isfinite(pred)
    if bool(bad.any()):
        raise FloatingPointError(f"{name}: {int(bad.sum())} of {pred.numel()} values are not finite")


def _flat(x: torch.Tensor, n: int) -> torch.Tensor:
    return x.reshape(n, -1)


def cross_entropy(target: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    return -(target * torch.log(p) + (1 - target) * torch.log1p(-p))


def ridge(params: Iterable[torch.Tensor]) -> torch.Tensor:
    terms = [p.pow(2).sum() for p in params]
    return torch.stack(terms).sum() if terms else torch.zeros(())


def supervised_loss(pred: torch.Tensor, mask: torch.Tensor, lam: float = 1e-4,
                    params: Iterable[torch.Tensor] = (), eps: float = EPS) -> torch.Tensor:
    """Pixel cross-entropy against a binary mask plus the ridge term."""
    check_finite(pred)
    n = pred.shape[0]
    p = _flat(pred, n).clamp(eps, 1 - eps)
    data = cross_entropy(_flat(mask.to(p.dtype), n), p).sum() / n
    return data + lam * ridge(params).to(p.dtype) if lam else data


def unsupervised_loss(pred: torch.Tensor, kappa: torch.Tensor, pi: torch.Tensor, weights: torch.Tensor,
                      lam: float = 1e-4, params: Iterable[torch.Tensor] = (), eps: float = EPS) -> torch.Tensor:
    """Confidence-weighted cross-entropy against the local and global fusion maps."""
    check_finite(pred)
    n = pred.shape[0]
    p = _flat(pred, n).clamp(eps, 1 - eps)
    k, g, w = (_flat(t.to(p.dtype), n) for t in (kappa, pi, weights))
    data = (w * (cross_entropy(k, p) + cross_entropy(g, p))).sum() / n
    return data + lam * ridge(params).to(p.dtype) if lam else data


# ---------------------------------------------------------------------------
# protocol helpers


def early_stop_epoch(val_losses: Sequence[float], patience: int = 10) -> int | None:
    """First 1-indexed epoch at which the loss has risen ``patience`` epochs in a row."""
    run = 0
    for t in range(1, len(val_losses)):
        run = run + 1 if val_losses[t] > val_losses[t - 1] else 0
        if run >= patience:
            return t + 1
    return None


class EarlyStopping:
    """Stateful form of :func:`early_stop_epoch` that also tracks the best epoch."""

    def __init__(self, patience: int = 10):
        self.patience = patience
        self.history: list[float] = []
        self.best = float("inf")
        self.best_epoch = 0

    def update(self, val_loss: float) -> bool:
        self.history.append(float(val_loss))
        if val_loss < self.best:
            self.best, self.best_epoch = float(val_loss), len(self.history)
        return early_stop_epoch(self.history, self.patience) == len(self.history)

    @property
    def improved(self) -> bool:
        return self.best_epoch == len(self.history)


def split_indices(n: int, seed: int, fractions=(0.70, 0.15, 0.15)) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Seeded permutation cut into train/val/test; train and val sizes are rounded."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    parts = perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]
    if any(len(p) == 0 for p in parts):
        raise ValueError(f"split of {n} items leaves an empty partition")
    return parts


# ---------------------------------------------------------------------------
# configuration and state


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    ridge: float = 1e-4
    patience: int = 10
    augment: bool = True
    fusion_rounds: int = 3
    fusion_epochs: int = 5
    replace_count: int = 1
    superpixels: int = 64
    detectors: tuple[str, ...] = tuple(BUILTIN_DETECTORS)
    seed: int = 0


@dataclass
class Stage:
    name: str
    train: SaliencyDataset
    val: SaliencyDataset
    epochs: int


@dataclass
class FusionState:
    weak: WeakMapSet
    glad_local: GladState
    glad_global: GladState
    maps: FusionMaps
    confidence: np.ndarray


def attach_weak_maps(ds: SaliencyDataset, detectors=tuple(BUILTIN_DETECTORS), superpixels: int = 64) -> SaliencyDataset:
    """Compute weak maps and superpixels once and cache them on the dataset."""
    raw, sps = [], []
    for i in range(len(ds)):
        img = ds.image(i)
        raw.append(run_detectors(img, detectors))
        sps.append(superpixelize(img, superpixels).labels)
    ds.weak_raw, ds.superpixels = np.stack(raw), np.stack(sps)
    return ds


def weak_maps_for(ds: SaliencyDataset, cfg: TrainConfig) -> WeakMapSet:
    if ds.weak_raw is None or ds.superpixels is None:
        attach_weak_maps(ds, cfg.detectors, cfg.superpixels)
    return WeakMapSet.from_raw(ds.weak_raw, list(ds.superpixels), list(cfg.detectors))


def compute_fusion(weak: WeakMapSet) -> FusionState:
    local = glad_em(weak, "local")
    glob = glad_em(weak, "global")
    return FusionState(weak, local, glob, build_fusion_maps(weak, local, glob),
                       confidence_weights(local, glob, weak.superpixels))


@torch.no_grad()
def predict(model: MBCEDN, images: torch.Tensor, batch_size: int = 64) -> dict[str, np.ndarray]:
    """Eval-mode maps, each N x H x W: final ``saliency``, ``merged``, and the branch foregrounds."""
    was = model.training
    model.eval()
    out: dict[str, list] = {"saliency": [], "merged": [], "sup": [], "unsup": []}
    try:
        for s in range(0, images.shape[0], batch_size):
            o = model(images[s:s + batch_size])
            out["saliency"].append(o.saliency[:, 0])
            out["merged"].append(o.merged[:, 0])
            if o.sup is not None:
                out["sup"].append(o.sup.foreground[:, 0])
            if o.unsup is not None:
                out["unsup"].append(o.unsup.foreground[:, 0])
    finally:
        model.train(was)
    return {k: torch.cat(v).double().numpy() for k, v in out.items() if v}


def _augment_batch(ds: SaliencyDataset, idx, targets: Sequence[np.ndarray], rng: np.random.Generator):
    """Random translation/rotation/scale applied to images, masks and target maps alike.

    The hue wheel turns with the image only when hue encodes aspect through an
    invertible colormap; compressed maps cannot be rotated back to angles.
    """
    turn_hue = ds.hue_is_aspect and ds.colormap.is_bijective
    images, masks, outs = [], [], [[] for _ in targets]
    for i in idx:
        pol = random_policy(rng, max_shift=4, max_rotate=180, scale_range=(0.9, 1.1))
        img, m = augment(ds.image(i), ds.masks[i], pol, ds.colormap, rotate_hue=turn_hue)
        images.append(img.to_network())
        masks.append(m)
        for o, t in zip(outs, targets):
            o.append(np.clip(_warp_plane(t[i], pol, order=1), 0, 1))
    return np.stack(images), np.stack(masks), [np.stack(o) for o in outs]


@dataclass
class TrainResult:
    model: MBCEDN
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int | None = None
    fusion: FusionState | None = None


# ---------------------------------------------------------------------------
# training


def fusion_round(weak: WeakMapSet, model: MBCEDN, images: torch.Tensor, cfg: TrainConfig,
                 train_epochs: Callable[[FusionState, int], bool]) -> tuple[WeakMapSet, FusionState, bool]:
    """One outer round: GLAD + fusion maps, E training epochs, then replacement.

    Returns the weak maps for the next round, the state used in this round,
    and whether training asked to stop.
    """
    state = compute_fusion(weak)
    stop = train_epochs(state, cfg.fusion_epochs)
    new = weak
    if cfg.replace_count > 0 and model.unsup is not None:
        new = replace_lowest_reliability(weak, state.glad_global, predict(model, images)["unsup"], cfg.replace_count)
    return new, state, stop


def train_loop(model: MBCEDN, stages: Sequence[Stage], cfg: TrainConfig, history_path: str | Path | None = None,
               log: Callable[[str], None] | None = None) -> TrainResult:
    """Run the stages in order (e.g. generic pretraining, then sonar fine-tuning).

    Within a stage each epoch shuffles, augments and steps Adam on the sum of
    the supervised, fusion and final-output losses. The validation loss is the
    supervised loss of the final map. A stage ends after its epoch budget or
    when the validation loss has risen ``patience`` epochs in a row, and the
    best-validation weights are restored before the next stage.
    """
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    groups = model.param_groups()
    opt = torch.optim.Adam([p for g in groups.values() for p in g], lr=cfg.lr)
    result = TrainResult(model)
    hist_fh = open(history_path, "w") if history_path else None
    try:
        for stage in stages:
            if len(stage.train) == 0 or len(stage.val) == 0:
                raise ValueError(f"stage {stage.name}: empty split partition")
            _run_stage(model, stage, cfg, opt, groups, rng, result, hist_fh, log)
    finally:
        if hist_fh:
            hist_fh.close()
    return result


def _run_stage(model, stage, cfg, opt, groups, rng, result, hist_fh, log):
    train_x = stage.train.network_input()
    val_x = stage.val.network_input()
    val_m = torch.from_numpy(stage.val.masks.astype(np.float32))
    weak = weak_maps_for(stage.train, cfg) if model.unsup is not None else None
    stopper = EarlyStopping(cfg.patience)
    best_state = copy.deepcopy(model.state_dict())
    epoch = 0
    n = len(stage.train)

    def run_epochs(state: FusionState | None, count: int) -> bool:
        nonlocal epoch, best_state
        for _ in range(count):
            if epoch >= stage.epochs:
                return True
            epoch += 1
            model.train()
            perm = rng.permutation(n)
            totals = np.zeros(3)
            for s in range(0, n, cfg.batch_size):
                idx = perm[s:s + cfg.batch_size]
                targets = [] if state is None else [state.maps.kappa, state.maps.pi, state.confidence]
                if cfg.augment:
                    xb, mb, tb = _augment_batch(stage.train, idx, targets, rng)
                else:
                    xb, mb, tb = train_x[idx].numpy(), stage.train.masks[idx], [t[idx] for t in targets]
                x = torch.from_numpy(xb)
                m = torch.from_numpy(mb.astype(np.float32))
                out = model(x)
                losses = []
                if out.sup is not None:
                    losses.append(supervised_loss(out.sup.foreground[:, 0], m, cfg.ridge, groups["sup"]))
                else:
                    losses.append(torch.zeros(()))
                if out.unsup is not None and state is not None:
                    k, p, w = (torch.from_numpy(t.astype(np.float32)) for t in tb)
                    losses.append(unsupervised_loss(out.unsup.foreground[:, 0], k, p, w, cfg.ridge, groups["unsup"]))
                else:
                    losses.append(torch.zeros(()))
                if out.saliency.requires_grad and groups["final"]:
                    losses.append(supervised_loss(out.saliency[:, 0], m, cfg.ridge, groups["final"]))
                else:
                    losses.append(torch.zeros(()))
                total = sum(losses)
                opt.zero_grad()
                total.backward()
                opt.step()
                totals += [float(l.detach()) * len(idx) for l in losses]
            val_pred = torch.from_numpy(predict(model, val_x)["saliency"]).float()
            val_loss = float(supervised_loss(val_pred, val_m, 0.0))
            stop = stopper.update(val_loss)
            if stopper.improved:
                best_state = copy.deepcopy(model.state_dict())
                result.best_epoch = epoch
            rec = {"stage": stage.name, "epoch": epoch, "loss_sup": totals[0] / n, "loss_unsup": totals[1] / n,
                   "loss_final": totals[2] / n, "val_loss": val_loss,
                   "val_iaae": float(1 - np.abs(val_pred.numpy() - stage.val.masks).mean())}
            result.history.append(rec)
            if hist_fh:
                hist_fh.write(json.dumps(rec) + "\n")
            if log:
                log(f"{stage.name} epoch {epoch}: train {sum(totals) / n:.1f} val {val_loss:.1f}")
            if stop:
                result.stopped_epoch = epoch
                return True
        return False

    stop = False
    if weak is not None:
        for _ in range(cfg.fusion_rounds):
            weak, state, stop = fusion_round(weak, model, train_x, cfg, run_epochs)
            if stop:
                break
        if not stop:
            state = compute_fusion(weak)
            run_epochs(state, stage.epochs - epoch)
        result.fusion = state
    else:
        run_epochs(None, stage.epochs)
    model.load_state_dict(best_state)


# ---------------------------------------------------------------------------
# Monte Carlo protocol


@dataclass
class MonteCarloResult:
    report: MetricsReport
    trials: list[MetricsReport]
    splits: list[tuple[np.ndarray, np.ndarray, np.ndarray]]


def monte_carlo(dataset: SaliencyDataset, make_model: Callable[[int], MBCEDN], cfg: TrainConfig, trials: int = 20,
                seed: int = 0, pretrain: SaliencyDataset | None = None, pretrain_epochs: int = 0,
                map_key: str = "saliency", log=None) -> MonteCarloResult:
    """Repeat (split, train, test) with fresh seeded splits; mean and std of the test metrics."""
    if trials < 1:
        raise ValueError("need at least one trial")
    reports, splits = [], []
    for t in range(trials):
        trial_seed = derive_seed(seed, f"trial{t}")
        tr, va, te = split_indices(len(dataset), trial_seed)
        splits.append((tr, va, te))
        model = make_model(trial_seed)
        stages = []
        if pretrain is not None and pretrain_epochs > 0:
            ptr, pva, _ = split_indices(len(pretrain), trial_seed)
            stages.append(Stage("pretrain_generic", pretrain.subset(ptr), pretrain.subset(pva), pretrain_epochs))
        stages.append(Stage("finetune_sonar", dataset.subset(tr), dataset.subset(va), cfg.epochs))
        train_loop(model, stages, TrainConfig(**{**cfg.__dict__, "seed": trial_seed}), log=log)
        test = dataset.subset(te)
        preds = predict(model, test.network_input())[map_key]
        reports.append(evaluate_maps(preds, test.masks, test.kinds))
    return MonteCarloResult(aggregate_reports(reports), reports, splits)
