"""Supervision-by-fusion: superpixels, GLAD inference and fusion maps.

Weak detector maps are averaged over superpixels and binarized into votes.
A GLAD model (labels, abilities, difficulties) is fitted by EM at two levels:

* local, per image: items are superpixels, annotators are detectors; yields
  detector reliabilities ``a[i, k]`` and superpixel difficulties ``b[i][j]``;
* global, over the whole set: items are images, annotators are detectors and a
  vote says whether the detector's map agrees with the mean map; yields
  ``alpha[k]`` and image difficulties ``beta[i]``.

A detector's vote is correct with probability ``sigmoid(a / b)``. The fit
maximizes the marginal log-likelihood plus Gaussian log-priors on ``a`` and
``log b``, which pin down the scale shared by ``a`` and ``b``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.special import expit, log_expit, logsumexp


# ---------------------------------------------------------------------------
# superpixels


@dataclass
class Superpixelization:
    labels: np.ndarray

    @property
    def d(self) -> int:
        return int(self.labels.max()) + 1

    count = d


def relabel_connected(labels: np.ndarray) -> np.ndarray:
    """Split every label into 4-connected pieces and renumber 0..d-1."""
    out = np.full(labels.shape, -1, dtype=np.int64)
    nxt = 0
    for lab in np.unique(labels):
        comp, n = ndimage.label(labels == lab)
        sel = comp > 0
        out[sel] = comp[sel] - 1 + nxt
        nxt += n
    return out


def _grid_shape(target_count: int, H: int, W: int) -> tuple[int, int]:
    """Rows x cols of seed cells whose product is closest to the target."""
    best = None
    for rows in range(1, min(H, target_count) + 1):
        cols = max(1, min(W, round(target_count / rows)))
        # prefer exact counts, then squarish cells
        key = (abs(rows * cols - target_count), abs(np.log((H / rows) / (W / cols))))
        if best is None or key < best[0]:
            best = (key, rows, cols)
    return best[1], best[2]


def _merge_small(labels: np.ndarray, min_size: int, max_count: int) -> np.ndarray:
    """Fold the smallest component into its largest-contact neighbour until every
    component has at least ``min_size`` pixels and there are at most ``max_count``.

    Merging two touching connected regions keeps them connected, so the
    connected relabelling is only needed once up front.
    """
    labels = relabel_connected(labels)
    sizes = np.bincount(labels.ravel()).astype(np.int64)
    alive = sizes > 0
    four = ndimage.generate_binary_structure(2, 1)
    while alive.sum() > 1:
        live = np.flatnonzero(alive)
        cand = live if live.size > max_count else live[sizes[live] < min_size]
        if cand.size == 0:
            break
        lab = int(cand[np.argmin(sizes[cand])])
        region = labels == lab
        neigh = labels[ndimage.binary_dilation(region, structure=four) & ~region]
        target = int(np.bincount(neigh).argmax())
        labels[region] = target
        sizes[target] += sizes[lab]
        sizes[lab] = 0
        alive[lab] = False
    return np.unique(labels, return_inverse=True)[1].reshape(labels.shape)


def superpixelize(image, target_count: int, compactness: float = 0.2, max_iter: int = 10) -> Superpixelization:
    """SLIC-style k-means in (color, position) space with connectivity enforced.

    Seeds sit at the centres of a rows x cols grid chosen so rows * cols is as
    close as possible to ``target_count``; each cluster only competes for pixels
    within two grid steps of its centre. Fragments under a quarter of the mean
    cell area are merged into a neighbour afterwards, as are the smallest
    regions while the count exceeds the target by more than 20%.
    """
    rgb = image.to_rgb() if hasattr(image, "to_rgb") else np.asarray(image, dtype=np.float64)
    if rgb.ndim == 2:
        rgb = rgb[..., None]
    H, W = rgb.shape[:2]
    if target_count < 1:
        raise ValueError("target_count must be >= 1")
    if target_count > H * W:
        raise ValueError(f"target_count {target_count} exceeds the pixel count {H * W}")
    if target_count == 1:
        return Superpixelization(np.zeros((H, W), dtype=np.int64))
    rows, cols = _grid_shape(target_count, H, W)
    step_r, step_c = H / rows, W / cols
    step = np.sqrt(step_r * step_c)
    cr, cc = np.meshgrid((np.arange(rows) + 0.5) * step_r - 0.5, (np.arange(cols) + 0.5) * step_c - 0.5, indexing="ij")
    centers_pos = np.stack([cr.ravel(), cc.ravel()], 1)
    feats = rgb.reshape(-1, rgb.shape[-1]).astype(np.float64)
    pr, pc = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    pos = np.stack([pr.ravel(), pc.ravel()], 1).astype(np.float64)
    near = np.clip(np.round(centers_pos).astype(int), 0, [H - 1, W - 1])
    centers_col = feats[near[:, 0] * W + near[:, 1]]
    labels = None
    for _ in range(max_iter):
        dr = np.abs(pos[None, :, 0] - centers_pos[:, None, 0])
        dc = np.abs(pos[None, :, 1] - centers_pos[:, None, 1])
        d_col = (centers_col ** 2).sum(1)[:, None] - 2 * centers_col @ feats.T + (feats ** 2).sum(1)[None]
        dist = d_col + (compactness ** 2) * (dr ** 2 + dc ** 2) / step ** 2
        dist[(dr > 2 * step_r) | (dc > 2 * step_c)] = np.inf
        new = np.argmin(dist, axis=0)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        counts = np.bincount(labels, minlength=len(centers_pos))
        keep = counts > 0
        for dim in range(2):
            centers_pos[keep, dim] = np.bincount(labels, weights=pos[:, dim], minlength=len(counts))[keep] / counts[keep]
        for ch in range(feats.shape[1]):
            centers_col[keep, ch] = np.bincount(labels, weights=feats[:, ch], minlength=len(counts))[keep] / counts[keep]
    out = _merge_small(labels.reshape(H, W), max(1, int(0.25 * H * W / (rows * cols))),
                       max(1, int(np.floor(1.2 * target_count))))
    return Superpixelization(out)


def superpixel_average(saliency: np.ndarray, sp: Superpixelization | np.ndarray) -> np.ndarray:
    labels = sp.labels if isinstance(sp, Superpixelization) else np.asarray(sp)
    if labels.shape != np.shape(saliency):
        raise ValueError("map and superpixels differ in shape")
    flat = labels.ravel()
    d = int(flat.max()) + 1
    sums = np.bincount(flat, weights=np.asarray(saliency, dtype=np.float64).ravel(), minlength=d)
    counts = np.bincount(flat, minlength=d)
    return (sums / np.maximum(counts, 1))[labels]


def region_means(saliency: np.ndarray, labels: np.ndarray) -> np.ndarray:
    flat = labels.ravel()
    d = int(flat.max()) + 1
    sums = np.bincount(flat, weights=np.asarray(saliency, dtype=np.float64).ravel(), minlength=d)
    return sums / np.maximum(np.bincount(flat, minlength=d), 1)


# ---------------------------------------------------------------------------
# weak map sets


@dataclass
class WeakMapSet:
    """Superpixel-averaged weak saliency maps, shape (n, m, H, W)."""

    maps: np.ndarray
    superpixels: list[np.ndarray]
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.maps = np.asarray(self.maps, dtype=np.float64)
        if self.maps.ndim != 4:
            raise ValueError("weak maps must be n x m x H x W")
        if len(self.superpixels) != self.maps.shape[0]:
            raise ValueError("need one superpixelization per image")
        if not self.names:
            self.names = [f"detector{k}" for k in range(self.maps.shape[1])]
        if np.any(self.maps < 0) or np.any(self.maps > 1):
            raise ValueError("weak maps must lie in [0, 1]")

    @property
    def n_images(self) -> int:
        return self.maps.shape[0]

    @property
    def n_detectors(self) -> int:
        return self.maps.shape[1]

    @classmethod
    def from_raw(cls, raw: np.ndarray, superpixels: Sequence, names=None) -> "WeakMapSet":
        labels = [s.labels if isinstance(s, Superpixelization) else np.asarray(s) for s in superpixels]
        raw = np.clip(np.asarray(raw, dtype=np.float64), 0, 1)
        avg = np.stack([np.stack([superpixel_average(m, labels[i]) for m in raw[i]]) for i in range(raw.shape[0])])
        return cls(avg, labels, list(names or []))

    def copy(self) -> "WeakMapSet":
        return WeakMapSet(self.maps.copy(), [s.copy() for s in self.superpixels], list(self.names))


# ---------------------------------------------------------------------------
# GLAD


@dataclass(frozen=True)
class GladPrior:
    a_mean: float = 1.0
    a_var: float = 1.0
    log_b_var: float = 1.0
    p_positive: float = 0.5


@dataclass
class GladFit:
    """Fit of one vote matrix (annotators x items)."""

    a: np.ndarray
    b: np.ndarray
    q: np.ndarray
    objective: list[float]
    iterations: int
    converged: bool


def _log_correct(a, log_b):
    x = a[:, None] * np.exp(-log_b)[None, :]
    return x, log_expit(x), log_expit(-x)


def glad_objective(votes: np.ndarray, a: np.ndarray, log_b: np.ndarray, prior: GladPrior = GladPrior(),
                   mask: np.ndarray | None = None) -> float:
    """Marginal log-likelihood of the votes plus the log-prior."""
    lp = glad_item_log_joint(votes, a, log_b, prior, mask)
    return float(logsumexp(lp, axis=0).sum() + _log_prior(a, log_b, prior))


def glad_item_log_joint(votes, a, log_b, prior: GladPrior = GladPrior(), mask=None) -> np.ndarray:
    """log p(z_j, votes_j) for z in (0, 1), shape (2, items)."""
    v = np.asarray(votes, dtype=np.float64)
    w = np.ones_like(v) if mask is None else np.asarray(mask, dtype=np.float64)
    _, lc, lw = _log_correct(a, log_b)
    # z = 1: vote 1 is correct; z = 0: vote 0 is correct
    l1 = (w * (v * lc + (1 - v) * lw)).sum(0) + np.log(prior.p_positive)
    l0 = (w * ((1 - v) * lc + v * lw)).sum(0) + np.log1p(-prior.p_positive)
    return np.stack([l0, l1])


def _log_prior(a, log_b, prior: GladPrior) -> float:
    return float(-0.5 * np.sum((a - prior.a_mean) ** 2) / prior.a_var
                 - 0.5 * np.sum(log_b ** 2) / prior.log_b_var
                 - 0.5 * (a.size * np.log(2 * np.pi * prior.a_var) + log_b.size * np.log(2 * np.pi * prior.log_b_var)))


def _expected_complete(v, w, q, a, log_b, prior):
    # c = posterior probability that each vote is correct
    c = q[None, :] * v + (1 - q[None, :]) * (1 - v)
    x, lc, lw = _log_correct(a, log_b)
    val = float((w * (c * lc + (1 - c) * lw)).sum() + _log_prior(a, log_b, prior))
    g = w * (c - expit(x))
    grad_a = (g * np.exp(-log_b)[None, :]).sum(1) - (a - prior.a_mean) / prior.a_var
    grad_lb = (g * -x).sum(0) - log_b / prior.log_b_var
    return val, grad_a, grad_lb


def glad_em_votes(votes: np.ndarray, *, prior: GladPrior = GladPrior(), mask: np.ndarray | None = None,
                  max_iter: int = 100, tol: float = 1e-7, m_steps: int = 10,
                  init_a: np.ndarray | None = None) -> GladFit:
    """EM for GLAD on a binary vote matrix of shape (annotators, items).

    The M-step is gradient ascent on the expected complete-data objective with
    backtracking, so each accepted step raises it and the EM objective never
    decreases.
    """
    v = np.asarray(votes, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError("votes must be annotators x items")
    m, d = v.shape
    if m < 2:
        raise ValueError("GLAD needs at least two detectors")
    w = np.ones_like(v) if mask is None else np.asarray(mask, dtype=np.float64)
    a = np.full(m, prior.a_mean, dtype=np.float64) if init_a is None else np.asarray(init_a, dtype=np.float64).copy()
    log_b = np.zeros(d)
    history = [glad_objective(v, a, log_b, prior, w)]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        lj = glad_item_log_joint(v, a, log_b, prior, w)
        q = np.exp(lj[1] - logsumexp(lj, axis=0))
        val, ga, glb = _expected_complete(v, w, q, a, log_b, prior)
        step = 1.0
        for _ in range(m_steps):
            gn = float(ga @ ga + glb @ glb)
            if gn < 1e-18:
                break
            while step > 1e-10:
                na, nlb = a + step * ga, log_b + step * glb
                nval, nga, nglb = _expected_complete(v, w, q, na, nlb, prior)
                if nval >= val + 1e-4 * step * gn:
                    a, log_b, val, ga, glb = na, nlb, nval, nga, nglb
                    step = min(step * 2.0, 4.0)
                    break
                step *= 0.5
            else:
                break
        history.append(glad_objective(v, a, log_b, prior, w))
        if abs(history[-1] - history[-2]) < tol:
            converged = True
            break
    lj = glad_item_log_joint(v, a, log_b, prior, w)
    q = np.exp(lj[1] - logsumexp(lj, axis=0))
    return GladFit(a=a, b=np.exp(log_b), q=q, objective=history, iterations=it, converged=converged)


def normalized_l1(x: np.ndarray, reference: np.ndarray) -> float:
    """L1 distance to ``reference`` relative to the reference's L1 mass.

    Measured against the reference mass only: with the reference being a mean
    that includes ``x``, a form normalized by both masses barely moves and
    leaves the 0.5 agreement cutoff unanimous.
    """
    num = float(np.abs(np.asarray(x) - np.asarray(reference)).sum())
    den = float(np.abs(np.asarray(reference)).sum())
    if den > 0:
        return num / den
    return 0.0 if num == 0 else float("inf")


def local_votes(maps: WeakMapSet, i: int, threshold: float = 0.5) -> np.ndarray:
    lab = maps.superpixels[i]
    return np.stack([region_means(m, lab) > threshold for m in maps.maps[i]]).astype(np.float64)


def global_votes(maps: WeakMapSet, threshold: float = 0.5) -> np.ndarray:
    """(m, n) agreement labels of each detector with the image mean map."""
    mean = maps.maps.mean(axis=1)
    out = np.zeros((maps.n_detectors, maps.n_images))
    for i in range(maps.n_images):
        for k in range(maps.n_detectors):
            out[k, i] = normalized_l1(maps.maps[i, k], mean[i]) < threshold
    return out


@dataclass
class GladState:
    """Local and/or global GLAD estimates for one weak map set."""

    a: np.ndarray | None = None             # (n, m) local reliabilities
    b: list[np.ndarray] | None = None       # per image, (d_i,) superpixel difficulties
    q_local: list[np.ndarray] | None = None
    alpha: np.ndarray | None = None         # (m,) global reliabilities
    beta: np.ndarray | None = None          # (n,) image difficulties
    q_global: np.ndarray | None = None
    objective_local: list[list[float]] = field(default_factory=list)
    objective_global: list[float] = field(default_factory=list)

    @property
    def gamma(self) -> list[np.ndarray] | None:
        """Per-image superpixel confidence: 1/b over its per-image maximum."""
        if self.b is None:
            return None
        return [_reciprocal_normalized(b) for b in self.b]

    def combine(self, other: "GladState") -> "GladState":
        out = GladState(**self.__dict__)
        for k, v in other.__dict__.items():
            if v is not None and not (isinstance(v, list) and not v):
                setattr(out, k, v)
        return out

    def report(self, names: Sequence[str] | None = None) -> dict:
        m = len(self.alpha) if self.alpha is not None else (self.a.shape[1] if self.a is not None else 0)
        names = list(names or [f"detector{k}" for k in range(m)])
        rep: dict = {"detectors": names}
        if self.alpha is not None:
            rep["global_reliability"] = dict(zip(names, map(float, self.alpha)))
            rep["image_difficulty"] = [float(x) for x in self.beta]
        if self.a is not None:
            rep["mean_local_reliability"] = dict(zip(names, map(float, self.a.mean(0))))
        return rep

    def to_json(self, names=None) -> str:
        return json.dumps(self.report(names), indent=2, sort_keys=True)


# Agreement with the consensus is the expected state of an image, so global votes
# start from a positive label prior. With an even prior, a detector that agrees
# more often than the other two is outvoted and ranked least reliable.
GLOBAL_PRIOR = GladPrior(p_positive=0.9)


def glad_em(maps: WeakMapSet, level: str = "local", max_iter: int = 100, tol: float = 1e-7,
            prior: GladPrior | None = None, threshold: float = 0.5) -> GladState:
    """Run GLAD EM at the ``local`` (per image) or ``global`` level.

    ``prior`` defaults to an even label prior locally and :data:`GLOBAL_PRIOR` globally.
    """
    if prior is None:
        prior = GLOBAL_PRIOR if level == "global" else GladPrior()
    if maps.n_detectors < 2:
        raise ValueError("GLAD needs at least two detectors")
    if level == "local":
        a, b, q, obj = [], [], [], []
        for i in range(maps.n_images):
            fit = glad_em_votes(local_votes(maps, i, threshold), prior=prior, max_iter=max_iter, tol=tol)
            a.append(fit.a)
            b.append(fit.b)
            q.append(fit.q)
            obj.append(fit.objective)
        return GladState(a=np.stack(a), b=b, q_local=q, objective_local=obj)
    if level == "global":
        fit = glad_em_votes(global_votes(maps, threshold), prior=prior, max_iter=max_iter, tol=tol)
        return GladState(alpha=fit.a, beta=fit.b, q_global=fit.q, objective_global=fit.objective)
    raise ValueError(f"level must be 'local' or 'global', got {level!r}")


# ---------------------------------------------------------------------------
# fusion maps and confidence


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        z = x - np.max(x, axis=axis, keepdims=True)
    z = np.where(np.isnan(z), np.where(np.isposinf(x), 0.0, -np.inf), z)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class FusionMaps:
    kappa: np.ndarray   # (n, H, W) local fusion maps
    pi: np.ndarray      # (n, H, W) global fusion maps
    mean: np.ndarray    # (n, H, W) detector average


def build_fusion_maps(maps: WeakMapSet, glad_local: GladState, glad_global: GladState) -> FusionMaps:
    wl = softmax(glad_local.a, axis=1)                  # (n, m)
    wg = softmax(glad_global.alpha)                      # (m,)
    kappa = np.einsum("nk,nkhw->nhw", wl, maps.maps)
    pi = np.einsum("k,nkhw->nhw", wg, maps.maps)
    return FusionMaps(np.clip(kappa, 0, 1), np.clip(pi, 0, 1), maps.maps.mean(axis=1))


def _reciprocal_normalized(x: np.ndarray) -> np.ndarray:
    r = 1.0 / np.asarray(x, dtype=np.float64)
    top = r.max()
    return r / top if top > 0 else np.zeros_like(r)


def confidence_weights(glad_local: GladState, glad_global: GladState,
                       superpixels: Sequence[np.ndarray]) -> np.ndarray:
    """Per-pixel learning confidence, shape (n, H, W), in [0, 1].

    Superpixel confidence is 1/b normalized by its per-image maximum; image
    confidence is 1/beta normalized by its maximum over the set.
    """
    image_conf = _reciprocal_normalized(glad_global.beta)
    out = [image_conf[i] * g[np.asarray(lab)] for i, (g, lab) in enumerate(zip(glad_local.gamma, superpixels))]
    return np.clip(np.stack(out), 0, 1)


def lowest_reliability(alpha: np.ndarray, count: int) -> list[int]:
    """Indices of the ``count`` smallest reliabilities; ties go to the lower index."""
    return [int(k) for k in np.argsort(np.asarray(alpha), kind="stable")[:count]]


def replace_lowest_reliability(maps: WeakMapSet, glad_global: GladState, branch_output: np.ndarray,
                               count: int) -> WeakMapSet:
    """Swap the least reliable detectors' maps for the branch's (superpixel-averaged) output."""
    if count >= maps.n_detectors:
        raise ValueError("count must be smaller than the number of detectors")
    out = maps.copy()
    if count <= 0:
        return out
    branch_output = np.asarray(branch_output, dtype=np.float64)
    if branch_output.shape != (maps.n_images,) + maps.maps.shape[2:]:
        raise ValueError("branch output must be n x H x W")
    avg = np.stack([superpixel_average(np.clip(branch_output[i], 0, 1), maps.superpixels[i])
                    for i in range(maps.n_images)])
    for k in lowest_reliability(glad_global.alpha, count):
        out.maps[:, k] = avg
        out.names[k] = f"{out.names[k]}>branch"
    return out
