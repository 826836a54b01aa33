"""Command-line entry point: ``sas-saliency {generate,train,infer,eval,flow,ablate}``.

Every command takes ``--config PATH`` (flat ``key = value`` text), ``--seed N``
(overrides the config's root seed), ``--out DIR`` and ``--force``. Datasets
built from a config are cached under ``$SAS_SALIENCY_CACHE`` when it is set.

Exit codes: 0 success, 1 output validation failed, 2 bad usage or config,
3 missing checkpoint, 4 malformed dataset, 5 config digest mismatch,
6 output directory not empty (pass ``--force``).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np
import torch

from . import experiment as ex
from .aspect_color import CsasImage
from .config import ConfigError, ExperimentConfig, derive_seed
from .data import (SaliencyDataset, read_scene_tree, render_scene, write_scene_tree)
from .evalpost import MetricsReport, evaluate_maps, extract_boxes, write_boxes_csv
from .flow import DESK_FLOW, LFN, FlowConfig, FlowField, flow_metrics, flow_to_rgb, write_flo
from .io import (DigestMismatch, MalformedDataset, config_digest, load_checkpoint, load_container, save_checkpoint,
                 save_container, save_png)
from .scene import random_scene_spec
from .train import predict

log = logging.getLogger("sas_saliency")

EXIT_OK, EXIT_INVALID, EXIT_USAGE, EXIT_NO_CHECKPOINT, EXIT_BAD_DATA, EXIT_DIGEST, EXIT_EXISTS = 0, 1, 2, 3, 4, 5, 6
CACHE_ENV = "SAS_SALIENCY_CACHE"


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(EXIT_USAGE, message)


# ---------------------------------------------------------------------------
# shared plumbing


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def prepare_out(path: str | Path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise CliError(EXIT_EXISTS, f"{out} is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


DATA_FIELDS = ("seed", "n_scenes", "size", "num_apertures", "num_views", "colormap", "speckle", "haze_prob",
               "view_jitter")


def _scene_triples(cfg: ExperimentConfig):
    rng = np.random.default_rng(derive_seed(cfg.seed, "scenes"))
    for _ in range(cfg.n_scenes):
        spec = random_scene_spec(rng, height=cfg.size, width=cfg.size, num_apertures=cfg.num_apertures)
        yield render_scene(spec, rng, num_views=cfg.num_views, jitter=cfg.view_jitter, speckle=cfg.speckle,
                           haze_prob=cfg.haze_prob)


def dataset_for(cfg: ExperimentConfig, data_dir: str | None) -> SaliencyDataset:
    """Scene tree from ``data_dir``, else the config's synthetic set (through the cache)."""
    if data_dir:
        return read_scene_tree(data_dir, ex.colormap_for(cfg))[0]
    cache = os.environ.get(CACHE_ENV)
    if not cache:
        return ex.build_dataset(cfg)
    key = config_digest({k: getattr(cfg, k) for k in DATA_FIELDS})[:16]
    path = Path(cache) / f"dataset_{key}.npz"
    fields = ("hsv", "masks", "views", "view_masks", "view_offsets")
    if path.exists():
        arrays, meta = load_container(path)
        log.info("dataset cache hit %s", path)
        return SaliencyDataset(**{k: arrays.get(k) for k in fields}, kinds=meta["kinds"],
                               colormap=ex.colormap_for(cfg))
    ds = ex.build_dataset(cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_container(path, {k: getattr(ds, k) for k in fields if getattr(ds, k) is not None},
                   {"kind": "dataset_cache", "kinds": ds.kinds}, float64=True)
    return ds


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _validate_report(path: Path) -> None:
    rep = MetricsReport.from_json(path.read_text())
    for k in ("MAP", "AFM", "AIOU", "IAAE", "MAP_det"):
        v = getattr(rep, k)
        if np.isfinite(v) and not 0.0 <= v <= 1.0:
            raise CliError(EXIT_INVALID, f"{path}: {k} = {v} outside [0, 1]")


def _require(path: Path) -> None:
    if not path.exists() or path.stat().st_size == 0:
        raise CliError(EXIT_INVALID, f"expected output {path} was not written")


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    cfg = load_config(args)
    out = prepare_out(args.out, args.force)
    names = write_scene_tree(out, _scene_triples(cfg))
    cfg.save(out / "config.txt")
    for n in names:
        _require(out / n / "stack.npz")
    log.info("wrote %d scenes with %d view(s) to %s", len(names), cfg.num_views, out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args)
    ds = dataset_for(cfg, args.data)
    out = prepare_out(args.out, args.force)
    cfg.save(out / "config.txt")
    flow_model = _load_flow(args.flow_checkpoint) if args.flow_checkpoint else None
    trial = ex.run_trial(cfg, ds, flow_model=flow_model, history_path=out / "history.jsonl",
                         log=lambda s: log.info(s))
    digest = save_checkpoint(out / "checkpoint.npz", trial.result.model,
                             {"experiment_digest": cfg.digest(), "best_epoch": trial.result.best_epoch})
    tr, va, te = trial.split
    _write_json(out / "split.json", {"train": tr.tolist(), "val": va.tolist(), "test": te.tolist()})
    for name, rep in trial.reports.items():
        (out / f"metrics_{name}.json").write_text(rep.to_json())
        _validate_report(out / f"metrics_{name}.json")
    for f in ("checkpoint.npz", "history.jsonl", "split.json"):
        _require(out / f)
    log.info("checkpoint %s (config digest %s)", out / "checkpoint.npz", digest[:12])
    return EXIT_OK


def _infer_inputs(path: Path, cfg: ExperimentConfig) -> list[tuple[str, list[CsasImage], np.ndarray | None]]:
    """(name, views, offsets) per input: a scene tree, one scene, or PNG images."""
    from PIL import Image
    from skimage.color import rgb2hsv

    if not path.exists():
        raise MalformedDataset(f"{path}: does not exist")
    if (path / "stack.npz").exists():
        ds, names = read_scene_tree(path.parent, ex.colormap_for(cfg))
        i = names.index(path.name)
        return [(path.name, ds.view_images(i), None if ds.view_offsets is None else ds.view_offsets[i])]
    if path.is_dir() and any(p.is_dir() and (p / "stack.npz").exists() for p in path.iterdir()):
        ds, names = read_scene_tree(path, ex.colormap_for(cfg))
        return [(n, ds.view_images(i), None if ds.view_offsets is None else ds.view_offsets[i])
                for i, n in enumerate(names)]
    files = [path] if path.is_file() else sorted(p for p in path.glob("*.png") if not p.stem.endswith("_mask"))
    if not files:
        raise MalformedDataset(f"{path}: no scenes or images found")
    out = []
    for p in files:
        try:
            rgb = np.asarray(Image.open(p).convert("RGB"), dtype=np.float64) / 255.0
        except OSError as exc:
            raise MalformedDataset(f"{p}: unreadable image ({exc})") from exc
        out.append((p.stem, [CsasImage(rgb2hsv(rgb))], None))
    return out


def _load_model(args, cfg: ExperimentConfig | None):
    path = Path(args.checkpoint)
    if not path.exists():
        raise CliError(EXIT_NO_CHECKPOINT, f"checkpoint {path} not found")
    expected = ex.model_config(cfg) if cfg is not None and args.config else None
    model, _ = load_checkpoint(path, expected)
    return model


def cmd_infer(args) -> int:
    cfg = load_config(args)
    model = _load_model(args, cfg)
    inputs = _infer_inputs(Path(args.data), cfg)
    out = prepare_out(args.out, args.force)
    flow_model = _load_flow(args.flow_checkpoint) if args.flow_checkpoint else None
    for name, views, offsets in inputs:
        x = torch.from_numpy(np.stack([v.to_network() for v in views]))
        maps = predict(model, x)["saliency"]
        if cfg.use_multi_image and len(views) > 1:
            flows = ex.view_flows(views, flow_model, offsets)
            sal = ex.aggregate_multi(list(maps), flows, views[0], views, tau=cfg.aggregation_tau)
        else:
            sal = maps[0]
        np.save(out / f"{name}_saliency.npy", sal.astype(np.float32))
        save_png(out / f"{name}_saliency.png", sal)
        write_boxes_csv(extract_boxes(sal, cfg.min_area_frac, cfg.morph_radius), out / f"{name}_boxes.csv")
        check = np.load(out / f"{name}_saliency.npy")
        if not (np.isfinite(check).all() and check.min() >= 0 and check.max() <= 1):
            raise CliError(EXIT_INVALID, f"{name}: saliency map outside [0, 1]")
        _require(out / f"{name}_boxes.csv")
    log.info("wrote %d saliency maps to %s", len(inputs), out)
    return EXIT_OK


def _truth_masks(path: Path) -> dict[str, np.ndarray]:
    from .io import load_mask

    if not path.is_dir():
        raise MalformedDataset(f"{path}: not a directory")
    masks = {p.name: load_mask(p / "mask.png") for p in sorted(path.iterdir()) if (p / "mask.png").exists()}
    masks.update({p.stem[:-5]: load_mask(p) for p in sorted(path.glob("*_mask.png"))})
    if not masks:
        raise MalformedDataset(f"{path}: no masks found")
    return masks


def cmd_eval(args) -> int:
    cfg = load_config(args)
    truth = _truth_masks(Path(args.data))
    pred_dir = Path(args.pred)
    preds, masks, names = [], [], []
    for name, mask in truth.items():
        p = pred_dir / f"{name}_saliency.npy"
        if not p.exists():
            raise MalformedDataset(f"{p}: missing prediction for {name}")
        pred = np.load(p).astype(np.float64)
        if pred.shape != mask.shape:
            raise MalformedDataset(f"{name}: prediction and mask differ in size")
        preds.append(pred)
        masks.append(mask)
        names.append(name)
    out = prepare_out(args.out, args.force)
    report = evaluate_maps(preds, masks, min_area_frac=cfg.min_area_frac, morph_radius=cfg.morph_radius)
    (out / "metrics.json").write_text(report.to_json())
    _validate_report(out / "metrics.json")
    log.info("MAP %.4f AFM %.4f AIOU %.4f IAAE %.4f over %d images", report.MAP, report.AFM, report.AIOU,
             report.IAAE, report.n_images)
    return EXIT_OK


def _save_flow(path: Path, model: LFN) -> None:
    cfg = dataclasses.asdict(model.config)
    save_container(path, {k: v.detach().numpy() for k, v in model.state_dict().items()},
                   {"kind": "flow_checkpoint", "config": cfg, "config_digest": config_digest(cfg)})


def _load_flow(path) -> LFN:
    p = Path(path)
    if not p.exists():
        raise CliError(EXIT_NO_CHECKPOINT, f"flow checkpoint {p} not found")
    arrays, meta = load_container(p)
    if meta.get("kind") != "flow_checkpoint":
        raise MalformedDataset(f"{p}: not a flow checkpoint")
    if config_digest(meta["config"]) != meta["config_digest"]:
        raise DigestMismatch(f"{p}: stored config does not match its digest")
    model = LFN(FlowConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta["config"].items()}))
    model.load_state_dict({k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in arrays.items()})
    return model


def cmd_flow(args) -> int:
    cfg = load_config(args)
    out = prepare_out(args.out, args.force)
    model, (a, b, f), losses = ex.train_flow_model(cfg, log=log.info)
    _save_flow(out / "flow_checkpoint.npz", model)
    with torch.no_grad():
        model.eval()
        pred = torch.cat([model(a[i:i + 64], b[i:i + 64])[-1] for i in range(0, a.shape[0], 64)]).double().numpy()
    truth = f.double().numpy()
    rows = []
    for i in range(len(pred)):
        pair = (a[i].double().numpy().transpose(1, 2, 0), b[i].double().numpy().transpose(1, 2, 0))
        rows.append(flow_metrics(FlowField(*pred[i]), FlowField(*truth[i]), pair))
    aee, aie = np.nanmean(np.array(rows), axis=0)
    _write_json(out / "metrics.json", {"AEE": float(aee), "AIE": float(aie), "n_pairs": len(rows)})
    write_flo(FlowField(*pred[0]), out / "example.flo")
    save_png(out / "example_flow.png", flow_to_rgb(FlowField(*pred[0]), max_magnitude=8.0))
    with open(out / "history.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        w.writerows(enumerate(losses, start=1))
    _plot_curve(out / "history.png", losses, "epoch", "multi-scale EPE")
    for name in ("flow_checkpoint.npz", "metrics.json", "example.flo"):
        _require(out / name)
    log.info("held-out AEE %.3f px, AIE %.4f", aee, aie)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args)
    toggles = [t.strip() for t in args.toggles.split(",") if t.strip()]
    try:
        rows = ex.ablation_grid(cfg, toggles)
    except ValueError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from exc
    ds = dataset_for(cfg, args.data)
    out = prepare_out(args.out, args.force)
    flow_model = _load_flow(args.flow_checkpoint) if args.flow_checkpoint else None
    metrics = ("MAP", "AFM", "AIOU", "IAAE", "MAP_det")
    table = []
    for n, (rec, row_cfg) in enumerate(rows):
        if row_cfg is None:
            table.append({**rec, "status": "invalid", **{m: float("nan") for m in metrics}})
            continue
        log.info("ablation row %d: %s", n, rec)
        trial = ex.run_trial(row_cfg, ds, flow_model=flow_model)
        key = "multi_view" if "multi_view" in trial.reports else "saliency"
        table.append({**rec, "status": "ok", **{m: getattr(trial.reports[key], m) for m in metrics}})
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=[*toggles, "status", *metrics])
        w.writeheader()
        w.writerows(table)
    _plot_ablation(out / "ablation.png", table, toggles)
    _require(out / "ablation.csv")
    return EXIT_OK


# ---------------------------------------------------------------------------
# plots


def _plot_curve(path: Path, values, xlabel: str, ylabel: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(range(1, len(values) + 1), values, marker="o", ms=3)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def _plot_ablation(path: Path, table: list[dict], toggles: list[str]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = ["\n".join(f"{t.removeprefix('use_')}={'on' if r[t] else 'off'}" for t in toggles) for r in table]
    fig, ax = plt.subplots(figsize=(1.6 * max(len(table), 2) + 1, 3.5))
    ax.bar(range(len(table)), [0.0 if r["status"] != "ok" else r["AIOU"] for r in table])
    ax.set_xticks(range(len(table)))
    ax.set_xticklabels(labels, fontsize=7)
    ax.set_ylabel("AIOU")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _ArgumentParser(prog="sas-saliency", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)
    sub.add_parser("generate", parents=[common], help="render a synthetic scene tree")
    p = sub.add_parser("train", parents=[common], help="train and test one split")
    p.add_argument("--data", help="scene tree from 'generate' (default: synthesize from the config)")
    p.add_argument("--flow-checkpoint", help="flow network for multi-view aggregation")
    p = sub.add_parser("infer", parents=[common], help="saliency maps and boxes per image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="scene tree, scene directory, PNG image or PNG directory")
    p.add_argument("--flow-checkpoint")
    p = sub.add_parser("eval", parents=[common], help="metrics of saved maps against masks")
    p.add_argument("--pred", required=True, help="directory of <name>_saliency.npy maps")
    p.add_argument("--data", required=True, help="scene tree or directory of <name>_mask.png files")
    sub.add_parser("flow", parents=[common], help="train and evaluate the flow network")
    p = sub.add_parser("ablate", parents=[common], help="train every on/off combination of the toggles")
    p.add_argument("--toggles", required=True, help=f"comma-separated subset of {', '.join(ex.ABLATION_TOGGLES)}")
    p.add_argument("--data")
    p.add_argument("--flow-checkpoint")
    return parser


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval, "flow": cmd_flow,
            "ablate": cmd_ablate}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"sas-saliency: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"sas-saliency: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DigestMismatch as exc:
        print(f"sas-saliency: {exc}", file=sys.stderr)
        return EXIT_DIGEST
    except MalformedDataset as exc:
        print(f"sas-saliency: malformed dataset: {exc}", file=sys.stderr)
        return EXIT_BAD_DATA
    except FileNotFoundError as exc:
        print(f"sas-saliency: {exc}", file=sys.stderr)
        return EXIT_BAD_DATA


if __name__ == "__main__":
    sys.exit(main())
