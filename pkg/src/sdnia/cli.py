"""Command-line entry points: stylize, build-dataset, train, eval, detect, ablate.

Every command reads an optional YAML config with one section per command
(plus top-level ``seed`` and ``run_dir``), applies ``--set section.key=value``
overrides and explicit flags, validates everything, and only then touches
the run directory. Exit codes: 0 ok, 1 validation error, 2 runtime failure,
3 partial failure (some images or cells failed).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import warnings
from dataclasses import fields, replace
from pathlib import Path

import numpy as np
import yaml

log = logging.getLogger("sdnia")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_PARTIAL = 0, 1, 2, 3
VARIANTS = {
    "baseline": dict(use_stylized_data=False, use_nia=False),
    "sd": dict(use_stylized_data=True, use_nia=False),
    "nia": dict(use_stylized_data=False, use_nia=True),
    "sdnia": dict(use_stylized_data=True, use_nia=True),
}
CACHE_ENV = "SDNIA_CACHE_DIR"
PRODUCED = "produced_files.json"


class ValidationError(ValueError):
    pass


class PartialFailure(RuntimeError):
    pass


# ---------------------------------------------------------------- config plumbing

def load_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"config file not found: {p}")
    data = yaml.safe_load(p.read_text()) or {}
    if not isinstance(data, dict):
        raise ValidationError(f"{p}: top level must be a mapping")
    return data


def apply_overrides(cfg: dict, overrides) -> dict:
    """``a.b=value`` pairs; values are parsed as YAML scalars/lists."""
    for item in overrides or []:
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        node = cfg
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ValidationError(f"--set {key}: {part} is not a section")
        node[parts[-1]] = yaml.safe_load(raw)
    return cfg


def section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name) or {}
    if not isinstance(sec, dict):
        raise ValidationError(f"config section {name!r} must be a mapping")
    return dict(sec)


def _existing(path, what) -> Path:
    if path is None:
        raise ValidationError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"{what} not found: {p}")
    return p


def _named_paths(items, what) -> dict[str, Path]:
    """``NAME=path`` (or a bare path, named after its parent directory)."""
    if isinstance(items, dict):
        items = [f"{k}={v}" for k, v in items.items()]
    out = {}
    for item in items or []:
        name, path = item.split("=", 1) if "=" in item else (Path(item).parent.name, item)
        if name in out:
            raise ValidationError(f"duplicate {what} name {name!r}")
        out[name] = _existing(path, f"{what} {name!r}")
    return out


def _alphas(values) -> list[float]:
    if isinstance(values, str):
        values = [v for v in values.split(",") if v.strip()]
    out = [float(v) for v in values]
    if not out:
        raise ValidationError("at least one alpha is required")
    bad = [a for a in out if not 0.0 <= a <= 1.0]
    if bad:
        raise ValidationError(f"alpha must be in [0, 1], got {bad}")
    return out


def cache_dir() -> Path | None:
    d = os.environ.get(CACHE_ENV)
    if not d:
        return None
    p = Path(d)
    p.mkdir(parents=True, exist_ok=True)
    os.environ.setdefault("TORCH_HOME", str(p / "torch"))
    return p


def write_produced(run_dir: Path) -> Path:
    """List every file under the run directory with its size and sha256."""
    files = []
    for p in sorted(run_dir.rglob("*")):
        if p.is_file() and p.name != PRODUCED:
            files.append({"path": str(p.relative_to(run_dir)), "bytes": p.stat().st_size,
                          "sha256": hashlib.sha256(p.read_bytes()).hexdigest()})
    out = run_dir / PRODUCED
    out.write_text(json.dumps({"run_dir": str(run_dir), "files": files}, indent=1))
    return out


def _run_dir(args, cfg, default: str) -> Path:
    return Path(args.out or cfg.get("run_dir") or default)


# ---------------------------------------------------------------- stylize

def _style_images(source, size: int, seed: int, names=None) -> dict[str, np.ndarray]:
    from .imagery import read_image
    from .stylizer import make_style_images

    if source in (None, "builtin"):
        styles = make_style_images(size, seed)
    else:
        d = _existing(source, "style image directory")
        paths = sorted(p for p in d.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"))
        if not paths:
            raise ValidationError(f"no style images in {d}")
        styles = {p.stem: read_image(p) for p in paths}
    if names:
        missing = [n for n in names if n not in styles]
        if missing:
            raise ValidationError(f"unknown style ids {missing}; available: {sorted(styles)}")
        styles = {n: styles[n] for n in names}
    return styles


def _validate_stylize(sec: dict, seed: int):
    from .stylizer import BackendError, get_backend

    content = _existing(sec.get("content"), "content manifest")
    alphas = _alphas(sec.get("alphas", [1.0]))
    try:
        backend = get_backend(sec.get("backend", "procedural"), sec.get("weights"))
    except (BackendError, OSError, RuntimeError) as exc:
        raise ValidationError(str(exc)) from exc
    names = sec.get("style_names")
    if isinstance(names, str):
        names = names.split(",")
    styles = _style_images(sec.get("styles", "builtin"), int(sec.get("style_size", 64)), seed, names)
    return content, alphas, backend, styles


def cmd_stylize(args, cfg) -> int:
    from .imagery import load_dataset, save_dataset
    from .stylizer import StyleCache, batch_stylize

    sec = section(cfg, "stylize")
    for k in ("content", "styles", "alphas", "backend", "weights"):
        if getattr(args, k, None) is not None:
            sec[k] = getattr(args, k)
    seed = int(cfg.get("seed", 0))
    content_path, alphas, backend, styles = _validate_stylize(sec, seed)
    contents = load_dataset(content_path)
    run_dir = _run_dir(args, cfg, "runs/stylize")

    cdir = cache_dir()
    cache = StyleCache(cdir / f"style_vectors_{backend.name}.json") if cdir else None
    out = batch_stylize(backend, contents, styles, alphas, cache=cache)
    if cache is not None:
        cache.save()
    path = save_dataset(out, run_dir / "stylized")
    n_c, n_s, n_a = len(contents), len(styles), len(alphas)
    print(f"stylized {len(out)} images = N_c x N_s x N_alpha = {n_c} x {n_s} x {n_a} = {n_c * n_s * n_a}"
          + (f" minus {len(out.diagnostics)} failures" if out.diagnostics else ""))
    print(f"manifest: {path}")
    write_produced(run_dir)
    if out.diagnostics:
        for msg in out.diagnostics:
            print(f"  failed: {msg}", file=sys.stderr)
        raise PartialFailure(f"{len(out.diagnostics)} stylizations failed")
    return EXIT_OK


# ---------------------------------------------------------------- build-dataset

def cmd_build_dataset(args, cfg) -> int:
    from .imagery import (degrade_dataset, filter_classes, load_dataset, mix_datasets, save_dataset,
                          stratified_split)
    from .shapes import make_shapes_dataset

    sec = section(cfg, "build")
    for k in ("source", "manifest", "n", "size", "split", "degrade", "mix_with", "val_fraction", "classes"):
        v = getattr(args, k, None)
        if v is not None:
            sec[k] = v
    seed = int(cfg.get("seed", 0))
    source = sec.get("source", "manifest" if sec.get("manifest") else "shapes")
    if source not in ("shapes", "manifest"):
        raise ValidationError(f"build.source must be 'shapes' or 'manifest', got {source!r}")
    manifest = _existing(sec.get("manifest"), "source manifest") if source == "manifest" else None
    mix_with = _existing(sec["mix_with"], "stylized manifest") if sec.get("mix_with") else None
    degrade = sec.get("degrade") or []
    if isinstance(degrade, str):
        degrade = [d for d in degrade.split(",") if d]
    if any(d not in ("fog", "gamma") for d in degrade):
        raise ValidationError(f"degrade kinds must be fog/gamma, got {degrade}")
    val_fraction = float(sec.get("val_fraction", 0.0))
    if not 0.0 <= val_fraction < 1.0:
        raise ValidationError(f"val_fraction must be in [0, 1), got {val_fraction}")
    classes = sec.get("classes")
    if isinstance(classes, str):
        classes = classes.split(",")
    n, size = int(sec.get("n", 200)), int(sec.get("size", 64))
    split = sec.get("split", "train")
    if source == "shapes" and (n < 1 or size < 32):
        raise ValidationError("shapes source needs n >= 1 and size >= 32")
    run_dir = _run_dir(args, cfg, "runs/dataset")

    if source == "shapes":
        ds = make_shapes_dataset(n, size, seed=seed, split=split, name=sec.get("name", "shapes"))
    else:
        ds = load_dataset(manifest, load_pixels=True)
        if ds.diagnostics:
            for d in ds.diagnostics:
                print(f"  {d}", file=sys.stderr)
    if classes:
        ds = filter_classes(ds, classes)
    if degrade:
        parts = [degrade_dataset(ds, kind, seed=seed + 1 + i) for i, kind in enumerate(degrade)]
        entries = (ds.entries if sec.get("keep_clean", False) else ()) + sum((p.entries for p in parts), ())
        ds = replace(ds, name=f"{ds.name}_{'_'.join(degrade)}", entries=entries)
    if mix_with is not None:
        ds = mix_datasets(ds, load_dataset(mix_with, load_pixels=True))
    written = {}
    if val_fraction > 0:
        tr, va = stratified_split(ds, val_fraction, seed=seed)
        written["train"] = save_dataset(tr, run_dir / "train")
        written["val"] = save_dataset(va, run_dir / "val")
    else:
        written[ds.split] = save_dataset(ds, run_dir / "dataset")
    for k, p in written.items():
        print(f"{k}: {p}")
    origins = {}
    for e in ds.entries:
        origins[e.origin] = origins.get(e.origin, 0) + 1
    print(f"{len(ds)} images, classes {list(ds.class_names)}, origins {origins}")
    write_produced(run_dir)
    return EXIT_OK


# ---------------------------------------------------------------- train

def _train_config(sec: dict, seed: int, variant: str | None):
    from .training import TrainConfig

    known = {f.name for f in fields(TrainConfig)}
    extra = set(sec) - known - {"train_manifest", "val_manifest", "val_fraction"}
    if extra:
        raise ValidationError(f"unknown train settings {sorted(extra)}")
    kw = {k: v for k, v in sec.items() if k in known}
    kw.setdefault("seed", seed)
    if variant is not None:
        if variant not in VARIANTS:
            raise ValidationError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
        kw.update(VARIANTS[variant])
    try:
        return TrainConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"invalid train config: {exc}") from exc


def _detector_config(sec: dict, num_classes: int):
    from .detector import DetectorConfig

    try:
        return DetectorConfig.from_dict({**sec, "num_classes": num_classes})
    except (TypeError, ValueError, KeyError) as exc:
        raise ValidationError(f"invalid detector config: {exc}") from exc


def _load_train_val(sec: dict, seed: int):
    from .imagery import load_dataset, stratified_split

    train_path = _existing(sec.get("train_manifest"), "train manifest")
    val_path = _existing(sec["val_manifest"], "val manifest") if sec.get("val_manifest") else None
    tr = load_dataset(train_path, load_pixels=True)
    if val_path is not None:
        va = load_dataset(val_path, load_pixels=True)
    else:
        tr, va = stratified_split(tr, float(sec.get("val_fraction", 0.1)), seed=seed)
    if tuple(tr.class_names) != tuple(va.class_names):
        raise ValidationError("train and val manifests have different class universes")
    return tr, va


def cmd_train(args, cfg) -> int:
    from .training import DivergenceError, train

    sec = section(cfg, "train")
    if args.train_manifest:
        sec["train_manifest"] = args.train_manifest
    if args.val_manifest:
        sec["val_manifest"] = args.val_manifest
    seed = int(cfg.get("seed", 0))
    tcfg = _train_config(sec, seed, args.variant)
    resume = _existing(args.resume, "resume checkpoint") if args.resume else None
    tr, va = _load_train_val(sec, seed)
    dcfg = _detector_config(section(cfg, "detector"), len(tr.class_names))
    run_dir = _run_dir(args, cfg, "runs/train")
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(yaml.safe_dump(
        {"seed": seed, "train": {**sec, **tcfg.to_dict()}, "detector": dcfg.to_dict()}, sort_keys=False))
    cache_dir()
    try:
        res = train(tcfg, tr, va, dcfg, out_dir=run_dir, resume_from=resume)
    except DivergenceError as exc:
        write_produced(run_dir)
        print(f"training diverged: {exc}; last good checkpoint in {run_dir / 'best.pt'}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"best val mAP@.5 = {res.state.best_val_metric:.4f} at epoch {res.state.best_epoch} "
          f"({res.state.epoch} epochs{', early stop' if res.stopped_early else ''})")
    print(f"checkpoint: {run_dir / 'best.pt'}")
    write_produced(run_dir)
    return EXIT_OK


# ---------------------------------------------------------------- eval

def _check_universe(ckpt_classes, ds, name):
    if tuple(ckpt_classes) != tuple(ds.class_names):
        raise ValidationError(
            f"class universe mismatch: checkpoint was trained on {list(ckpt_classes)} but test set "
            f"{name!r} has {list(ds.class_names)}; rebuild the test set with the same classes (build-dataset --classes)")


def format_columns(reports: dict) -> str:
    names = list(reports)
    lines = [f"{'':<10s}" + "".join(f"{n:>14s}" for n in names)]
    lines.append(f"{'mAP@.5':<10s}" + "".join(f"{reports[n].map_50:>14.4f}" for n in names))
    lines.append(f"{'mAP@.5:.95':<10s}" + "".join(f"{reports[n].map_50_95:>14.4f}" for n in names))
    return "\n".join(lines)


def cmd_eval(args, cfg) -> int:
    from .evaluation import latency_comparison, map_range, read_detections
    from .imagery import load_dataset
    from .training import evaluate_model, load_checkpoint

    sec = section(cfg, "eval")
    tests = _named_paths(args.test or sec.get("tests"), "test manifest")
    if not tests:
        raise ValidationError("at least one --test manifest is required")
    ckpt = args.checkpoint or sec.get("checkpoint")
    dets_path = args.detections or sec.get("detections")
    if (ckpt is None) == (dets_path is None):
        raise ValidationError("give exactly one of --checkpoint or --detections")
    if args.latency and ckpt is None:
        raise ValidationError("--latency needs a checkpoint")
    datasets = {n: load_dataset(p, load_pixels=ckpt is not None) for n, p in tests.items()}
    conf = float(args.conf if args.conf is not None else sec.get("conf_threshold", 0.01))
    run_dir = _run_dir(args, cfg, "runs/eval")

    reports = {}
    if ckpt is not None:
        model, meta = load_checkpoint(_existing(ckpt, "checkpoint"))
        for n, ds in datasets.items():
            _check_universe(meta["class_names"], ds, n)
        size = (meta.get("train_config") or {}).get("image_size")
        for n, ds in datasets.items():
            reports[n] = evaluate_model(model, ds, size, conf)
        if args.latency:
            sizes = [int(s) for s in sec.get("latency_sizes", [size or 64, 2 * (size or 64)])]
            lat = latency_comparison(model, model.detector, sizes)
            for rep in reports.values():
                rep.latency_ms = lat
    else:
        records = read_detections(_existing(dets_path, "detections file"))
        for n, ds in datasets.items():
            dets = [records.get(e.image_id, []) for e in ds.entries]
            reports[n] = map_range(dets, [list(e.boxes) for e in ds.entries], ds.class_names)
    run_dir.mkdir(parents=True, exist_ok=True)
    for n, rep in reports.items():
        rep.save(run_dir / f"report_{n}.json")
    table = format_columns(reports)
    print(table)
    if args.latency:
        lat = next(iter(reports.values())).latency_ms
        print("latency (ms, mean)        sdnia   detector   nia overhead")
        for s, row in lat.items():
            print(f"  {s:<20s} {row['sdnia_ms']:>9.2f} {row['detector_ms']:>10.2f} {row['nia_overhead_ms']:>14.2f}")
    (run_dir / "table.txt").write_text(table + "\n")
    write_produced(run_dir)
    return EXIT_OK


# ---------------------------------------------------------------- detect

def draw_overlay(image: np.ndarray, dets, class_names) -> np.ndarray:
    from PIL import Image, ImageDraw

    img = Image.fromarray((np.clip(image, 0, 1) * 255).round().astype(np.uint8))
    draw = ImageDraw.Draw(img)
    h, w = image.shape[:2]
    for d in dets:
        x1, y1, x2, y2 = d.box.xyxy
        draw.rectangle([x1 * w, y1 * h, x2 * w - 1, y2 * h - 1], outline=(255, 40, 40))
        label = class_names[d.class_id] if d.class_id < len(class_names) else str(d.class_id)
        draw.text((x1 * w + 1, y1 * h + 1), f"{label} {d.confidence:.2f}", fill=(255, 255, 0))
    return np.asarray(img, dtype=np.float64) / 255.0


def cmd_detect(args, cfg) -> int:
    import torch

    from .evaluation import detections_to_records, write_detections
    from .imagery import read_image, write_image
    from .training import load_checkpoint, to_tensor

    sec = section(cfg, "detect")
    ckpt = _existing(args.checkpoint or sec.get("checkpoint"), "checkpoint")
    images = [Path(p) for p in (args.images or sec.get("images") or [])]
    if not images:
        raise ValidationError("no input images given")
    conf = float(args.conf if args.conf is not None else sec.get("conf_threshold", 0.25))
    model, meta = load_checkpoint(ckpt)
    size = args.size or (meta.get("train_config") or {}).get("image_size")
    run_dir = _run_dir(args, cfg, "runs/detect")
    (run_dir / "adapted").mkdir(parents=True, exist_ok=True)
    (run_dir / "overlay").mkdir(parents=True, exist_ok=True)

    records, summary, skipped = [], [], []
    for p in images:
        try:
            pix = read_image(p)
        except Exception as exc:
            warnings.warn(f"skipping unreadable image {p}: {exc}", stacklevel=2)
            skipped.append(str(p))
            continue
        x = to_tensor([pix], size, next(model.parameters()).dtype)
        with torch.no_grad():
            adapted = model.adapt(x)[0].permute(1, 2, 0).numpy()
            dets = model.detect(x, conf)[0]
        write_image(run_dir / "adapted" / f"{p.stem}.png", adapted)
        write_image(run_dir / "overlay" / f"{p.stem}.png", draw_overlay(adapted, dets, meta["class_names"]))
        records.extend(detections_to_records(p.stem, dets))
        summary.append({"image": str(p), "image_id": p.stem, "detections": len(dets)})
        print(f"{p}: {len(dets)} detections")
    write_detections(run_dir / "detections.jsonl", records)
    (run_dir / "summary.json").write_text(json.dumps({"images": summary, "skipped": skipped}, indent=1))
    write_produced(run_dir)
    if skipped:
        raise PartialFailure(f"{len(skipped)} unreadable images skipped")
    return EXIT_OK


# ---------------------------------------------------------------- ablate

def cmd_ablate(args, cfg) -> int:
    from .evaluation import GRIDS, run_ablation
    from .imagery import load_dataset, mix_datasets
    from .losses import LossWeights
    from .stylizer import batch_stylize
    from .training import evaluate_model, train

    grid = args.grid or section(cfg, "ablate").get("grid")
    if grid not in GRIDS:
        raise ValidationError(f"unknown grid {grid!r}; choose from {sorted(GRIDS)}")
    sec = section(cfg, "train")
    if args.train_manifest:
        sec["train_manifest"] = args.train_manifest
    if args.val_manifest:
        sec["val_manifest"] = args.val_manifest
    seed = int(cfg.get("seed", 0))
    base = _train_config(sec, seed, None)
    ssec = section(cfg, "stylize")
    ssec.setdefault("content", sec.get("train_manifest"))
    _, alphas, backend, styles = _validate_stylize(ssec, seed)
    tests = _named_paths(args.test or section(cfg, "ablate").get("tests"), "test manifest")
    if not tests:
        raise ValidationError("at least one --test manifest is required")
    tr, va = _load_train_val(sec, seed)
    originals = replace(tr, entries=tuple(e for e in tr.entries if e.origin == "original"))
    test_sets = {n: load_dataset(p, load_pixels=True) for n, p in tests.items()}
    for n, ds in test_sets.items():
        _check_universe(tr.class_names, ds, n)
    dcfg = _detector_config(section(cfg, "detector"), len(tr.class_names))
    run_dir = _run_dir(args, cfg, f"runs/ablate_{grid}")
    run_dir.mkdir(parents=True, exist_ok=True)
    stylized_cache = {}

    def mixed_for(alpha_list):
        key = tuple(alpha_list)
        if key not in stylized_cache:
            sty = batch_stylize(backend, originals, styles, list(alpha_list))
            stylized_cache[key] = mix_datasets(originals, sty)
        return stylized_cache[key]

    def run_cell(row, overrides):
        cfg_cell = base
        cell_alphas = overrides.pop("alphas", None)
        if cell_alphas is not None:
            cfg_cell = replace(cfg_cell, use_stylized_data=True, use_nia=True)
        weight_keys = {f.name for f in fields(LossWeights)}
        wov = {k: overrides.pop(k) for k in list(overrides) if k in weight_keys}
        if wov:
            cfg_cell = replace(cfg_cell, loss_weights=replace(cfg_cell.loss_weights, **wov), use_nia=True)
        cfg_cell = replace(cfg_cell, **overrides)
        data = mixed_for(cell_alphas or alphas) if cfg_cell.use_stylized_data else originals
        res = train(cfg_cell, data, va, dcfg, out_dir=run_dir / "cells" / row.replace("/", "_"))
        return {n: evaluate_model(res.model, ds, cfg_cell.image_size) for n, ds in test_sets.items()}

    result = run_ablation(grid, run_cell, columns=list(test_sets), state_dir=run_dir / "state",
                          resume=args.resume)
    table = result.table()
    print(table)
    (run_dir / "ablation.txt").write_text(table + "\n")
    (run_dir / "ablation.json").write_text(json.dumps(result.to_dict(), indent=1))
    write_produced(run_dir)
    if result.errors:
        for row, err in result.errors.items():
            print(f"  cell {row} failed: {err}", file=sys.stderr)
        raise PartialFailure(f"{len(result.errors)} ablation cells failed")
    return EXIT_OK


# ---------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sdnia", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. train.learning_rate=0.02")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="run directory")
        return sp

    sp = common(sub.add_parser("stylize", help="stylize a content manifest with style images"))
    sp.add_argument("--content")
    sp.add_argument("--styles", help="directory of style images, or 'builtin'")
    sp.add_argument("--alphas", help="comma-separated stylization strengths")
    sp.add_argument("--backend", choices=["procedural", "torchscript", "pretrained"])
    sp.add_argument("--weights")

    sp = common(sub.add_parser("build-dataset", help="ingest, filter, degrade, mix and split datasets"))
    sp.add_argument("--source", choices=["shapes", "manifest"])
    sp.add_argument("--manifest")
    sp.add_argument("--n", type=int)
    sp.add_argument("--size", type=int)
    sp.add_argument("--split", choices=["train", "val", "test"])
    sp.add_argument("--classes", help="comma-separated class names to keep")
    sp.add_argument("--degrade", help="comma-separated: fog, gamma")
    sp.add_argument("--mix-with", dest="mix_with")
    sp.add_argument("--val-fraction", dest="val_fraction", type=float)

    sp = common(sub.add_parser("train", help="train NIA and detector jointly"))
    sp.add_argument("--train-manifest", dest="train_manifest")
    sp.add_argument("--val-manifest", dest="val_manifest")
    sp.add_argument("--variant", choices=sorted(VARIANTS))
    sp.add_argument("--resume", help="checkpoint to continue from (last.pt)")

    sp = common(sub.add_parser("eval", help="mAP reports for one or more test sets"))
    sp.add_argument("--checkpoint")
    sp.add_argument("--detections", help="evaluate precomputed detection records instead")
    sp.add_argument("--test", action="append", metavar="NAME=MANIFEST")
    sp.add_argument("--conf", type=float)
    sp.add_argument("--latency", action="store_true", help="add SDNIA vs detector-only timing")

    sp = common(sub.add_parser("detect", help="adapted images, overlays and detection records"))
    sp.add_argument("--checkpoint")
    sp.add_argument("images", nargs="*")
    sp.add_argument("--conf", type=float)
    sp.add_argument("--size", type=int)

    sp = common(sub.add_parser("ablate", help="run an ablation grid"))
    sp.add_argument("--grid", choices=["table5", "table6", "table7"])
    sp.add_argument("--train-manifest", dest="train_manifest")
    sp.add_argument("--val-manifest", dest="val_manifest")
    sp.add_argument("--test", action="append", metavar="NAME=MANIFEST")
    sp.add_argument("--resume", action="store_true", help="reuse finished cells")
    return p


COMMANDS = {"stylize": cmd_stylize, "build-dataset": cmd_build_dataset, "train": cmd_train,
            "eval": cmd_eval, "detect": cmd_detect, "ablate": cmd_ablate}


def main(argv=None) -> int:
    from .imagery import DatasetError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = apply_overrides(load_config(args.config), args.set)
        if args.seed is not None:
            cfg["seed"] = args.seed
        return COMMANDS[args.command](args, cfg)
    except (ValidationError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except PartialFailure as exc:
        print(f"partial failure: {exc}", file=sys.stderr)
        return EXIT_PARTIAL
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
