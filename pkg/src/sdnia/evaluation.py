"""IoU, average precision, COCO-style mAP, latency, and the ablation runner."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .imagery import BoundingBox

log = logging.getLogger(__name__)

COCO_THRESHOLDS = tuple(np.round(0.5 + 0.05 * np.arange(10), 2).tolist())


def iou_xyxy(a: Sequence[float], b: Sequence[float]) -> float:
    """IoU of two corner-form rectangles ``(x1, y1, x2, y2)``."""
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    if ax2 <= ax1 or ay2 <= ay1 or bx2 <= bx1 or by2 <= by1:
        raise ValueError(f"degenerate box in iou: {a}, {b}")
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    return iou_xyxy(a.xyxy, b.xyxy)


def _match(dets, gts, thr):
    """Greedy matching in confidence order (stable: ties keep input order).

    Each detection takes the unmatched ground truth with the highest IoU
    ``>= thr``. Returns the TP flag per detection, in sorted order, and the
    sorted confidences.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].confidence)
    taken = [False] * len(gts)
    tp = np.zeros(len(dets), dtype=bool)
    for rank, i in enumerate(order):
        best, best_iou = -1, -1.0
        for j, g in enumerate(gts):
            if taken[j]:
                continue
            v = iou(dets[i].box, g)
            if v >= thr and v > best_iou:
                best, best_iou = j, v
        if best >= 0:
            taken[best] = True
            tp[rank] = True
    return tp, np.array([dets[i].confidence for i in order])


def ap_from_pr(tp: np.ndarray, n_gt: int, method: str = "coco101") -> float:
    """AP from a ranked TP/FP sequence.

    ``coco101`` averages the interpolated precision at recall 0, 0.01, ..., 1;
    ``continuous`` integrates the interpolated precision envelope exactly.
    """
    if n_gt == 0:
        return math.nan
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    if method == "coco101":
        points = np.linspace(0.0, 1.0, 101)
        idx = np.searchsorted(recall, points, side="left")
        vals = np.where(idx < len(recall), envelope[np.minimum(idx, len(recall) - 1)], 0.0)
        return float(vals.mean())
    if method == "continuous":
        r = np.concatenate([[0.0], recall])
        return float(np.sum((r[1:] - r[:-1]) * envelope))
    raise ValueError(f"unknown AP method {method!r}")


def average_precision(dets, gts: Sequence[BoundingBox], iou_threshold: float = 0.5,
                      method: str = "coco101") -> float:
    """AP of one class on one image. NaN when there is nothing to find."""
    tp, _ = _match(list(dets), list(gts), iou_threshold)
    return ap_from_pr(tp, len(gts), method)


@dataclass
class EvalReport:
    per_class_ap: dict[str, dict[float, float]]
    map_50: float
    map_50_95: float
    counts: dict[str, int]
    thresholds: tuple[float, ...] = COCO_THRESHOLDS
    latency_ms: dict | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class_ap"] = {c: {f"{t:.2f}": (None if math.isnan(v) else v) for t, v in aps.items()}
                             for c, aps in self.per_class_ap.items()}
        for k in ("map_50", "map_50_95"):
            if math.isnan(d[k]):
                d[k] = None
        return d

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def summary(self) -> str:
        lines = [f"mAP@.5 = {self.map_50:.4f}   mAP@.5:.95 = {self.map_50_95:.4f}   "
                 f"({self.counts['images']} images, {self.counts['gts']} gts, {self.counts['dets']} dets)"]
        for c, aps in self.per_class_ap.items():
            lines.append(f"  {c:<16s} AP@.5 = {aps.get(0.5, math.nan):.4f}")
        if self.latency_ms:
            for k, v in self.latency_ms.items():
                lines.append(f"  latency {k}: {v}")
        return "\n".join(lines)


def map_range(per_image_dets: Sequence[Sequence], per_image_gts: Sequence[Sequence[BoundingBox]],
              class_names: Sequence[str], thresholds: Sequence[float] = COCO_THRESHOLDS,
              method: str = "coco101") -> EvalReport:
    """Pool detections across images per class and average AP over thresholds and classes.

    Matching is done per image. Classes without ground truth are excluded
    from the class mean.
    """
    if len(per_image_gts) == 0:
        raise ValueError("empty test set")
    if len(per_image_dets) != len(per_image_gts):
        raise ValueError("detections and ground truth cover different numbers of images")
    thresholds = tuple(float(t) for t in thresholds)
    per_class: dict[str, dict[float, float]] = {}
    n_gt = sum(len(g) for g in per_image_gts)
    n_det = sum(len(d) for d in per_image_dets)
    for c, cname in enumerate(class_names):
        gts_c = [[g for g in gts if g.class_id == c] for gts in per_image_gts]
        dets_c = [[d for d in dets if d.class_id == c] for dets in per_image_dets]
        total_gt = sum(len(g) for g in gts_c)
        aps = {}
        for thr in thresholds:
            flags, confs = [], []
            for d, g in zip(dets_c, gts_c):
                tp, conf = _match(d, g, thr)
                flags.append(tp)
                confs.append(conf)
            tp_all = np.concatenate(flags) if flags else np.zeros(0, bool)
            conf_all = np.concatenate(confs) if confs else np.zeros(0)
            order = np.argsort(-conf_all, kind="stable")
            aps[thr] = ap_from_pr(tp_all[order], total_gt, method)
        per_class[cname] = aps
    scored = [aps for aps in per_class.values() if not math.isnan(next(iter(aps.values())))]
    if scored:
        t50 = 0.5 if 0.5 in thresholds else thresholds[0]
        map_50 = float(np.mean([aps[t50] for aps in scored]))
        map_all = float(np.mean([[aps[t] for t in thresholds] for aps in scored]))
    else:
        map_50 = map_all = math.nan
    return EvalReport(per_class, map_50, map_all,
                      {"images": len(per_image_gts), "gts": n_gt, "dets": n_det}, thresholds)


# ---------------------------------------------------------------- latency

def measure_latency(model: Callable, input_size: int | tuple[int, int], n_warmup: int = 3,
                    n_runs: int = 20, dtype=None) -> dict:
    """Wall-clock forward time for one ``1 x 3 x H x W`` input, warmups excluded."""
    import torch

    h, w = (input_size, input_size) if isinstance(input_size, int) else input_size
    if dtype is None:
        params = list(model.parameters()) if hasattr(model, "parameters") else []
        dtype = params[0].dtype if params else torch.float32
    x = torch.rand(1, 3, h, w, dtype=dtype, generator=torch.Generator().manual_seed(0))
    times = []
    with torch.no_grad():
        for _ in range(n_warmup):
            model(x)
        for _ in range(max(n_runs, 1)):
            t0 = time.perf_counter()
            model(x)
            times.append((time.perf_counter() - t0) * 1e3)
    arr = np.array(times)
    p95 = float(arr[0]) if arr.size == 1 else float(np.percentile(arr, 95))
    return {"size": f"{h}x{w}", "mean": float(arr.mean()), "p95": p95, "n_runs": int(arr.size)}


def latency_comparison(full_model, detector_only, sizes=(64, 128), n_warmup=2, n_runs=10) -> dict:
    """Per-size latency for the adapted pipeline, the bare detector, and their difference."""
    out = {}
    for s in sizes:
        full = measure_latency(full_model, s, n_warmup, n_runs)
        det = measure_latency(detector_only, s, n_warmup, n_runs)
        out[f"{s}x{s}"] = {"sdnia_ms": full["mean"], "detector_ms": det["mean"],
                           "nia_overhead_ms": full["mean"] - det["mean"],
                           "sdnia_p95_ms": full["p95"], "detector_p95_ms": det["p95"]}
    return out


# ---------------------------------------------------------------- ablations

TABLE5_ROWS = {
    "M+l1": {"alpha_res": 0.25, "beta_res": 0.25, "gamma_res": 0.0},
    "VGG_P": {"alpha_res": 0.0, "beta_res": 0.0, "gamma_res": 0.5},
    "M+l1+VGG_P": {"alpha_res": 0.25, "beta_res": 0.25, "gamma_res": 0.5},
}
TABLE6_ROWS = {
    "YOLOv3": {"use_stylized_data": False, "use_nia": False},
    "SD-YOLOv3": {"use_stylized_data": True, "use_nia": False},
    "NIA-YOLOv3": {"use_stylized_data": False, "use_nia": True},
    "SDNIA-YOLOv3": {"use_stylized_data": True, "use_nia": True},
}


def alpha_range(low: float, high: float = 1.0, step: float = 0.2) -> list[float]:
    n = int(round((high - low) / step))
    return [round(low + i * step, 10) for i in range(n + 1)]


TABLE7_ROWS = {
    "1.0": {"alphas": [1.0]},
    "[0.8:1.0]": {"alphas": alpha_range(0.8)},
    "[0.6:1.0]": {"alphas": alpha_range(0.6)},
    "[0.4:1.0]": {"alphas": alpha_range(0.4)},
    "[0.2:1.0]": {"alphas": alpha_range(0.2)},
}
GRIDS = {"table5": TABLE5_ROWS, "table6": TABLE6_ROWS, "table7": TABLE7_ROWS}


@dataclass
class AblationResult:
    grid: str
    rows: list[str]
    columns: list[str]
    cells: dict[str, dict[str, EvalReport | None]] = field(default_factory=dict)
    errors: dict[str, str] = field(default_factory=dict)

    def table(self) -> str:
        width = max([len(r) for r in self.rows] + [8])
        head = f"{'variant':<{width}s}  " + "  ".join(f"{c:>17s}" for c in self.columns)
        lines = [f"{self.grid.upper()}  (mAP@.5 / mAP@.5:.95, percent)", head]
        for r in self.rows:
            cells = []
            for c in self.columns:
                rep = self.cells.get(r, {}).get(c)
                cells.append(f"{100 * rep.map_50:6.2f} / {100 * rep.map_50_95:6.2f}" if rep else f"{'failed':>17s}")
            lines.append(f"{r:<{width}s}  " + "  ".join(f"{s:>17s}" for s in cells))
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"grid": self.grid, "rows": self.rows, "columns": self.columns,
                "cells": {r: {c: (rep.to_dict() if rep else None) for c, rep in cols.items()}
                          for r, cols in self.cells.items()},
                "errors": self.errors}


def run_ablation(grid: str | dict[str, dict], run_cell: Callable[[str, dict], dict[str, EvalReport]],
                 columns: Sequence[str] = (), state_dir: str | Path | None = None,
                 resume: bool = False) -> AblationResult:
    """Train and evaluate every variant row of a grid.

    ``grid`` is a grid name (``table5``, ``table6``, ``table7``) or a mapping
    ``row name -> config overrides``. ``run_cell(row, overrides)`` returns one
    report per test-set column. A failing cell is recorded and the grid
    continues. With ``state_dir`` each finished cell is persisted; with
    ``resume`` those are reused instead of re-run.
    """
    name, rows = (grid, GRIDS[grid]) if isinstance(grid, str) else ("custom", grid)
    result = AblationResult(name, list(rows), list(columns))
    state = Path(state_dir) if state_dir else None
    if state:
        state.mkdir(parents=True, exist_ok=True)
    for row, overrides in rows.items():
        cell_file = state / f"{name}__{_slug(row)}.json" if state else None
        if resume and cell_file and cell_file.exists():
            log.info("ablation %s/%s: reusing %s", name, row, cell_file)
            result.cells[row] = {c: report_from_dict(d) for c, d in json.loads(cell_file.read_text()).items()}
            continue
        try:
            reports = run_cell(row, dict(overrides))
        except Exception as exc:
            log.exception("ablation cell %s/%s failed", name, row)
            result.errors[row] = f"{type(exc).__name__}: {exc}"
            result.cells[row] = {c: None for c in result.columns}
            continue
        if not result.columns:
            result.columns = list(reports)
        result.cells[row] = dict(reports)
        if cell_file:
            cell_file.write_text(json.dumps({c: r.to_dict() for c, r in reports.items()}))
    return result


def _slug(s: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in s)


def report_from_dict(d: dict) -> EvalReport:
    nan = lambda v: math.nan if v is None else float(v)  # noqa: E731
    per_class = {c: {float(t): nan(v) for t, v in aps.items()} for c, aps in d["per_class_ap"].items()}
    return EvalReport(per_class, nan(d["map_50"]), nan(d["map_50_95"]), d["counts"],
                      tuple(d.get("thresholds", COCO_THRESHOLDS)), d.get("latency_ms"))


# ---------------------------------------------------------------- detection records

def detections_to_records(image_id: str, dets) -> list[dict]:
    return [{"image_id": image_id, "class_id": d.class_id, "confidence": d.confidence,
             "class_score": d.class_score, "cx": d.box.cx, "cy": d.box.cy, "w": d.box.w, "h": d.box.h}
            for d in dets]


def write_detections(path: str | Path, records: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


def read_detections(path: str | Path) -> dict[str, list]:
    from .detector import Detection

    out: dict[str, list] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            r = json.loads(line)
            box = BoundingBox(r["class_id"], r["cx"], r["cy"], r["w"], r["h"])
            out.setdefault(r["image_id"], []).append(
                Detection(box, r["confidence"], r["class_id"], r.get("class_score", r["confidence"])))
    return out
