"""Dataset ingestion, class filtering, dataset mixing and photometric degradation.

Images are ``H x W x 3`` float arrays in ``[0, 1]`` (RGB). Boxes are stored in
normalized center form ``(cx, cy, w, h)``.
"""

from __future__ import annotations

import json
import logging
import math
import os
import warnings
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

ORIGINS = ("original", "stylized", "fog_synth", "gamma_synth")
SPLITS = ("train", "val", "test")
GAMMA_RANGE = (1.5, 5.0)


class DatasetError(ValueError):
    """Raised for unrecoverable dataset problems (missing files, bad config)."""


@dataclass(frozen=True)
class BoundingBox:
    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        object.__setattr__(self, "class_id", int(self.class_id))
        for name in ("cx", "cy", "w", "h"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if self.class_id < 0:
            raise ValueError(f"class_id must be >= 0, got {self.class_id}")
        for name in ("cx", "cy"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        for name in ("w", "h"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name}={v} outside (0, 1]")

    @property
    def xyxy(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)

    @classmethod
    def from_xyxy(cls, class_id: int, x1: float, y1: float, x2: float, y2: float) -> "BoundingBox":
        return cls(class_id, (x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    def clipped(self) -> "BoundingBox | None":
        """Clip to the unit square; ``None`` when nothing of the box remains."""
        x1, y1, x2, y2 = self.xyxy
        if x1 >= 0 and y1 >= 0 and x2 <= 1 and y2 <= 1:
            return self
        x1, y1 = max(x1, 0.0), max(y1, 0.0)
        x2, y2 = min(x2, 1.0), min(y2, 1.0)
        if x2 - x1 <= 0 or y2 - y1 <= 0:
            return None
        return BoundingBox.from_xyxy(self.class_id, x1, y1, x2, y2)

    def to_line(self) -> str:
        return f"{self.class_id} {self.cx!r} {self.cy!r} {self.w!r} {self.h!r}"


@dataclass(frozen=True, eq=False)
class LabeledImage:
    """An image plus its boxes.

    ``pixels`` may be left as ``None`` when ``path`` is set; the image is then
    read on first access through :meth:`load`.
    """

    image_id: str
    pixels: np.ndarray | None
    boxes: tuple[BoundingBox, ...] = ()
    origin: str = "original"
    reference_id: str = ""
    path: Path | None = None
    label_path: Path | None = None

    def __post_init__(self):
        if self.origin not in ORIGINS:
            raise ValueError(f"unknown origin {self.origin!r}")
        if not self.reference_id:
            if self.origin != "original":
                raise ValueError(f"{self.image_id}: derived image needs a reference_id")
            object.__setattr__(self, "reference_id", self.image_id)
        object.__setattr__(self, "boxes", tuple(self.boxes))

    def load(self) -> np.ndarray:
        if self.pixels is not None:
            return self.pixels
        if self.path is None:
            raise DatasetError(f"{self.image_id}: no pixels and no path")
        return read_image(self.path)

    def with_pixels(self, pixels: np.ndarray, **changes) -> "LabeledImage":
        return replace(self, pixels=pixels, path=None, **changes)


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    entries: tuple[LabeledImage, ...]
    class_names: tuple[str, ...]
    split: str = "train"
    diagnostics: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        seen = set()
        for e in self.entries:
            if e.image_id in seen:
                raise DatasetError(f"duplicate image id {e.image_id!r} in {self.name}")
            seen.add(e.image_id)
            for b in e.boxes:
                if b.class_id >= len(self.class_names):
                    raise DatasetError(
                        f"{e.image_id}: class id {b.class_id} >= {len(self.class_names)} classes")

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def by_id(self) -> dict[str, LabeledImage]:
        return {e.image_id: e for e in self.entries}


# ---------------------------------------------------------------- image io

def read_image(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_image(path: str | os.PathLike, pixels: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def check_image(pixels: np.ndarray) -> np.ndarray:
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 image, got shape {pixels.shape}")
    return pixels


# ---------------------------------------------------------------- labels

def parse_label_lines(lines: Iterable[str], source: str = "<labels>"):
    """Parse ``class cx cy w h`` lines.

    Returns ``(boxes, problems)`` where ``problems`` is a list of
    ``(kind, message)`` with kind ``"malformed"``, ``"invalid"`` or ``"degenerate"``.
    """
    boxes, problems = [], []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        where = f"{source}:{lineno}"
        parts = line.split()
        try:
            if len(parts) != 5:
                raise ValueError(f"expected 5 fields, got {len(parts)}")
            cls = int(parts[0])
            cx, cy, w, h = (float(p) for p in parts[1:])
        except ValueError as exc:
            problems.append(("malformed", f"{where}: {exc}: {line!r}"))
            continue
        vals = (cx, cy, w, h)
        if cls < 0 or not all(math.isfinite(v) for v in vals) or not all(0.0 <= v <= 1.0 for v in vals):
            problems.append(("invalid", f"{where}: box outside [0, 1]: {line!r}"))
            continue
        if w == 0.0 or h == 0.0:
            problems.append(("degenerate", f"{where}: zero-area box dropped"))
            continue
        box = BoundingBox(cls, cx, cy, w, h).clipped()
        if box is None:
            problems.append(("degenerate", f"{where}: box empty after clipping, dropped"))
            continue
        boxes.append(box)
    return boxes, problems


def write_labels(path: str | os.PathLike, boxes: Sequence[BoundingBox]) -> None:
    Path(path).write_text("".join(b.to_line() + "\n" for b in boxes), encoding="utf-8")


def load_voc_xml(path: str | os.PathLike, class_names: Sequence[str]) -> list[BoundingBox]:
    """Convert a Pascal-VOC annotation to normalized boxes (unknown classes skipped)."""
    root = ET.parse(path).getroot()
    size = root.find("size")
    W = float(size.findtext("width"))
    H = float(size.findtext("height"))
    index = {n.lower(): i for i, n in enumerate(class_names)}
    boxes = []
    for obj in root.iter("object"):
        name = (obj.findtext("name") or "").strip().lower()
        if name not in index:
            continue
        bb = obj.find("bndbox")
        x1, y1, x2, y2 = (float(bb.findtext(k)) for k in ("xmin", "ymin", "xmax", "ymax"))
        box = _clip_xyxy(index[name], (x1 - 1) / W, (y1 - 1) / H, x2 / W, y2 / H)
        if box is not None:
            boxes.append(box)
    return boxes


def _clip_xyxy(cls, x1, y1, x2, y2):
    x1, y1, x2, y2 = max(x1, 0.0), max(y1, 0.0), min(x2, 1.0), min(y2, 1.0)
    if x2 <= x1 or y2 <= y1:
        return None
    return BoundingBox.from_xyxy(cls, x1, y1, x2, y2)


# ---------------------------------------------------------------- manifests

def load_dataset(manifest_path: str | os.PathLike, load_pixels: bool = False) -> DatasetManifest:
    """Read a manifest file.

    The file is JSON lines: a header ``{"name", "class_names", "split"}``
    followed by one record per image with keys ``image``, ``labels``,
    ``origin``, ``reference_id`` (and optionally ``image_id``). Relative
    paths resolve against the manifest's directory.

    A missing image file raises :class:`DatasetError`. Entries with boxes
    outside ``[0, 1]`` or malformed label lines are rejected and reported in
    ``diagnostics`` (and as warnings); zero-area boxes are dropped.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DatasetError(f"manifest not found: {manifest_path}")
    base = manifest_path.parent
    with open(manifest_path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if ln.strip()]
    if not lines:
        return DatasetManifest(manifest_path.stem, (), (), "train")
    header = json.loads(lines[0])
    entries, diagnostics, missing = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        rec = json.loads(line)
        img_path = _resolve(base, rec["image"])
        image_id = rec.get("image_id") or img_path.stem
        if not img_path.exists():
            missing.append(f"{manifest_path}:{lineno}: image file missing: {img_path}")
            continue
        label_path = _resolve(base, rec["labels"]) if rec.get("labels") else None
        boxes = []
        if label_path is not None:
            if not label_path.exists():
                missing.append(f"{manifest_path}:{lineno}: label file missing: {label_path}")
                continue
            with open(label_path, encoding="utf-8") as fh:
                boxes, problems = parse_label_lines(fh, str(label_path))
            rejected = [m for kind, m in problems if kind != "degenerate"]
            for kind, msg in problems:
                if kind == "degenerate":
                    warnings.warn(msg, stacklevel=2)
                    diagnostics.append(msg)
            if rejected:
                msg = f"rejected {image_id}: " + "; ".join(rejected)
                warnings.warn(msg, stacklevel=2)
                diagnostics.append(msg)
                continue
        pixels = read_image(img_path) if load_pixels else None
        entries.append(LabeledImage(
            image_id=image_id, pixels=pixels, boxes=tuple(boxes),
            origin=rec.get("origin", "original"),
            reference_id=rec.get("reference_id") or image_id,
            path=img_path, label_path=label_path))
    if missing:
        raise DatasetError("\n".join(missing))
    return DatasetManifest(
        name=header.get("name", manifest_path.stem),
        entries=tuple(entries),
        class_names=tuple(header.get("class_names", ())),
        split=header.get("split", "train"),
        diagnostics=tuple(diagnostics))


def _resolve(base: Path, p: str) -> Path:
    path = Path(p)
    return path if path.is_absolute() else base / path


def save_dataset(dataset: DatasetManifest, out_dir: str | os.PathLike,
                 manifest_name: str = "manifest.jsonl") -> Path:
    """Write images (PNG), label files and the manifest under ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    records = [json.dumps({"name": dataset.name, "class_names": list(dataset.class_names),
                           "split": dataset.split})]
    for e in dataset.entries:
        img = out_dir / "images" / f"{e.image_id}.png"
        lab = out_dir / "labels" / f"{e.image_id}.txt"
        write_image(img, e.load())
        write_labels(lab, e.boxes)
        records.append(json.dumps({
            "image_id": e.image_id, "image": f"images/{img.name}", "labels": f"labels/{lab.name}",
            "origin": e.origin, "reference_id": e.reference_id}))
    path = out_dir / manifest_name
    path.write_text("\n".join(records) + "\n", encoding="utf-8")
    return path


def filter_classes(dataset: DatasetManifest, keep: Sequence[str]) -> DatasetManifest:
    """Keep only images containing at least one class in ``keep``.

    Boxes of other classes are removed and class ids remapped to the order of
    ``keep``.
    """
    unknown = [k for k in keep if k not in dataset.class_names]
    if unknown:
        raise DatasetError(f"unknown class names {unknown}; available: {list(dataset.class_names)}")
    remap = {dataset.class_names.index(k): i for i, k in enumerate(keep)}
    entries = []
    for e in dataset.entries:
        boxes = tuple(replace(b, class_id=remap[b.class_id]) for b in e.boxes if b.class_id in remap)
        if boxes:
            entries.append(replace(e, boxes=boxes))
    return replace(dataset, entries=tuple(entries), class_names=tuple(keep))


def mix_datasets(originals: DatasetManifest, stylized: DatasetManifest, name: str | None = None) -> DatasetManifest:
    """Union of clean originals and derived images; every derived entry must reference an original."""
    ids = {e.image_id for e in originals.entries}
    dangling = [e.image_id for e in stylized.entries if e.reference_id not in ids]
    if dangling:
        raise DatasetError(f"{len(dangling)} entries reference unknown originals, e.g. {dangling[:3]}")
    if stylized.entries and tuple(stylized.class_names) != tuple(originals.class_names):
        raise DatasetError("class universes differ between originals and stylized sets")
    return replace(originals, name=name or f"{originals.name}_mixed",
                   entries=originals.entries + stylized.entries, diagnostics=())


def stratified_split(dataset: DatasetManifest, val_fraction: float = 0.1, seed: int = 0):
    """Split into ``(train, val)`` keeping the origin proportions in each part."""
    rng = np.random.default_rng(seed)
    train, val = [], []
    for origin in ORIGINS:
        group = [e for e in dataset.entries if e.origin == origin]
        if not group:
            continue
        order = rng.permutation(len(group))
        n_val = int(round(val_fraction * len(group)))
        val.extend(group[i] for i in order[:n_val])
        train.extend(group[i] for i in order[n_val:])
    return (replace(dataset, entries=tuple(train), split="train"),
            replace(dataset, entries=tuple(val), split="val"))


# ---------------------------------------------------------------- degradation

def center_depth(height: int, width: int) -> np.ndarray:
    """Distance from the image center, scaled so the corners reach 1."""
    y = np.arange(height) - (height - 1) / 2
    x = np.arange(width) - (width - 1) / 2
    d = np.sqrt(y[:, None] ** 2 + x[None, :] ** 2)
    dmax = d.max()
    return d / dmax if dmax > 0 else d


def synthesize_fog(image: np.ndarray, beta: float, airlight: float = 0.8) -> np.ndarray:
    """Atmospheric scattering ``I = J t + A (1 - t)``, ``t = exp(-beta d)``."""
    image = check_image(image)
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    if not 0.0 <= airlight <= 1.0:
        raise ValueError(f"airlight must be in [0, 1], got {airlight}")
    if beta == 0:
        return image.copy()
    t = np.exp(-beta * center_depth(*image.shape[:2]))[..., None]
    return np.clip(image * t + airlight * (1.0 - t), 0.0, 1.0)


def synthesize_gamma(image: np.ndarray, gamma: float) -> np.ndarray:
    image = check_image(image)
    if not gamma > 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    return np.clip(np.power(image, gamma), 0.0, 1.0)


def degrade_dataset(dataset: DatasetManifest, kind: str, seed: int = 0,
                    beta_range=(1.0, 3.0), airlight_range=(0.7, 0.9),
                    gamma_range=GAMMA_RANGE) -> DatasetManifest:
    """Build a fog or low-light copy of ``dataset`` with seeded per-image parameters."""
    if kind not in ("fog", "gamma"):
        raise ValueError(f"kind must be 'fog' or 'gamma', got {kind!r}")
    rng = np.random.default_rng(seed)
    out = []
    for e in dataset.entries:
        if kind == "fog":
            pix = synthesize_fog(e.load(), rng.uniform(*beta_range), rng.uniform(*airlight_range))
            origin = "fog_synth"
        else:
            pix = synthesize_gamma(e.load(), rng.uniform(*gamma_range))
            origin = "gamma_synth"
        out.append(LabeledImage(f"{e.image_id}__{kind}", pix, e.boxes, origin, e.reference_id))
    return replace(dataset, name=f"{dataset.name}_{kind}", entries=tuple(out), diagnostics=())
