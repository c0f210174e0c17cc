"""Compact anchor-based one-stage detector with a YOLO-style grid head.

Raw output is a list with one tensor per grid scale, each shaped
``N x gh x gw x A x (5 + C)`` holding ``(tx, ty, tw, th, objectness,
class logits...)``. Decoding follows the YOLOv3 convention::

    cx = (sigmoid(tx) + col) / gw        w = anchor_w * exp(tw)
    cy = (sigmoid(ty) + row) / gh        h = anchor_h * exp(th)

Detections use normalized center-form :class:`~sdnia.imagery.BoundingBox`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .imagery import BoundingBox

DEFAULT_ANCHORS = {
    8: ((0.03, 0.04), (0.06, 0.08), (0.08, 0.05)),
    16: ((0.12, 0.12), (0.16, 0.25), (0.3, 0.18)),
    32: ((0.35, 0.4), (0.55, 0.7), (0.85, 0.85)),
}


@dataclass
class DetectorConfig:
    num_classes: int
    grid_scales: tuple[int, ...] = (16, 32)
    anchors: dict[int, tuple[tuple[float, float], ...]] = field(default_factory=dict)
    conf_threshold: float = 0.25
    nms_iou_threshold: float = 0.45
    width: int = 12
    depth: tuple[int, ...] = (1, 1, 2, 2, 1)

    def __post_init__(self):
        self.grid_scales = tuple(sorted(int(s) for s in self.grid_scales))
        if not self.anchors:
            self.anchors = {s: DEFAULT_ANCHORS[s] for s in self.grid_scales}
        self.anchors = {int(s): tuple(tuple(float(v) for v in a) for a in anc)
                        for s, anc in self.anchors.items()}
        missing = [s for s in self.grid_scales if s not in self.anchors]
        if missing:
            raise ValueError(f"no anchors for grid scales {missing}")
        for s in self.grid_scales:
            if s & (s - 1) or s < 2:
                raise ValueError(f"grid scale must be a power of two, got {s}")
            if any(w <= 0 or h <= 0 for w, h in self.anchors[s]):
                raise ValueError("anchors must be positive")
        if len({len(self.anchors[s]) for s in self.grid_scales}) != 1:
            raise ValueError("every scale needs the same number of anchors")
        for name in ("conf_threshold", "nms_iou_threshold"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        self.depth = tuple(int(d) for d in self.depth)

    @property
    def num_anchors(self) -> int:
        return len(self.anchors[self.grid_scales[0]])

    @property
    def max_stride(self) -> int:
        return max(self.grid_scales)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid_scales"] = list(self.grid_scales)
        d["anchors"] = {str(s): [list(a) for a in anc] for s, anc in self.anchors.items()}
        d["depth"] = list(self.depth)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        d = dict(d)
        if "anchors" in d and d["anchors"]:
            d["anchors"] = {int(k): v for k, v in d["anchors"].items()}
        return cls(**d)


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    confidence: float
    class_id: int
    class_score: float
    image_index: int = 0


# ---------------------------------------------------------------- network

class ConvBN(nn.Sequential):
    def __init__(self, cin, cout, k=3, stride=1):
        super().__init__(
            nn.Conv2d(cin, cout, k, stride, k // 2, bias=False),
            nn.BatchNorm2d(cout),
            nn.LeakyReLU(0.1),
        )


class DarkResidual(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.body = nn.Sequential(ConvBN(c, c // 2, 1), ConvBN(c // 2, c, 3))

    def forward(self, x):
        return x + self.body(x)


class TinyYOLO(nn.Module):
    """Reduced darknet-style body with one head per configured grid scale.

    Coarser features are upsampled and concatenated into finer heads, as in
    YOLOv3.
    """

    def __init__(self, config: DetectorConfig):
        super().__init__()
        self.config = config
        w = config.width
        n_stages = int(math.log2(config.max_stride))
        depth = list(config.depth) + [1] * max(0, n_stages - len(config.depth))
        self.stem = ConvBN(3, w, 3)
        stages, chans, c = [], [], w
        for i in range(n_stages):
            cout = w * 2 ** (i + 1)
            layers = [ConvBN(c, cout, 3, 2)] + [DarkResidual(cout) for _ in range(depth[i])]
            stages.append(nn.Sequential(*layers))
            chans.append(cout)
            c = cout
        self.stages = nn.ModuleList(stages)
        self.stage_channels = chans
        out_ch = config.num_anchors * (5 + config.num_classes)
        necks, heads, laterals = nn.ModuleDict(), nn.ModuleDict(), nn.ModuleDict()
        carry = 0
        for s in sorted(config.grid_scales, reverse=True):
            cin = chans[int(math.log2(s)) - 1] + carry
            mid = max(chans[int(math.log2(s)) - 1] // 2, 8)
            necks[str(s)] = nn.Sequential(ConvBN(cin, mid, 1), ConvBN(mid, mid * 2, 3), ConvBN(mid * 2, mid, 1))
            heads[str(s)] = nn.Sequential(ConvBN(mid, mid * 2, 3), nn.Conv2d(mid * 2, out_ch, 1))
            laterals[str(s)] = ConvBN(mid, mid // 2, 1)
            carry = mid // 2
        self.necks, self.heads, self.laterals = necks, heads, laterals
        self._init_head_bias()

    def _init_head_bias(self):
        # objectness prior ~1% so early training is not swamped by background
        A, C = self.config.num_anchors, self.config.num_classes
        for head in self.heads.values():
            b = head[-1].bias.detach().view(A, 5 + C)
            b[:, 4] = math.log(0.01 / 0.99)
            b[:, 5:] = 0.0

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats, h = {}, self.stem(x)
        for i, stage in enumerate(self.stages):
            h = stage(h)
            feats[2 ** (i + 1)] = h
        out, carry = {}, None
        A, C = self.config.num_anchors, self.config.num_classes
        for s in sorted(self.config.grid_scales, reverse=True):
            f = feats[s]
            if carry is not None:
                f = torch.cat([f, nn.functional.interpolate(carry, size=f.shape[-2:], mode="nearest")], 1)
            f = self.necks[str(s)](f)
            p = self.heads[str(s)](f)
            n, _, gh, gw = p.shape
            out[s] = p.view(n, A, 5 + C, gh, gw).permute(0, 3, 4, 1, 2).contiguous()
            carry = self.laterals[str(s)](f)
        return [out[s] for s in self.config.grid_scales]


def check_input_size(config: DetectorConfig, height: int, width: int) -> None:
    m = config.max_stride
    if height % m or width % m:
        raise ValueError(f"image size {height}x{width} must be a multiple of {m}")


def detect_forward(model: TinyYOLO, image) -> list[torch.Tensor]:
    """Raw multi-scale predictions for an ``N x 3 x H x W`` tensor or one ``H x W x 3`` array."""
    if not isinstance(image, torch.Tensor):
        arr = np.asarray(image)
        p = next(model.parameters())
        image = torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None].to(p.dtype)
    check_input_size(model.config, *image.shape[-2:])
    return model(image)


# ---------------------------------------------------------------- decode / encode

def _anchor_tensor(config, s, ref):
    return torch.tensor(config.anchors[s], dtype=ref.dtype, device=ref.device)


def decode_boxes(raw: torch.Tensor, config: DetectorConfig, scale: int) -> torch.Tensor:
    """Map one scale's raw tensor to normalized ``(cx, cy, w, h)`` per slot."""
    _, gh, gw, _, _ = raw.shape
    gy, gx = torch.meshgrid(torch.arange(gh, dtype=raw.dtype), torch.arange(gw, dtype=raw.dtype), indexing="ij")
    anchors = _anchor_tensor(config, scale, raw)
    cx = (torch.sigmoid(raw[..., 0]) + gx[None, :, :, None]) / gw
    cy = (torch.sigmoid(raw[..., 1]) + gy[None, :, :, None]) / gh
    w = anchors[:, 0] * torch.exp(raw[..., 2].clamp(max=20))
    h = anchors[:, 1] * torch.exp(raw[..., 3].clamp(max=20))
    return torch.stack([cx, cy, w, h], -1)


def decode_predictions(raw: list[torch.Tensor], config: DetectorConfig,
                       conf_threshold: float | None = None) -> list[list[Detection]]:
    """Decode raw grids into per-image detection lists (before NMS).

    ``confidence = objectness * best class probability``; slots with
    confidence below the threshold are dropped. Boxes are clipped to the image.
    """
    thr = config.conf_threshold if conf_threshold is None else conf_threshold
    n = raw[0].shape[0]
    per_image: list[list[Detection]] = [[] for _ in range(n)]
    with torch.no_grad():
        for s, r in zip(config.grid_scales, raw):
            boxes = decode_boxes(r.double(), config, s).reshape(n, -1, 4).numpy()
            obj = torch.sigmoid(r[..., 4].double()).reshape(n, -1).numpy()
            cls = torch.sigmoid(r[..., 5:].double()).reshape(n, -1, config.num_classes).numpy()
            best = cls.argmax(-1)
            best_p = np.take_along_axis(cls, best[..., None], -1)[..., 0]
            conf = obj * best_p
            for i in range(n):
                for j in np.flatnonzero(conf[i] >= thr):
                    box = _clip_box(int(best[i, j]), *boxes[i, j])
                    if box is not None:
                        per_image[i].append(Detection(box, float(conf[i, j]), int(best[i, j]),
                                                      float(best_p[i, j]), i))
    return per_image


def _clip_box(cls, cx, cy, w, h):
    x1, y1 = max(cx - w / 2, 0.0), max(cy - h / 2, 0.0)
    x2, y2 = min(cx + w / 2, 1.0), min(cy + h / 2, 1.0)
    if x2 <= x1 or y2 <= y1:
        return None
    return BoundingBox.from_xyxy(cls, x1, y1, x2, y2)


def _wh_iou(w, h, aw, ah):
    inter = np.minimum(w, aw) * np.minimum(h, ah)
    return inter / (w * h + aw * ah - inter)


def assign_anchor(config: DetectorConfig, box: BoundingBox, height: int, width: int):
    """Best-shape-IoU anchor over all scales; returns ``(scale_index, row, col, anchor)``."""
    best = None
    for si, s in enumerate(config.grid_scales):
        for a, (aw, ah) in enumerate(config.anchors[s]):
            score = _wh_iou(box.w, box.h, aw, ah)
            if best is None or score > best[0]:
                best = (score, si, a)
    _, si, a = best
    s = config.grid_scales[si]
    gh, gw = height // s, width // s
    col = min(int(box.cx * gw), gw - 1)
    row = min(int(box.cy * gh), gh - 1)
    return si, row, col, a


def encode_box(config: DetectorConfig, box: BoundingBox, height: int, width: int, eps: float = 1e-9):
    """Raw ``(tx, ty, tw, th)`` that decode exactly to ``box`` at its assigned slot."""
    si, row, col, a = assign_anchor(config, box, height, width)
    s = config.grid_scales[si]
    gh, gw = height // s, width // s
    fx = min(max(box.cx * gw - col, eps), 1 - eps)
    fy = min(max(box.cy * gh - row, eps), 1 - eps)
    aw, ah = config.anchors[s][a]
    t = (math.log(fx / (1 - fx)), math.log(fy / (1 - fy)), math.log(box.w / aw), math.log(box.h / ah))
    return (si, row, col, a), t


@dataclass
class Targets:
    """Grid-assigned ground truth for a batch.

    ``index`` rows are ``(image, scale_index, row, col, anchor)``; ``boxes``
    holds the normalized ``(cx, cy, w, h)`` and ``classes`` the class ids.
    """

    index: torch.Tensor
    boxes: torch.Tensor
    classes: torch.Tensor
    batch_size: int
    shapes: list[tuple[int, int]]


def build_targets(config: DetectorConfig, batch_boxes: list[list[BoundingBox]], height: int, width: int,
                  dtype=torch.float32) -> Targets:
    slots = {}
    for i, boxes in enumerate(batch_boxes):
        for b in boxes:
            si, row, col, a = assign_anchor(config, b, height, width)
            slots[(i, si, row, col, a)] = b  # later boxes win on collisions
    idx = torch.tensor(list(slots.keys()), dtype=torch.long).reshape(-1, 5)
    boxes = torch.tensor([[b.cx, b.cy, b.w, b.h] for b in slots.values()], dtype=dtype).reshape(-1, 4)
    classes = torch.tensor([b.class_id for b in slots.values()], dtype=torch.long)
    shapes = [(height // s, width // s) for s in config.grid_scales]
    return Targets(idx, boxes, classes, len(batch_boxes), shapes)


# ---------------------------------------------------------------- nms

def nms(dets: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy per-class suppression; ties keep input order. Output sorted by confidence."""
    from .evaluation import iou

    order = sorted(range(len(dets)), key=lambda i: -dets[i].confidence)
    kept: list[Detection] = []
    for i in order:
        d = dets[i]
        if all(k.class_id != d.class_id or iou(k.box, d.box) <= iou_threshold for k in kept):
            kept.append(d)
    return kept


def postprocess(raw: list[torch.Tensor], config: DetectorConfig) -> list[list[Detection]]:
    return [nms(d, config.nms_iou_threshold) for d in decode_predictions(raw, config)]


def detector_param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
