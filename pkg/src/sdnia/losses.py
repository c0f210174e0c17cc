"""Restoration, detection and total losses.

Image tensors are ``N x 3 x H x W`` in ``[0, 1]``. Every loss is a batch
mean.

    l_res   = alpha_res * l1 + beta_res * (1 - MS-SSIM) + gamma_res * (content + style)
    l_det   = p1 * l_box + p2 * l_obj + p3 * l_cls
    l_total = p1 * l_box + p2 * l_obj + p3 * l_cls + p4 * l_res
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .detector import DetectorConfig, Targets, decode_boxes

log = logging.getLogger(__name__)

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_LUMA = (0.299, 0.587, 0.114)


@dataclass
class LossWeights:
    alpha_res: float = 0.25
    beta_res: float = 0.25
    gamma_res: float = 0.5
    p1: float = 0.05
    p2: float = 1.0
    p3: float = 0.5
    p4: float = 0.01

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be >= 0")


@dataclass
class LossBreakdown:
    l_box: float = 0.0
    l_obj: float = 0.0
    l_cls: float = 0.0
    l_l1: float = 0.0
    l_msssim: float = 0.0
    l_vgg_content: float = 0.0
    l_vgg_style: float = 0.0
    l_res: float = 0.0
    l_det: float = 0.0
    l_total: float = 0.0

    def to_dict(self) -> dict:
        return {k: float(v) for k, v in asdict(self).items()}


def _f(x):
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


def _check_pair(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _as_batch(x):
    """Accept H x W x 3 numpy images as well as N x 3 x H x W tensors."""
    if isinstance(x, torch.Tensor):
        return x if x.ndim == 4 else x[None]
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr.transpose(2, 0, 1)[None]
    return torch.from_numpy(np.ascontiguousarray(arr))


# ---------------------------------------------------------------- pixel losses

def l1_loss(a, b) -> torch.Tensor:
    a, b = _as_batch(a), _as_batch(b)
    _check_pair(a, b)
    return (a - b).abs().mean()


def gaussian_window(size: int = 11, sigma: float = 1.5, dtype=torch.float64) -> torch.Tensor:
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def ms_ssim_levels(height: int, width: int, win_size: int = 11, max_levels: int = 5) -> int:
    """Largest level count with ``min(H, W) >= 2**(levels - 1) * win_size``."""
    side = min(height, width)
    levels = 0
    while levels < max_levels and side >= 2 ** levels * win_size:
        levels += 1
    return levels


def _ssim_maps(x, y, win, C1, C2):
    c = x.shape[1]
    wx = win.view(1, 1, 1, -1).repeat(c, 1, 1, 1)
    wy = win.view(1, 1, -1, 1).repeat(c, 1, 1, 1)

    def blur(t):
        return F.conv2d(F.conv2d(t, wx, groups=c), wy, groups=c)

    mu_x, mu_y = blur(x), blur(y)
    sxx = blur(x * x) - mu_x ** 2
    syy = blur(y * y) - mu_y ** 2
    sxy = blur(x * y) - mu_x * mu_y
    cs = (2 * sxy + C2) / (sxx + syy + C2)
    lum = (2 * mu_x * mu_y + C1) / (mu_x ** 2 + mu_y ** 2 + C1)
    return lum, cs


def to_luma(x: torch.Tensor) -> torch.Tensor:
    w = torch.tensor(_LUMA, dtype=x.dtype, device=x.device).view(1, 3, 1, 1)
    return (x * w).sum(1, keepdim=True)


def ms_ssim(a, b, levels: int | None = None, win_size: int = 11, sigma: float = 1.5,
            data_range: float = 1.0, luminance: bool = True) -> torch.Tensor:
    """Multi-scale SSIM (batch mean).

    Uses the standard five per-scale exponents. For images too small for
    five levels, ``levels`` defaults to the largest count that fits and the
    exponents are renormalized to sum to one. Negative per-scale terms are
    clamped at zero before exponentiation.
    """
    a, b = _as_batch(a), _as_batch(b)
    _check_pair(a, b)
    if luminance and a.shape[1] == 3:
        a, b = to_luma(a), to_luma(b)
    H, W = a.shape[-2:]
    fit = ms_ssim_levels(H, W, win_size)
    if levels is None:
        levels = fit
    if levels < 1 or levels > len(MS_SSIM_WEIGHTS) or levels > fit:
        need = 2 ** (max(levels, 1) - 1) * win_size
        raise ValueError(f"image {H}x{W} too small for {levels} MS-SSIM levels; need min side >= {need}")
    weights = torch.tensor(MS_SSIM_WEIGHTS[:levels], dtype=a.dtype, device=a.device)
    weights = weights / weights.sum()
    win = gaussian_window(win_size, sigma, a.dtype).to(a.device)
    C1, C2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    terms = []
    x, y = a, b
    for j in range(levels):
        lum, cs = _ssim_maps(x, y, win, C1, C2)
        if j == levels - 1:
            terms.append((lum * cs).flatten(1).mean(1))
        else:
            terms.append(cs.flatten(1).mean(1))
            x, y = F.avg_pool2d(x, 2), F.avg_pool2d(y, 2)
    vals = torch.stack(terms, 1).clamp(min=1e-12)
    return torch.prod(vals ** weights, dim=1).mean()


# ---------------------------------------------------------------- perceptual

def gram_matrix(features) -> torch.Tensor:
    """``F F^T / (C H W)`` for ``C x H x W`` (or batched ``N x C x H x W``) features."""
    f = features if isinstance(features, torch.Tensor) else torch.as_tensor(np.asarray(features, dtype=np.float64))
    batched = f.ndim == 4
    if not batched:
        f = f[None]
    n, c, h, w = f.shape
    flat = f.reshape(n, c, h * w)
    g = flat @ flat.transpose(1, 2) / (c * h * w)
    return g if batched else g[0]


class IdentityExtractor(nn.Module):
    """Uses the pixels themselves as the only feature layer."""

    content_layers = ("pixels",)
    style_layers = ("pixels",)

    def forward(self, x):
        return {"pixels": x}


VGG16_LAYERS = {"relu1_2": 3, "relu2_2": 8, "relu3_3": 15, "relu4_3": 22}


class VGGFeatures(nn.Module):
    """Frozen VGG-16 trunk returning activations at named ReLU layers.

    Content defaults to ``relu3_3``; style Grams to the first four blocks.
    ``weights`` is a path to a torchvision ``vgg16`` state dict, ``"default"``
    for the torchvision cache, or ``None`` for random weights (tests only).
    """

    def __init__(self, weights: str | Path | None = "default",
                 content_layers=("relu3_3",), style_layers=("relu1_2", "relu2_2", "relu3_3", "relu4_3")):
        super().__init__()
        from torchvision.models import VGG16_Weights, vgg16

        if weights == "default":
            net = vgg16(weights=VGG16_Weights.IMAGENET1K_V1)
        else:
            net = vgg16(weights=None)
            if weights is not None:
                net.load_state_dict(torch.load(weights, map_location="cpu", weights_only=True))
        last = max(VGG16_LAYERS[k] for k in (*content_layers, *style_layers))
        self.trunk = net.features[: last + 1].eval()
        for p in self.trunk.parameters():
            p.requires_grad_(False)
        self.content_layers = tuple(content_layers)
        self.style_layers = tuple(style_layers)
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))

    def train(self, mode=True):
        super().train(mode)
        self.trunk.eval()
        return self

    def forward(self, x):
        x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        wanted = {v: k for k, v in VGG16_LAYERS.items() if k in (*self.content_layers, *self.style_layers)}
        out = {}
        for i, layer in enumerate(self.trunk):
            x = layer(x)
            if i in wanted:
                out[wanted[i]] = x
        return out


_warned = set()


def resolve_extractor(name: str | None, weights: str | None = None, fallback: bool = True):
    """Build a feature extractor by name; ``None`` means the perceptual term is disabled.

    With ``fallback`` a VGG that cannot be loaded degrades to ``None`` (the
    restoration loss then reduces to MS-SSIM + l1) with a warning.
    """
    if name in (None, "none"):
        return None
    if name == "identity":
        return IdentityExtractor()
    if name == "vgg":
        try:
            return VGGFeatures(weights or "default")
        except Exception as exc:
            if not fallback:
                raise
            msg = (f"VGG feature extractor unavailable ({type(exc).__name__}: {exc}); "
                   "perceptual loss disabled, restoration loss reduces to MS-SSIM + l1")
            if msg not in _warned:
                _warned.add(msg)
                warnings.warn(msg, RuntimeWarning, stacklevel=2)
                log.warning(msg)
            return None
    raise ValueError(f"unknown feature extractor {name!r}")


def vgg_perceptual(a, b, extractor) -> tuple[torch.Tensor, torch.Tensor]:
    """``(content, style)`` feature-space losses; ``(0, 0)`` without an extractor."""
    a, b = _as_batch(a), _as_batch(b)
    _check_pair(a, b)
    if extractor is None:
        z = a.new_zeros(())
        return z, z
    fa, fb = extractor(a), extractor(b)
    content = torch.stack([F.mse_loss(fa[k], fb[k]) for k in extractor.content_layers]).mean()
    style = torch.stack([F.mse_loss(gram_matrix(fa[k]), gram_matrix(fb[k]))
                         for k in extractor.style_layers]).mean()
    return content, style


# ---------------------------------------------------------------- weighted sums

def combine_restoration(l1, msssim_loss, content, style, w: LossWeights):
    return w.alpha_res * l1 + w.beta_res * msssim_loss + w.gamma_res * (content + style)


def combine_detection(l_box, l_obj, l_cls, w: LossWeights):
    return w.p1 * l_box + w.p2 * l_obj + w.p3 * l_cls


def combine_total(l_box, l_obj, l_cls, l_res, w: LossWeights):
    return w.p1 * l_box + w.p2 * l_obj + w.p3 * l_cls + w.p4 * l_res


def restoration_loss(adapted, reference, weights: LossWeights = LossWeights(),
                     extractor=None, mask: torch.Tensor | None = None) -> dict[str, torch.Tensor]:
    """Components and weighted ``l_res``. ``mask`` (N,) selects which items count."""
    adapted, reference = _as_batch(adapted), _as_batch(reference)
    _check_pair(adapted, reference)
    if mask is not None:
        if not bool(mask.any()):
            z = adapted.sum() * 0
            return dict(l_l1=z, l_msssim=z, l_vgg_content=z, l_vgg_style=z, l_res=z)
        adapted, reference = adapted[mask], reference[mask]
    l1 = l1_loss(adapted, reference)
    msl = 1.0 - ms_ssim(adapted, reference)
    if extractor is not None and weights.gamma_res > 0:
        content, style = vgg_perceptual(adapted, reference, extractor)
    else:
        content = style = adapted.new_zeros(())
    return dict(l_l1=l1, l_msssim=msl, l_vgg_content=content, l_vgg_style=style,
                l_res=combine_restoration(l1, msl, content, style, weights))


# ---------------------------------------------------------------- detection

def bbox_ciou(p: torch.Tensor, t: torch.Tensor, eps: float = 1e-9) -> torch.Tensor:
    """Complete IoU between center-form boxes ``(..., 4)``."""
    px1, py1, px2, py2 = p[..., 0] - p[..., 2] / 2, p[..., 1] - p[..., 3] / 2, p[..., 0] + p[..., 2] / 2, p[..., 1] + p[..., 3] / 2
    tx1, ty1, tx2, ty2 = t[..., 0] - t[..., 2] / 2, t[..., 1] - t[..., 3] / 2, t[..., 0] + t[..., 2] / 2, t[..., 1] + t[..., 3] / 2
    iw = (torch.minimum(px2, tx2) - torch.maximum(px1, tx1)).clamp(min=0)
    ih = (torch.minimum(py2, ty2) - torch.maximum(py1, ty1)).clamp(min=0)
    inter = iw * ih
    union = (p[..., 2] * p[..., 3] + t[..., 2] * t[..., 3] - inter).clamp(min=eps)
    iou = inter / union
    cw = torch.maximum(px2, tx2) - torch.minimum(px1, tx1)
    ch = torch.maximum(py2, ty2) - torch.minimum(py1, ty1)
    c2 = (cw ** 2 + ch ** 2).clamp(min=eps)
    rho2 = (p[..., 0] - t[..., 0]) ** 2 + (p[..., 1] - t[..., 1]) ** 2
    v = (4 / math.pi ** 2) * (torch.atan(t[..., 2] / t[..., 3]) - torch.atan(p[..., 2] / p[..., 3])) ** 2
    # alpha stays in the graph so the gradient is that of the loss actually reported
    alpha = v / (v - iou + 1 + eps)
    return iou - rho2 / c2 - alpha * v


def detection_loss(raw: list[torch.Tensor], targets: Targets, config: DetectorConfig,
                   weights: LossWeights = LossWeights()) -> dict[str, torch.Tensor]:
    """CIoU box loss plus BCE objectness and class losses.

    ``l_obj`` sums the per-scale mean BCE over all anchor slots; ``l_box``
    and ``l_cls`` average over assigned slots and are zero without targets.
    """
    if targets.batch_size == 0 or raw[0].shape[0] == 0:
        raise ValueError("detection loss needs a non-empty batch")
    ref = raw[0]
    l_obj = ref.new_zeros(())
    box_terms, cls_terms = [], []
    for si, (s, r) in enumerate(zip(config.grid_scales, raw)):
        tobj = torch.zeros_like(r[..., 4])
        sel = targets.index[:, 1] == si
        if sel.any():
            b, _, row, col, a = targets.index[sel].unbind(1)
            tobj[b, row, col, a] = 1.0
            pred = r[b, row, col, a]
            pbox = decode_boxes(r, config, s)[b, row, col, a]
            box_terms.append(1.0 - bbox_ciou(pbox, targets.boxes[sel].to(r.dtype)))
            tcls = F.one_hot(targets.classes[sel], config.num_classes).to(r.dtype)
            cls_terms.append(F.binary_cross_entropy_with_logits(pred[:, 5:], tcls, reduction="none").mean(1))
        l_obj = l_obj + F.binary_cross_entropy_with_logits(r[..., 4], tobj)
    if box_terms:
        l_box = torch.cat(box_terms).mean()
        l_cls = torch.cat(cls_terms).mean()
    else:
        l_box = l_cls = ref.sum() * 0
    return dict(l_box=l_box, l_obj=l_obj, l_cls=l_cls,
                l_det=combine_detection(l_box, l_obj, l_cls, weights))


def total_loss(det: dict | LossBreakdown, res: dict | LossBreakdown, weights: LossWeights = LossWeights()):
    """Weighted total over detection components and ``l_res``."""
    def get(src, key):
        return src[key] if isinstance(src, dict) else getattr(src, key)

    return combine_total(get(det, "l_box"), get(det, "l_obj"), get(det, "l_cls"), get(res, "l_res"), weights)


def breakdown(det: dict, res: dict, total) -> LossBreakdown:
    parts = {**det, **res, "l_total": total}
    return LossBreakdown(**{k: _f(v) for k, v in parts.items()})
