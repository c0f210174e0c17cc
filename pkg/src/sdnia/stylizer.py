"""Arbitrary style transfer with controllable strength.

A backend exposes two functions: ``predict`` (style image -> style vector) and
``transfer`` (content image, style vector -> image). Strength is controlled
by identity interpolation: the target vector is a blend between the content
image's own predicted vector and the style image's vector.

Two backends ship here:

* :class:`ProceduralBackend` -- closed-form photometric statistics, D = 9.
  Used by tests and toy experiments; needs no weights.
* :class:`TorchScriptBackend` -- a serialized (``torch.jit``) model with
  ``predict`` and ``transfer`` methods, e.g. an exported pretrained
  arbitrary-style network.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .imagery import DatasetManifest, LabeledImage, check_image

log = logging.getLogger(__name__)


class BackendError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class StyleVector:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(v)):
            raise ValueError("style vector has non-finite entries")
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.size

    def __eq__(self, other):
        return isinstance(other, StyleVector) and np.array_equal(self.values, other.values)


class StylizerBackend(Protocol):
    name: str
    dim: int

    def predict(self, image: np.ndarray) -> StyleVector: ...

    def transfer(self, content: np.ndarray, style: StyleVector) -> np.ndarray: ...


def predict_style(backend: StylizerBackend, style_image: np.ndarray) -> StyleVector:
    vec = backend.predict(check_image(style_image))
    if vec.dim != backend.dim:
        raise BackendError(f"backend {backend.name!r} returned D={vec.dim}, declared {backend.dim}")
    return vec


def blend_style(content_vec: StyleVector, style_vec: StyleVector, alpha: float) -> StyleVector:
    """``alpha * style + (1 - alpha) * content``."""
    if content_vec.dim != style_vec.dim:
        raise ValueError(f"dimension mismatch: {content_vec.dim} vs {style_vec.dim}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    return StyleVector(alpha * style_vec.values + (1.0 - alpha) * content_vec.values)


def stylized_name(content_id: str, style_id: str, alpha: float) -> str:
    return f"{content_id}__{style_id}__a{alpha:.2f}"


def parse_stylized_name(name: str) -> tuple[str, str, float]:
    content_id, style_id, a = name.rsplit("__", 2)
    return content_id, style_id, float(a[1:])


class StyleCache:
    """Content-vector cache keyed by image id; one writer at a time.

    With ``path`` the cache is loaded from a JSON file and written back by
    :meth:`save`. Keys are image ids only, so use one file per backend.
    """

    def __init__(self, path: str | Path | None = None):
        self._data: dict[str, StyleVector] = {}
        self._lock = threading.Lock()
        self.path = Path(path) if path else None
        if self.path is not None and self.path.exists():
            raw = json.loads(self.path.read_text())
            self._data = {k: StyleVector(np.asarray(v, dtype=np.float64)) for k, v in raw.items()}

    def save(self) -> None:
        if self.path is None:
            return
        with self._lock:
            data = {k: v.values.tolist() for k, v in self._data.items()}
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(data))
        tmp.replace(self.path)

    def get(self, key: str, compute):
        vec = self._data.get(key)
        if vec is not None:
            return vec
        with self._lock:
            vec = self._data.get(key)
            if vec is None:
                vec = compute()
                self._data[key] = vec
        return vec

    def __len__(self):
        return len(self._data)


def stylize(backend: StylizerBackend, content: LabeledImage, style_image: np.ndarray | StyleVector,
            alpha: float, style_id: str = "style", cache: StyleCache | None = None) -> LabeledImage:
    """Stylize one labeled image; boxes are copied untouched."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    pixels = content.load()
    if cache is None:
        content_vec = predict_style(backend, pixels)
    else:
        content_vec = cache.get(content.image_id, lambda: predict_style(backend, pixels))
    style_vec = style_image if isinstance(style_image, StyleVector) else predict_style(backend, style_image)
    target = blend_style(content_vec, style_vec, alpha)
    out = np.clip(backend.transfer(pixels, target), 0.0, 1.0)
    if out.shape != pixels.shape:
        raise BackendError(f"backend {backend.name!r} changed image shape {pixels.shape} -> {out.shape}")
    return LabeledImage(
        image_id=stylized_name(content.image_id, style_id, alpha),
        pixels=out, boxes=content.boxes, origin="stylized", reference_id=content.image_id)


def batch_stylize(backend: StylizerBackend, contents: DatasetManifest,
                  styles: Sequence[np.ndarray] | dict[str, np.ndarray],
                  alphas: Sequence[float], name: str | None = None,
                  cache: StyleCache | None = None) -> DatasetManifest:
    """Every (content, style, alpha) triple: ``N_c * N_s * N_alpha`` images minus failures.

    Failed triples are logged and skipped; their messages end up in
    ``diagnostics`` of the returned manifest.
    """
    if isinstance(styles, dict):
        style_items = list(styles.items())
    else:
        style_items = [(f"s{i:02d}", s) for i, s in enumerate(styles)]
    for a in alphas:
        if not 0.0 <= a <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {a}")
    style_vecs = [(sid, predict_style(backend, img)) for sid, img in style_items]
    cache = cache if cache is not None else StyleCache()
    out, failures = [], []
    for content in contents.entries:
        for sid, svec in style_vecs:
            for a in alphas:
                try:
                    out.append(stylize(backend, content, svec, a, style_id=sid, cache=cache))
                except Exception as exc:  # per-image failures do not stop the job
                    msg = f"{stylized_name(content.image_id, sid, a)}: {exc}"
                    log.warning("stylization failed: %s", msg)
                    failures.append(msg)
    log.info("stylized %d images (%d x %d x %d, %d failed)", len(out),
             len(contents.entries), len(style_vecs), len(alphas), len(failures))
    return DatasetManifest(name or f"{contents.name}_stylized", tuple(out),
                           contents.class_names, contents.split, tuple(failures))


# ---------------------------------------------------------------- procedural backend

_LUMA = np.array([0.299, 0.587, 0.114])
_EPS = 1e-6


def _luma(img):
    return img @ _LUMA


class ProceduralBackend:
    """Closed-form photometric stylizer.

    Style vector layout (D = 9)::

        [0:3] airlight color    mean RGB of the brightest 10% of pixels
        [3]   fog density       -ln(1 - haze), haze = mean dark channel (clipped)
        [4]   gamma             ln(mean luma) / ln(0.5)
        [5:8] color shift       per-channel mean minus mean luma
        [8]   contrast          std of luma

    ``transfer`` moves the content's own statistics toward the target
    vector: contrast rescale, color shift, power-law gamma, then scattering
    with the target airlight. Each operator is skipped when its parameter
    equals the content's own, so the content's own vector is a bit-exact
    identity.
    """

    name = "procedural"
    dim = 9

    def predict(self, image: np.ndarray) -> StyleVector:
        img = check_image(image).astype(np.float64)
        y = _luma(img).reshape(-1)
        flat = img.reshape(-1, 3)
        k = max(1, int(round(0.1 * y.size)))
        top = np.argpartition(y, y.size - k)[-k:]
        airlight = flat[top].mean(axis=0)
        haze = float(np.clip(flat.min(axis=1).mean(), 0.0, 0.95))
        beta = -np.log1p(-haze)
        mean_y = float(np.clip(y.mean(), 1e-3, 1 - 1e-3))
        gamma = np.log(mean_y) / np.log(0.5)
        shift = flat.mean(axis=0) - y.mean()
        contrast = y.std()
        return StyleVector(np.concatenate([airlight, [beta, gamma], shift, [contrast]]))

    def transfer(self, content: np.ndarray, style: StyleVector) -> np.ndarray:
        img = check_image(content).astype(np.float64)
        own = self.predict(img).values
        tgt = style.values
        if tgt.shape != own.shape:
            raise ValueError(f"expected D={self.dim} style vector, got {tgt.size}")
        if np.array_equal(tgt, own):
            return img.copy()
        out = img
        if tgt[8] != own[8]:
            m = _luma(out).mean()
            out = m + (out - m) * (tgt[8] / max(own[8], _EPS))
        if not np.array_equal(tgt[5:8], own[5:8]):
            out = out + (tgt[5:8] - own[5:8])
        out = np.clip(out, 0.0, 1.0)
        if tgt[4] != own[4]:
            out = np.power(out, max(tgt[4], _EPS) / max(own[4], _EPS))
        if tgt[3] != own[3]:
            t = np.exp(own[3] - tgt[3])
            A = np.clip(tgt[0:3], 0.0, 1.0)
            if t <= 1.0:
                out = out * t + A * (1.0 - t)
            else:  # target is clearer than the content: invert the scattering
                out = (out - A * (1.0 - 1.0 / t)) * t
        return np.clip(out, 0.0, 1.0)


class TorchScriptBackend:
    """Backend wrapping a scripted module exposing ``predict`` and ``transfer``.

    Both methods take and return float tensors: ``predict(img: 1x3xHxW) -> D``
    and ``transfer(img: 1x3xHxW, vec: D) -> 1x3xHxW``.
    """

    def __init__(self, weights_path: str | Path, name: str = "torchscript"):
        import torch

        self.name = f"{name}:{weights_path}"
        try:
            self.module = torch.jit.load(str(weights_path), map_location="cpu").eval()
        except Exception as exc:
            raise BackendError(f"failed to load stylizer backend {self.name}: {exc}") from exc
        self._torch = torch
        self.dim = int(getattr(self.module, "dim", 0)) or self._probe_dim()

    def _probe_dim(self):
        return self.predict(np.zeros((16, 16, 3))).dim

    def _to_tensor(self, img):
        return self._torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))[None].float()

    def predict(self, image: np.ndarray) -> StyleVector:
        with self._torch.no_grad():
            v = self.module.predict(self._to_tensor(check_image(image)))
        return StyleVector(v.double().numpy())

    def transfer(self, content: np.ndarray, style: StyleVector) -> np.ndarray:
        with self._torch.no_grad():
            out = self.module.transfer(self._to_tensor(check_image(content)),
                                       self._torch.from_numpy(style.values).float())
        return out[0].permute(1, 2, 0).double().numpy()


def get_backend(name: str, weights_path: str | Path | None = None) -> StylizerBackend:
    if name == "procedural":
        return ProceduralBackend()
    if name in ("torchscript", "pretrained"):
        if weights_path is None:
            raise BackendError(f"backend {name!r} needs a weights path")
        return TorchScriptBackend(weights_path, name)
    raise BackendError(f"unknown stylizer backend {name!r}")


def make_style_images(size: int = 64, seed: int = 0) -> dict[str, np.ndarray]:
    """Small procedural set of fog-like and dark style images.

    Stand-ins for photographs of extreme scenes: smooth low-frequency
    texture pushed toward haze (bright, low contrast, tinted) or toward
    low light (dark, warm or blue cast).
    """
    rng = np.random.default_rng(seed)
    styles = {}

    def texture():
        coarse = rng.random((4, 4, 3))
        reps = int(np.ceil(size / 4))
        img = np.kron(coarse, np.ones((reps, reps, 1)))[:size, :size]
        return 0.7 * img + 0.3 * rng.random((size, size, 3))

    fog_tints = [(0.85, 0.85, 0.85), (0.8, 0.82, 0.88), (0.9, 0.88, 0.8)]
    for i, tint in enumerate(fog_tints):
        base = texture()
        t = 0.25 + 0.1 * i
        styles[f"fog{i}"] = np.clip(base * t + np.array(tint) * (1 - t), 0, 1)
    dark_casts = [(1.0, 0.9, 0.7), (0.7, 0.8, 1.0), (0.9, 0.9, 0.9)]
    for i, cast in enumerate(dark_casts):
        base = texture()
        styles[f"dark{i}"] = np.clip(np.power(base, 2.5 + i) * np.array(cast), 0, 1)
    return styles
