"""Joint optimization of the adaptation network and the detector.

The adapted image feeds two branches: the restoration loss against the
clean reference image, and the detector. Both are summed into one weighted
total and back-propagated in a single pass, so one SGD step updates the
adaptation network and the detector together.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .detector import DetectorConfig, TinyYOLO, build_targets, check_input_size, postprocess
from .evaluation import map_range
from .imagery import BoundingBox, DatasetManifest, LabeledImage
from .losses import (LossBreakdown, LossWeights, breakdown, detection_loss, resolve_extractor,
                     restoration_loss, total_loss)
from .nia import NIANetwork

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "sdnia-checkpoint"
CHECKPOINT_VERSION = 1


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss. ``checkpoint`` holds the last good state."""

    def __init__(self, msg, checkpoint=None, history=None):
        super().__init__(msg)
        self.checkpoint = checkpoint
        self.history = history or []


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    momentum: float = 0.9
    batch_size: int = 4
    image_size: int = 544
    max_epochs: int = 400
    patience: int = 10
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    use_stylized_data: bool = True
    use_nia: bool = True
    res_on_originals: bool = True
    perceptual: str = "vgg"
    perceptual_weights: str | None = None
    hflip: bool = True
    eval_conf_threshold: float = 0.01
    weight_decay: float = 0.0

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        if self.learning_rate <= 0 or self.batch_size < 1 or self.image_size < 8 or self.max_epochs < 1:
            raise ValueError("learning_rate, batch_size, image_size and max_epochs must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    epoch: int = 0
    best_val_metric: float = -math.inf
    epochs_since_improvement: int = 0
    best_epoch: int = 0
    rng_state: str | None = None


class StopDecision(str, Enum):
    CONTINUE = "continue"
    STOP = "stop"


def early_stop_check(state: TrainState, val_metric: float, patience: int) -> StopDecision:
    """Record ``val_metric`` in ``state`` and decide whether to stop.

    Only a strictly greater metric counts as an improvement; a NaN metric
    never does.
    """
    if val_metric > state.best_val_metric:
        state.best_val_metric = val_metric
        state.epochs_since_improvement = 0
        state.best_epoch = state.epoch
    else:
        state.epochs_since_improvement += 1
    return StopDecision.STOP if state.epochs_since_improvement >= patience else StopDecision.CONTINUE


# ---------------------------------------------------------------- model

class SDNIAModel(nn.Module):
    """Optional adaptation network followed by the detector.

    ``forward`` takes only the image to detect; no reference is involved at
    inference.
    """

    def __init__(self, detector_config: DetectorConfig, use_nia: bool = True):
        super().__init__()
        self.detector_config = detector_config
        self.nia = NIANetwork() if use_nia else None
        self.detector = TinyYOLO(detector_config)

    @property
    def use_nia(self) -> bool:
        return self.nia is not None

    def adapt(self, x: torch.Tensor) -> torch.Tensor:
        return self.nia(x) if self.nia is not None else x

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        check_input_size(self.detector_config, *x.shape[-2:])
        return self.detector(self.adapt(x))

    def detect(self, x: torch.Tensor, conf_threshold: float | None = None):
        cfg = self.detector_config
        if conf_threshold is not None:
            cfg = copy.copy(cfg)
            cfg.conf_threshold = conf_threshold
        return postprocess(self(x), cfg)


def to_tensor(images: Sequence[np.ndarray], size: int | None = None, dtype=torch.float32) -> torch.Tensor:
    x = torch.from_numpy(np.stack([np.asarray(im).transpose(2, 0, 1) for im in images])).to(dtype)
    if size is not None and tuple(x.shape[-2:]) != (size, size):
        x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False).clamp(0, 1)
    return x


# ---------------------------------------------------------------- one step

@dataclass
class StepContext:
    """Everything a joint step needs besides the batch itself."""

    model: SDNIAModel
    optimizer: torch.optim.Optimizer | None
    weights: LossWeights
    references: dict[str, LabeledImage]
    extractor: nn.Module | None = None
    res_on_originals: bool = True
    image_size: int | None = None
    dtype: torch.dtype = torch.float32


def prepare_batch(batch: Sequence[LabeledImage], ctx: StepContext, flips: Sequence[bool] | None = None):
    kept, refs = [], []
    for item in batch:
        ref = ctx.references.get(item.reference_id)
        if ref is None:
            warnings.warn(f"{item.image_id}: reference {item.reference_id!r} not found; dropped from batch",
                          stacklevel=3)
            continue
        kept.append(item)
        refs.append(ref)
    if not kept:
        raise ValueError("empty batch after resolving references")
    x = to_tensor([e.load() for e in kept], ctx.image_size, ctx.dtype)
    r = to_tensor([e.load() for e in refs], ctx.image_size, ctx.dtype)
    boxes = [list(e.boxes) for e in kept]
    if flips is not None:
        flips = [f for f, item in zip(flips, batch) if item in kept]
        for i, f in enumerate(flips):
            if f:
                x[i] = x[i].flip(-1)
                r[i] = r[i].flip(-1)
                boxes[i] = [BoundingBox(b.class_id, 1.0 - b.cx, b.cy, b.w, b.h) for b in boxes[i]]
    is_orig = torch.tensor([e.origin == "original" for e in kept])
    return kept, x, r, boxes, is_orig


def compute_losses(ctx: StepContext, x, r, boxes, is_orig):
    """Forward both branches; returns ``(total, det_parts, res_parts)`` as tensors."""
    model = ctx.model
    adapted = model.adapt(x)
    raw = model.detector(adapted)
    H, W = x.shape[-2:]
    targets = build_targets(model.detector_config, boxes, H, W, dtype=x.dtype)
    det = detection_loss(raw, targets, model.detector_config, ctx.weights)
    if model.use_nia:
        mask = None if ctx.res_on_originals else ~is_orig
        res = restoration_loss(adapted, r, ctx.weights, ctx.extractor, mask=mask)
    else:
        z = adapted.new_zeros(())
        res = dict(l_l1=z, l_msssim=z, l_vgg_content=z, l_vgg_style=z, l_res=z)
    return total_loss(det, res, ctx.weights), det, res


def joint_step(batch: Sequence[LabeledImage], ctx: StepContext,
               flips: Sequence[bool] | None = None) -> LossBreakdown:
    """One forward/backward/update over both branches.

    Items whose reference image cannot be resolved are dropped with a
    warning. With ``ctx.optimizer = None`` only the losses are computed.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    _, x, r, boxes, is_orig = prepare_batch(batch, ctx, flips)
    total, det, res = compute_losses(ctx, x, r, boxes, is_orig)
    if ctx.optimizer is not None and torch.isfinite(total):
        ctx.optimizer.zero_grad(set_to_none=True)
        total.backward()
        ctx.optimizer.step()
    return breakdown(det, res, total)


# ---------------------------------------------------------------- evaluation

def evaluate_model(model: SDNIAModel, dataset: DatasetManifest, image_size: int | None = None,
                   conf_threshold: float = 0.01, batch_size: int = 16, thresholds=None):
    """mAP report of ``model`` on ``dataset``."""
    from .evaluation import COCO_THRESHOLDS

    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    dets, gts = [], []
    with torch.no_grad():
        for i in range(0, len(dataset.entries), batch_size):
            chunk = dataset.entries[i:i + batch_size]
            x = to_tensor([e.load() for e in chunk], image_size, dtype)
            dets.extend(model.detect(x, conf_threshold))
            gts.extend(list(e.boxes) for e in chunk)
    model.train(was_training)
    return map_range(dets, gts, dataset.class_names, thresholds or COCO_THRESHOLDS)


# ---------------------------------------------------------------- checkpoints

def _rng_state_json(rng: np.random.Generator) -> str:
    return json.dumps(rng.bit_generator.state)


def _restore_rng(state: str | None, seed: int) -> np.random.Generator:
    rng = np.random.default_rng(seed)
    if state:
        rng.bit_generator.state = json.loads(state)
    return rng


def checkpoint_payload(model: SDNIAModel, class_names: Sequence[str], train_config: TrainConfig | None = None,
                       state: TrainState | None = None, optimizer=None) -> dict:
    params = {}
    if model.nia is not None:
        params.update({f"nia/{k}": v.detach().clone() for k, v in model.nia.state_dict().items()})
    params.update({f"detector/{k}": v.detach().clone() for k, v in model.detector.state_dict().items()})
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "params": params,
        "shapes": {k: list(v.shape) for k, v in params.items()},
        "meta": json.dumps({
            "detector_config": model.detector_config.to_dict(),
            "use_nia": model.use_nia,
            "class_names": list(class_names),
            "train_config": train_config.to_dict() if train_config else None,
            "train_state": asdict(state) if state else None,
        }),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "torch_rng": torch.get_rng_state(),
    }


def save_checkpoint(path: str | Path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def read_checkpoint(path: str | Path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not an sdnia checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    payload["meta"] = json.loads(payload["meta"])
    for k, shape in payload["shapes"].items():
        if list(payload["params"][k].shape) != shape:
            raise ValueError(f"{path}: parameter {k} has shape {list(payload['params'][k].shape)}, header says {shape}")
    return payload


def _namespace(params: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def model_from_payload(payload: dict) -> SDNIAModel:
    meta = payload["meta"] if isinstance(payload["meta"], dict) else json.loads(payload["meta"])
    model = SDNIAModel(DetectorConfig.from_dict(meta["detector_config"]), use_nia=meta["use_nia"])
    dtype = next(iter(payload["params"].values())).dtype
    model.to(dtype)
    if model.nia is not None:
        model.nia.load_state_dict(_namespace(payload["params"], "nia/"))
    model.detector.load_state_dict(_namespace(payload["params"], "detector/"))
    return model


def load_checkpoint(path: str | Path) -> tuple[SDNIAModel, dict]:
    payload = read_checkpoint(path)
    return model_from_payload(payload).eval(), payload["meta"]


def load_nia(path: str | Path) -> NIANetwork:
    """Load only the adaptation network from a combined checkpoint."""
    payload = read_checkpoint(path)
    params = _namespace(payload["params"], "nia/")
    if not params:
        raise ValueError(f"{path}: checkpoint has no adaptation network")
    net = NIANetwork().to(next(iter(params.values())).dtype)
    net.load_state_dict(params)
    return net.eval()


# ---------------------------------------------------------------- train loop

@dataclass
class TrainResult:
    model: SDNIAModel
    history: list[dict]
    state: TrainState
    best_checkpoint: dict
    stopped_early: bool


def select_training_entries(train_set: DatasetManifest, config: TrainConfig) -> list[LabeledImage]:
    if config.use_stylized_data:
        return list(train_set.entries)
    return [e for e in train_set.entries if e.origin == "original"]


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)


def train(config: TrainConfig, train_set: DatasetManifest, val_set: DatasetManifest,
          detector_config: DetectorConfig | None = None, references: dict[str, LabeledImage] | None = None,
          evaluator: Callable[[SDNIAModel, DatasetManifest], float] | None = None,
          out_dir: str | Path | None = None, resume_from: str | Path | None = None,
          extractor=None, dtype=torch.float32) -> TrainResult:
    """Train until ``max_epochs`` or until validation mAP@.5 stalls for ``patience`` epochs.

    ``references`` maps image ids to clean references; by default it is
    built from the originals in both sets. ``evaluator`` overrides the
    validation metric (default mAP@.5 on ``val_set``). With ``out_dir`` the
    best checkpoint, a resumable last checkpoint, and line-delimited epoch
    history and step logs are written there.
    """
    entries = select_training_entries(train_set, config)
    if not entries or len(val_set.entries) == 0:
        raise ValueError("train and validation sets must be non-empty")
    if detector_config is None:
        detector_config = DetectorConfig(num_classes=len(train_set.class_names))
    seed_everything(config.seed)
    model = SDNIAModel(detector_config, use_nia=config.use_nia).to(dtype)
    opt = torch.optim.SGD(model.parameters(), lr=config.learning_rate, momentum=config.momentum,
                          weight_decay=config.weight_decay)
    state = TrainState()
    rng = np.random.default_rng(config.seed)
    history: list[dict] = []
    if resume_from is not None:
        payload = read_checkpoint(resume_from)
        model = model_from_payload(payload).to(dtype)
        opt = torch.optim.SGD(model.parameters(), lr=config.learning_rate, momentum=config.momentum,
                              weight_decay=config.weight_decay)
        if payload.get("optimizer"):
            opt.load_state_dict(payload["optimizer"])
        state = TrainState(**payload["meta"]["train_state"])
        rng = _restore_rng(state.rng_state, config.seed)
        torch.set_rng_state(payload["torch_rng"])
        if out_dir and (Path(out_dir) / "history.jsonl").exists():
            history = [json.loads(l) for l in (Path(out_dir) / "history.jsonl").read_text().splitlines() if l]
    if references is None:
        references = {e.image_id: e for ds in (train_set, val_set) for e in ds.entries if e.origin == "original"}
    if extractor is None and config.use_nia and config.loss_weights.gamma_res > 0:
        extractor = resolve_extractor(config.perceptual, config.perceptual_weights)
    if extractor is not None:
        extractor = extractor.to(dtype)
    ctx = StepContext(model, opt, config.loss_weights, references, extractor,
                      config.res_on_originals, config.image_size, dtype)
    if evaluator is None:
        def evaluator(m, ds):
            return evaluate_model(m, ds, config.image_size, config.eval_conf_threshold).map_50

    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    step_log = open(out / "steps.jsonl", "a", encoding="utf-8") if out else None
    best = checkpoint_payload(model, train_set.class_names, config, state)
    stopped_early = False
    try:
        while state.epoch < config.max_epochs:
            state.epoch += 1
            model.train()
            t0 = time.perf_counter()
            order = rng.permutation(len(entries))
            flips = rng.random(len(entries)) < 0.5 if config.hflip else np.zeros(len(entries), bool)
            sums: dict[str, float] = {}
            n_steps = 0
            for i in range(0, len(order), config.batch_size):
                idx = order[i:i + config.batch_size]
                bd = joint_step([entries[j] for j in idx], ctx, [bool(flips[j]) for j in idx])
                if not math.isfinite(bd.l_total):
                    if out:
                        save_checkpoint(out / "best.pt", best)
                    raise DivergenceError(f"non-finite loss at epoch {state.epoch}", best, history)
                for k, v in bd.to_dict().items():
                    sums[k] = sums.get(k, 0.0) + v
                n_steps += 1
                if step_log:
                    step_log.write(json.dumps({"epoch": state.epoch, "step": n_steps, **bd.to_dict()}) + "\n")
            metric = float(evaluator(model, val_set))
            decision = early_stop_check(state, metric, config.patience)
            state.rng_state = _rng_state_json(rng)
            record = {"epoch": state.epoch, **{k: v / max(n_steps, 1) for k, v in sums.items()},
                      "val_map50": metric, "seconds": time.perf_counter() - t0}
            history.append(record)
            log.info("epoch %d  l_total %.4f  val mAP@.5 %.4f", state.epoch, record.get("l_total", 0), metric)
            if state.epochs_since_improvement == 0:
                best = checkpoint_payload(model, train_set.class_names, config, state)
                if out:
                    save_checkpoint(out / "best.pt", best)
            if out:
                with open(out / "history.jsonl", "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(record) + "\n")
                save_checkpoint(out / "last.pt", checkpoint_payload(model, train_set.class_names, config, state, opt))
            if decision is StopDecision.STOP:
                stopped_early = True
                break
    finally:
        if step_log:
            step_log.close()
    final = model_from_payload(best).to(dtype)
    return TrainResult(final, history, state, best, stopped_early)
