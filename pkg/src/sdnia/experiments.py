"""Desk-scale directional experiment on the procedural shapes dataset.

Train a variant on clean shapes (plus stylized copies when the variant uses
stylized data), then score it on a clean test split and on fog and gamma
degraded copies of the same split. Everything is seeded.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

from .detector import DetectorConfig
from .imagery import DatasetManifest, degrade_dataset, mix_datasets
from .shapes import make_shapes_dataset
from .stylizer import ProceduralBackend, batch_stylize, make_style_images
from .training import TrainConfig, evaluate_model, train

TOY_ANCHORS = {8: ((0.12, 0.12), (0.2, 0.2), (0.28, 0.28)),
               16: ((0.2, 0.2), (0.3, 0.3), (0.4, 0.4))}
VARIANT_FLAGS = {
    "baseline": (False, False),
    "sd": (True, False),
    "nia": (False, True),
    "sdnia": (True, True),
}


def toy_detector_config(num_classes: int = 3, width: int = 8) -> DetectorConfig:
    return DetectorConfig(num_classes=num_classes, width=width, depth=(1, 1, 1, 1, 1),
                          grid_scales=(8, 16), anchors=TOY_ANCHORS)


@dataclass
class ToySetup:
    n_train: int = 300
    n_val: int = 50
    n_test: int = 50
    size: int = 64
    styles: tuple[str, ...] = ("fog0", "dark0")
    alphas: tuple[float, ...] = (1.0,)
    epochs: int = 30
    learning_rate: float = 0.05
    batch_size: int = 8
    width: int = 8
    seed: int = 0


@dataclass
class ToyData:
    mixed: DatasetManifest
    val: DatasetManifest
    test: DatasetManifest
    fog: DatasetManifest
    gamma: DatasetManifest

    @property
    def degraded(self) -> DatasetManifest:
        return replace(self.test, name="degraded", entries=self.fog.entries + self.gamma.entries)


def build_toy_data(setup: ToySetup) -> ToyData:
    s = setup.seed
    tr = make_shapes_dataset(setup.n_train, setup.size, seed=s + 1)
    va = make_shapes_dataset(setup.n_val, setup.size, seed=s + 2, split="val")
    te = make_shapes_dataset(setup.n_test, setup.size, seed=s + 3, split="test")
    fog = degrade_dataset(te, "fog", seed=s + 4)
    gamma = degrade_dataset(te, "gamma", seed=s + 5)
    all_styles = make_style_images(setup.size, seed=s + 7)
    sty = batch_stylize(ProceduralBackend(), tr, {k: all_styles[k] for k in setup.styles}, list(setup.alphas))
    return ToyData(mix_datasets(tr, sty), va, te, fog, gamma)


def run_variant(name: str, data: ToyData, setup: ToySetup) -> dict:
    use_sd, use_nia = VARIANT_FLAGS[name]
    cfg = TrainConfig(learning_rate=setup.learning_rate, batch_size=setup.batch_size, image_size=setup.size,
                      max_epochs=setup.epochs, patience=setup.epochs, seed=setup.seed,
                      use_stylized_data=use_sd, use_nia=use_nia, perceptual="none")
    t0 = time.perf_counter()
    res = train(cfg, data.mixed, data.val, toy_detector_config(len(data.mixed.class_names), setup.width))

    def score(ds):
        return evaluate_model(res.model, ds, setup.size).map_50

    return {"variant": name, "val": res.state.best_val_metric, "best_epoch": res.state.best_epoch,
            "clean": score(data.test), "degraded": score(data.degraded), "fog": score(data.fog),
            "gamma": score(data.gamma), "seconds": time.perf_counter() - t0, "model": res.model}


def toy_comparison(setup: ToySetup | None = None, variants=("baseline", "sdnia")) -> dict[str, dict]:
    setup = setup or ToySetup()
    data = build_toy_data(setup)
    return {v: run_variant(v, data, setup) for v in variants}
