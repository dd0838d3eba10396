"""End-to-end inference across the three phases and the on-disk model bundle."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import Config
from .density import Category, DensityMap, count
from .phase1 import ClassifierModel, KeypointRecord, PlaneFit, basic_category_maps, label_records
from .phase2 import DOWNSAMPLE, Phase2Model
from .phase3 import Phase3Model
from .tensor import Tensor, avgpool_down, load_params, no_grad

PHASE1_FILE = "phase1.cccp"
PHASE2_FILE = "phase2.cccp"
PHASE3_SIT_PRE_FILE = "phase3_sit_pre.cccp"
PHASE3_STAND_PRE_FILE = "phase3_stand_pre.cccp"
PHASE3_FILE = "phase3.cccp"
SPLIT_FILE = "split.json"


class MissingArtifactError(FileNotFoundError):
    """An upstream checkpoint or split file a step depends on does not exist."""


def require(workdir: str | os.PathLike, name: str) -> Path:
    path = Path(workdir) / name
    if not path.exists():
        raise MissingArtifactError(f"missing required artifact: {path}")
    return path


def new_classifier(cfg: Config) -> ClassifierModel:
    return ClassifierModel.create(cfg.seed)


def new_phase2(cfg: Config) -> Phase2Model:
    return Phase2Model.create(cfg.seed + 2, cfg.model.regression_widths, cfg.model.mask_net_widths)


def new_phase3(cfg: Config) -> Phase3Model:
    return Phase3Model.create(cfg.seed + 3, cfg.model.branch_widths)


def load_classifier(workdir, cfg: Config) -> ClassifierModel:
    model = new_classifier(cfg)
    load_params(require(workdir, PHASE1_FILE), model.params)
    return model


def load_phase2(workdir, cfg: Config) -> Phase2Model:
    model = new_phase2(cfg)
    load_params(require(workdir, PHASE2_FILE), model.params)
    return model


def load_phase3(workdir, cfg: Config) -> Phase3Model:
    model = new_phase3(cfg)
    load_params(require(workdir, PHASE3_FILE), model.params)
    return model


# -- per-phase inference ---------------------------------------------------------


def detection_maps(
    records: Sequence[KeypointRecord],
    classifier: ClassifierModel,
    image_size: tuple[int, int],
    cfg: Config,
) -> tuple[DensityMap, DensityMap, list[Category], PlaneFit]:
    """Phase-1 output for one image: basic (sitting, standing) maps plus the labels used."""
    with no_grad():
        labels, fit = label_records(records, classifier, cfg.margin)
    sit, stand = basic_category_maps(records, labels, image_size, DOWNSAMPLE, cfg.kernel)
    return sit, stand, labels, fit


def _stack(arrays: Sequence[np.ndarray]) -> Tensor:
    return Tensor(np.stack([np.asarray(a)[None] for a in arrays]))


def crowd_maps(model: Phase2Model, images: Sequence[np.ndarray], detection_totals: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Phase-2 total crowd maps (h x w each) for same-sized images."""
    with no_grad():
        out, _ = model.forward(_stack(images), _stack(detection_totals))
    return [m[0].astype(np.float32) for m in out.data]


def final_maps(
    model: Phase3Model,
    images: Sequence[np.ndarray],
    sit_maps: Sequence[np.ndarray],
    stand_maps: Sequence[np.ndarray],
    crowd: Sequence[np.ndarray],
) -> list[tuple[np.ndarray, np.ndarray]]:
    with no_grad():
        small = avgpool_down(_stack(images), DOWNSAMPLE)
        f_sit, f_stand = model.forward(_stack(sit_maps), _stack(stand_maps), _stack(crowd), small)
    return [(a[0].astype(np.float32), b[0].astype(np.float32)) for a, b in zip(f_sit.data, f_stand.data)]


@dataclass
class Bundle:
    cfg: Config
    classifier: ClassifierModel
    phase2: Phase2Model
    phase3: Phase3Model

    @classmethod
    def load(cls, workdir: str | os.PathLike, cfg: Config) -> Bundle:
        return cls(cfg, load_classifier(workdir, cfg), load_phase2(workdir, cfg), load_phase3(workdir, cfg))


@dataclass
class Prediction:
    labels: list[Category]
    basic_sit: DensityMap
    basic_stand: DensityMap
    crowd: DensityMap
    final_sit: DensityMap
    final_stand: DensityMap

    @property
    def detection_counts(self) -> tuple[float, float]:
        return count(self.basic_sit), count(self.basic_stand)

    @property
    def counts(self) -> tuple[float, float]:
        return count(self.final_sit), count(self.final_stand)


def infer(bundle: Bundle, image: np.ndarray, records: Sequence[KeypointRecord]) -> Prediction:
    """Run all three phases on one ``H x W`` image and its detected keypoints."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 3:
        image = image[0]
    sit, stand, labels, _ = detection_maps(records, bundle.classifier, image.shape, bundle.cfg)
    crowd = crowd_maps(bundle.phase2, [image], [sit.grid + stand.grid])[0]
    f_sit, f_stand = final_maps(bundle.phase3, [image], [sit.grid], [stand.grid], [crowd])[0]
    return Prediction(labels, sit, stand, DensityMap(crowd), DensityMap(f_sit), DensityMap(f_stand))
