"""Detection-based categorisation: keypoint MLP, weighted plane refinement and
the two basic category density maps."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .density import Category, DensityMap, KernelConfig, DEFAULT_SCALE, render_partition
from .tensor import ModelParams, Tensor, clamp, dense, log, mul, relu, scale, sigmoid, sub, sum_all

JOINT_NAMES = (
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
)
N_JOINTS = len(JOINT_NAMES)
NOSE = 0
UPPER = slice(1, 11)
LOWER = slice(11, 17)
LAYER_WIDTHS = (51, 34, 17, 12, 6, 1)
DEFAULT_MARGIN = 0.15
P_CLAMP = 1e-7


@dataclass
class KeypointRecord:
    """One detected person: 17 joints of (x, y, confidence) in canonical order."""

    joints: np.ndarray
    image_id: str = ""

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64)
        if self.joints.shape != (N_JOINTS, 3):
            raise ValueError(f"expected {N_JOINTS} x 3 joints, got shape {self.joints.shape}")
        conf = self.joints[:, 2]
        if np.any(conf < 0) or np.any(conf > 1):
            raise ValueError("joint confidences must lie in [0, 1]")

    @property
    def confidences(self) -> np.ndarray:
        return self.joints[:, 2]

    @property
    def nose(self) -> tuple[float, float]:
        return float(self.joints[NOSE, 0]), float(self.joints[NOSE, 1])

    def flatten(self) -> np.ndarray:
        return self.joints.reshape(-1).copy()


def pose_features(record: KeypointRecord) -> np.ndarray:
    """51 classifier inputs: joint offsets from the visible-joint centroid,
    divided by the visible extent, plus the raw confidences.

    Joints with zero confidence contribute zero offsets.
    """
    j = record.joints
    visible = j[:, 2] > 0
    pts = j[visible, :2] if visible.any() else j[:, :2]
    centre = pts.mean(axis=0)
    extent = max(float(np.ptp(pts[:, 0])), float(np.ptp(pts[:, 1])), 1.0)
    rel = (j[:, :2] - centre) / extent * visible[:, None]
    return np.concatenate([rel, j[:, 2:3]], axis=1).reshape(-1)


def feature_matrix(records: Sequence[KeypointRecord]) -> np.ndarray:
    if not records:
        return np.zeros((0, 3 * N_JOINTS))
    return np.stack([pose_features(r) for r in records])


# -- classifier ------------------------------------------------------------------


class ClassifierModel:
    """Fully connected 51-34-17-12-6-1 network with ReLU hidden units and a sigmoid output."""

    def __init__(self, params: ModelParams):
        self.params = params

    @classmethod
    def create(cls, seed: int = 0) -> ClassifierModel:
        rng = np.random.default_rng(seed)
        params = ModelParams()
        for i, (n_in, n_out) in enumerate(zip(LAYER_WIDTHS[:-1], LAYER_WIDTHS[1:]), start=1):
            std = np.sqrt(2.0 / n_in) if n_out > 1 else np.sqrt(1.0 / n_in)
            params.add(f"fc{i}.weight", Tensor(rng.standard_normal((n_out, n_in)) * std))
            params.add(f"fc{i}.bias", Tensor(np.zeros(n_out)))
        return cls(params)

    @property
    def depth(self) -> int:
        return len(LAYER_WIDTHS) - 1

    def forward(self, features: Tensor) -> Tensor:
        """Standing probability for a feature vector or a batch (B x 51 -> B x 1)."""
        h = features
        for i in range(1, self.depth + 1):
            h = dense(h, self.params[f"fc{i}.weight"], self.params[f"fc{i}.bias"])
            h = relu(h) if i < self.depth else sigmoid(h)
        return h

    def predict(self, records: Sequence[KeypointRecord]) -> np.ndarray:
        if not records:
            return np.zeros(0)
        return self.forward(Tensor(feature_matrix(records))).data[:, 0].astype(np.float64)


def classify(record: KeypointRecord, model: ClassifierModel) -> float:
    """Probability that ``record`` is standing."""
    return float(model.forward(Tensor(pose_features(record))).data[0])


def bce_loss(p: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy of probabilities ``p`` against 0/1 ``labels``."""
    y = Tensor(np.asarray(labels, dtype=np.float64).reshape(p.shape))
    one = Tensor(np.ones(p.shape))
    pc = clamp(p, P_CLAMP, 1 - P_CLAMP)
    ll = mul(y, log(pc)) + mul(sub(one, y), log(sub(one, pc)))
    return scale(sum_all(ll), -1.0 / p.data.size)


# -- weighted plane ------------------------------------------------------------


def sample_weight(record: KeypointRecord) -> float:
    """``2 * (upper-body confidence sum) + (lower-body confidence sum)``; the nose is not counted."""
    conf = record.confidences
    return 2.0 * float(conf[UPPER].sum()) + float(conf[LOWER].sum())


@dataclass(frozen=True)
class DecisionPlane:
    a: float
    b: float
    c: float

    def score(self, x: float, y: float) -> float:
        return self.a * x + self.b * y + self.c


@dataclass
class PlaneFit:
    plane: DecisionPlane | None
    skipped: bool = False
    reason: str = ""


def fit_plane(
    records: Sequence[KeypointRecord],
    baseline_labels: Sequence[int],
    weights: Sequence[float],
) -> PlaneFit:
    """Weighted least-squares fit of the 0/1 labels on (nose x, nose y, 1)."""
    if not (len(records) == len(baseline_labels) == len(weights)):
        raise ValueError("records, labels and weights must be aligned")
    w = np.asarray(weights, dtype=np.float64)
    keep = w > 0
    if keep.sum() < 3:
        return PlaneFit(None, True, f"need >= 3 weighted records, have {int(keep.sum())}")
    xy = np.array([r.nose for r in records], dtype=np.float64)[keep]
    y = np.asarray(baseline_labels, dtype=np.float64)[keep]
    w = w[keep]
    # solve in standardised coordinates for conditioning, then map back
    mu = xy.mean(axis=0)
    sd = xy.std(axis=0)
    if np.any(sd == 0):
        return PlaneFit(None, True, "nose positions are collinear")
    design = np.column_stack([(xy - mu) / sd, np.ones(len(y))])
    root_w = np.sqrt(w)
    coef, _, rank, sv = np.linalg.lstsq(design * root_w[:, None], y * root_w, rcond=None)
    if rank < 3 or sv[-1] <= 1e-9 * sv[0]:
        return PlaneFit(None, True, "nose positions are collinear")
    a, b = coef[0] / sd[0], coef[1] / sd[1]
    c = coef[2] - a * mu[0] - b * mu[1]
    return PlaneFit(DecisionPlane(float(a), float(b), float(c)))


def refine_labels(
    probs: Sequence[float],
    plane: DecisionPlane | None,
    records: Sequence[KeypointRecord],
    margin: float = DEFAULT_MARGIN,
) -> list[Category]:
    """Classifier labels, except that the plane decides when ``|p - 0.5| < margin``."""
    out = []
    for p, rec in zip(probs, records):
        if plane is not None and abs(p - 0.5) < margin:
            standing = plane.score(*rec.nose) >= 0.5
        else:
            standing = p >= 0.5
        out.append(Category.STANDING if standing else Category.SITTING)
    return out


def label_records(
    records: Sequence[KeypointRecord],
    model: ClassifierModel,
    margin: float = DEFAULT_MARGIN,
) -> tuple[list[Category], PlaneFit]:
    """Classify one image's detections and refine them with that image's plane."""
    if not records:
        return [], PlaneFit(None, True, "no detections")
    probs = model.predict(records)
    baseline = (probs >= 0.5).astype(int)
    fit = fit_plane(records, baseline, [sample_weight(r) for r in records])
    return refine_labels(probs, fit.plane, records, margin), fit


def basic_category_maps(
    records: Sequence[KeypointRecord],
    labels: Sequence[Category],
    image_size: tuple[int, int],
    scale: int = DEFAULT_SCALE,
    kernel: KernelConfig = KernelConfig(),
) -> tuple[DensityMap, DensityMap]:
    """(sitting, standing) maps rendered at nose points; widths come from all detections."""
    if len(records) != len(labels):
        raise ValueError("labels must align with records")
    h, w = image_size
    noses = [(min(max(r.nose[0], 0.0), w - 1e-3), min(max(r.nose[1], 0.0), h - 1e-3)) for r in records]
    standing = [lab is Category.STANDING for lab in labels]
    return render_partition(noses, standing, image_size, scale, kernel)


# -- metrics -------------------------------------------------------------------


@dataclass
class ClassificationMetrics:
    precision: dict[str, float]
    recall: dict[str, float]
    f1: dict[str, float]
    accuracy: float
    undefined: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "accuracy": self.accuracy,
            "undefined": self.undefined,
        }


def _ratio(num: int, den: int, name: str, undefined: list[str]) -> float:
    if den == 0:
        undefined.append(name)
        return 0.0
    return num / den


def classification_metrics(predicted: Sequence[Category], truth: Sequence[Category]) -> ClassificationMetrics:
    """Precision/recall/F1 per class and overall accuracy; undefined ratios report 0 and are listed."""
    if len(predicted) != len(truth):
        raise ValueError("predicted and truth must be aligned")
    if not truth:
        raise ValueError("classification_metrics needs at least one sample")
    pred = np.array([p is Category.STANDING for p in predicted])
    true = np.array([t is Category.STANDING for t in truth])
    undefined: list[str] = []
    precision, recall, f1 = {}, {}, {}
    for cat, pos_pred, pos_true in (
        (Category.STANDING.value, pred, true),
        (Category.SITTING.value, ~pred, ~true),
    ):
        tp = int(np.sum(pos_pred & pos_true))
        fp = int(np.sum(pos_pred & ~pos_true))
        fn = int(np.sum(~pos_pred & pos_true))
        precision[cat] = _ratio(tp, tp + fp, f"precision.{cat}", undefined)
        recall[cat] = _ratio(tp, tp + fn, f"recall.{cat}", undefined)
        f1[cat] = _ratio(2 * tp, 2 * tp + fp + fn, f"f1.{cat}", undefined)
    accuracy = float(np.mean(pred == true))
    return ClassificationMetrics(precision, recall, f1, accuracy, undefined)


# -- keypoint files ------------------------------------------------------------


@dataclass
class KeypointFile:
    image_id: str
    records: list[KeypointRecord]
    labels: list[Category | None]

    def to_json(self) -> dict:
        persons = []
        for rec, lab in zip(self.records, self.labels):
            entry: dict = {"keypoints": [[float(v) for v in joint] for joint in rec.joints]}
            if lab is not None:
                entry["label"] = lab.value
            persons.append(entry)
        return {"image_id": self.image_id, "persons": persons}

    @classmethod
    def from_json(cls, obj: dict) -> KeypointFile:
        image_id = str(obj.get("image_id", ""))
        records, labels = [], []
        for person in obj["persons"]:
            records.append(KeypointRecord(np.asarray(person["keypoints"], dtype=np.float64), image_id))
            labels.append(Category(person["label"]) if "label" in person else None)
        return cls(image_id, records, labels)


def write_keypoints(path: str | os.PathLike, kf: KeypointFile) -> None:
    Path(path).write_text(json.dumps(kf.to_json()) + "\n")


def read_keypoints(path: str | os.PathLike) -> KeypointFile:
    return KeypointFile.from_json(json.loads(Path(path).read_text()))
