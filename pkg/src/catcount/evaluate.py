"""Count-error metrics and the two-mode evaluation report.

``detection`` mode counts people from the classified detection maps alone;
``full`` mode counts from the refined per-category maps. Metrics use the raw
fractional counts (rounding is only for display).
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .density import Category, category_counts
from .pipeline import Bundle, infer
from .synth import Corpus, Scene
from .tensor import get_dtype, precision

MODES = ("detection", "full")
DENSITY_THRESHOLD = 25  # persons; images below it form the low-density band


def _aligned(preds: Sequence[float], truths: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 1:
        raise ValueError(f"predictions {p.shape} and truths {t.shape} must be aligned 1-d lists")
    if p.size == 0:
        raise ValueError("metrics need at least one image")
    return p, t


def mae(preds: Sequence[float], truths: Sequence[float]) -> float:
    p, t = _aligned(preds, truths)
    return float(np.mean(np.abs(p - t)))


def rmse(preds: Sequence[float], truths: Sequence[float]) -> float:
    p, t = _aligned(preds, truths)
    return float(math.sqrt(np.mean(np.square(p - t))))


@dataclass
class ImageResult:
    id: str
    pred_sit: float
    pred_stand: float
    gt_sit: int
    gt_stand: int

    @property
    def gt_total(self) -> int:
        return self.gt_sit + self.gt_stand

    @property
    def pred_total(self) -> float:
        return self.pred_sit + self.pred_stand


def _cell(preds, truths) -> dict | None:
    if len(preds) == 0:
        return None
    return {"n": len(preds), "mae": mae(preds, truths), "rmse": rmse(preds, truths)}


@dataclass
class EvalReport:
    mode: str
    images: list[ImageResult]
    category: dict[str, dict] = field(init=False)
    overall: dict = field(init=False)
    density_band: dict[str, dict | None] = field(init=False)

    def __post_init__(self):
        if not self.images:
            raise ValueError("cannot report on zero images")
        im = self.images
        self.category = {
            Category.SITTING.value: _cell([r.pred_sit for r in im], [r.gt_sit for r in im]),
            Category.STANDING.value: _cell([r.pred_stand for r in im], [r.gt_stand for r in im]),
        }
        self.overall = _cell([r.pred_total for r in im], [r.gt_total for r in im])
        low = [r for r in im if r.gt_total < DENSITY_THRESHOLD]
        high = [r for r in im if r.gt_total >= DENSITY_THRESHOLD]
        self.density_band = {
            "low": _cell([r.pred_total for r in low], [r.gt_total for r in low]),
            "high": _cell([r.pred_total for r in high], [r.gt_total for r in high]),
        }

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "category": self.category,
            "overall": self.overall,
            "density_band": self.density_band,
            "density_threshold": DENSITY_THRESHOLD,
            "images": [
                {"id": r.id, "pred_sit": r.pred_sit, "pred_stand": r.pred_stand, "gt_sit": r.gt_sit, "gt_stand": r.gt_stand}
                for r in self.images
            ],
        }


def _score(bundle: Bundle, scene: Scene, mode: str) -> tuple[ImageResult, ImageResult]:
    # precision is thread-local, so each worker adopts the caller's
    with precision(mode):
        pred = infer(bundle, scene.image, scene.detections)
    gt_sit, gt_stand = category_counts(scene.annotations)
    d_sit, d_stand = pred.detection_counts
    f_sit, f_stand = pred.counts
    return ImageResult(scene.id, d_sit, d_stand, gt_sit, gt_stand), ImageResult(scene.id, f_sit, f_stand, gt_sit, gt_stand)


def evaluate(bundle: Bundle, corpus: Corpus, indices: Sequence[int], workers: int | None = None) -> dict[str, EvalReport]:
    """Reports for both counting modes over the scenes ``indices`` (in the given order).

    Images are scored on a thread pool; rows are assembled in index order, so
    the report does not depend on ``workers``.
    """
    scenes = [corpus.scene(int(i)) for i in indices]
    mode = "double" if get_dtype() == np.float64 else "single"
    workers = workers or min(8, os.cpu_count() or 1)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        scored = list(pool.map(lambda s: _score(bundle, s, mode), scenes))
    return {
        "detection": EvalReport("detection", [d for d, _ in scored]),
        "full": EvalReport("full", [f for _, f in scored]),
    }


def reports_json(reports: dict[str, EvalReport]) -> str:
    return json.dumps([reports[m].to_json() for m in MODES if m in reports], indent=1, sort_keys=True) + "\n"


def reports_csv(reports: dict[str, EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mode", "id", "pred_sit", "pred_stand", "gt_sit", "gt_stand"])
    for m in MODES:
        if m not in reports:
            continue
        for r in reports[m].images:
            w.writerow([m, r.id, repr(r.pred_sit), repr(r.pred_stand), r.gt_sit, r.gt_stand])
    return buf.getvalue()


def write_reports(out_dir: str | os.PathLike, reports: dict[str, EvalReport]) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jpath, cpath = out / "report.json", out / "report.csv"
    jpath.write_text(reports_json(reports))
    cpath.write_text(reports_csv(reports))
    return jpath, cpath
