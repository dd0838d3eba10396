"""Synthetic crowd scenes: single-channel images, head annotations, simulated
pose-estimator keypoints and on-disk corpora."""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .density import AnnotationFile, Category, PersonAnnotation, read_annotations, write_annotations
from .phase1 import N_JOINTS, KeypointFile, KeypointRecord, read_keypoints, write_keypoints

IMAGE_MAGIC = b"CCIM"
IMAGE_VERSION = 1

# Pose templates in body units, origin at the hip centre, y pointing down.
# Rows follow the canonical joint order; x is mirrored by the facing direction.
_UPPER_TEMPLATE = [
    (0.0, -8.5),  # nose
    (0.45, -9.0),
    (-0.45, -9.0),
    (0.9, -8.8),
    (-0.9, -8.8),
    (1.8, -7.0),
    (-1.8, -7.0),
    (2.2, -4.6),
    (-2.2, -4.6),
    (2.3, -2.4),
    (-2.3, -2.4),
]
_STANDING_LOWER = [(1.0, 0.0), (-1.0, 0.0), (1.0, 4.3), (-1.0, 4.3), (1.0, 8.6), (-1.0, 8.6)]
_SITTING_LOWER = [(0.6, 0.0), (-0.6, 0.0), (3.6, 0.3), (3.0, 0.3), (3.9, 4.0), (3.3, 4.0)]
_HEAD_CENTRE = (0.0, -8.8)
_HEAD_RADIUS = 1.1
_FIGURE_UNITS = 18.5  # standing head-top to ankle span
# body parts as ellipses: (centre x, centre y, semi-axis x, semi-axis y)
_STANDING_PARTS = [(0.0, 0.8, 1.6, 8.0)]
_SITTING_PARTS = [(0.0, -3.6, 1.7, 3.6), (1.9, 0.3, 2.6, 0.9), (3.7, 2.3, 0.7, 2.0)]
JITTER_PER_HEIGHT = 0.03  # 3 px of keypoint jitter per 100 px of figure height
OCCLUDED_SPREAD = 0.25  # covered joints are guessed this far off (fraction of height)


@dataclass
class SceneConfig:
    image_size: tuple[int, int] = (64, 64)
    count_range: tuple[int, int] = (1, 10)
    sitting_fraction: float = 0.5
    occlusion: float = 0.0
    noise: float = 0.02
    person_height: tuple[float, float] = (18.0, 24.0)
    layout: str = "mixed"
    detect_min_joints: int = 9
    crowd_miss: float = 0.5
    max_attempts: int = 200
    seed: int = 0

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.count_range = tuple(int(v) for v in self.count_range)
        self.person_height = tuple(float(v) for v in self.person_height)
        lo, hi = self.count_range
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid count range {self.count_range}")
        for name in ("sitting_fraction", "occlusion"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.layout not in ("mixed", "split"):
            raise ValueError(f"unknown layout {self.layout!r}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> SceneConfig:
        return cls(**obj)


@dataclass
class Figure:
    category: Category
    hip: tuple[float, float]
    unit: float
    facing: int

    def _to_px(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return np.column_stack([self.hip[0] + self.facing * pts[:, 0] * self.unit, self.hip[1] + pts[:, 1] * self.unit])

    def joints(self) -> np.ndarray:
        lower = _STANDING_LOWER if self.category is Category.STANDING else _SITTING_LOWER
        return self._to_px(_UPPER_TEMPLATE + lower)

    def head(self) -> tuple[float, float]:
        x, y = self._to_px([_HEAD_CENTRE])[0]
        return float(x), float(y)

    def ellipses(self) -> list[tuple[float, float, float, float]]:
        parts = _STANDING_PARTS if self.category is Category.STANDING else _SITTING_PARTS
        out = [(*self.head(), _HEAD_RADIUS * self.unit, _HEAD_RADIUS * self.unit)]
        for cx, cy, ax, ay in parts:
            px, py = self._to_px([(cx, cy)])[0]
            out.append((px, py, ax * self.unit, ay * self.unit))
        return out

    def bbox(self) -> tuple[float, float, float, float]:
        boxes = [(cx - ax, cy - ay, cx + ax, cy + ay) for cx, cy, ax, ay in self.ellipses()]
        j = self.joints()
        x0 = min(min(b[0] for b in boxes), j[:, 0].min())
        y0 = min(min(b[1] for b in boxes), j[:, 1].min())
        x1 = max(max(b[2] for b in boxes), j[:, 0].max())
        y1 = max(max(b[3] for b in boxes), j[:, 1].max())
        return x0, y0, x1, y1


@dataclass
class SceneSample:
    image: np.ndarray  # 1 x H x W, values in [0, 1]
    annotations: list[PersonAnnotation]
    keypoints: list[KeypointRecord]
    detected: list[bool]
    flags: list[str] = field(default_factory=list)

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]

    @property
    def labels(self) -> list[Category]:
        return [a.category for a in self.annotations]

    def detections(self) -> tuple[list[KeypointRecord], list[Category]]:
        """What the simulated pose estimator reports: detected persons and their true labels."""
        recs = [k for k, d in zip(self.keypoints, self.detected) if d]
        labs = [a.category for a, d in zip(self.annotations, self.detected) if d]
        return recs, labs


def _overlap_fraction(a, b) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return ix * iy / min(area_a, area_b)


def _place(cfg: SceneConfig, rng: np.random.Generator, category: Category, boxes: list) -> Figure | None:
    h, w = cfg.image_size
    for _ in range(cfg.max_attempts):
        height = rng.uniform(*cfg.person_height)
        unit = height / _FIGURE_UNITS
        facing = 1 if rng.random() < 0.5 else -1
        probe = Figure(category, (0.0, 0.0), unit, facing)
        x0, y0, x1, y1 = probe.bbox()
        lo_x, hi_x = -x0, w - 1 - x1
        lo_y, hi_y = -y0, h - 1 - y1
        if cfg.layout == "split":
            # standing figures keep their hips in the upper half, sitting in the lower
            if category is Category.STANDING:
                hi_y = min(hi_y, h / 2)
            else:
                lo_y = max(lo_y, h / 2)
        if hi_x < lo_x or hi_y < lo_y:
            continue
        fig = Figure(category, (rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y)), unit, facing)
        box = fig.bbox()
        if all(_overlap_fraction(box, other) <= cfg.occlusion for other in boxes):
            return fig
    return None


def _in_ellipse(x: float, y: float, e: tuple[float, float, float, float]) -> bool:
    cx, cy, ax, ay = e
    return ((x - cx) / ax) ** 2 + ((y - cy) / ay) ** 2 <= 1.0


def _ellipse_mask(shape, cx, cy, ax, ay) -> np.ndarray:
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]]
    return ((xx + 0.5 - cx) / ax) ** 2 + ((yy + 0.5 - cy) / ay) ** 2 <= 1.0


def generate_scene(cfg: SceneConfig, rng: np.random.Generator | None = None) -> SceneSample:
    """Draw one scene. Later-drawn (nearer, lower feet) figures occlude earlier ones."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    h, w = cfg.image_size
    n_target = int(rng.integers(cfg.count_range[0], cfg.count_range[1] + 1))
    figures: list[Figure] = []
    boxes: list = []
    flags: list[str] = []
    for _ in range(n_target):
        cat = Category.SITTING if rng.random() < cfg.sitting_fraction else Category.STANDING
        fig = _place(cfg, rng, cat, boxes)
        if fig is None:
            continue
        figures.append(fig)
        boxes.append(fig.bbox())
    if len(figures) < n_target:
        flags.append(f"placed {len(figures)} of {n_target} persons")
    figures.sort(key=lambda f: f.bbox()[3])

    image = 0.15 + 0.05 * rng.random((h, w))
    for fig in figures:
        shade = rng.uniform(0.55, 0.95)
        for cx, cy, ax, ay in fig.ellipses():
            image[_ellipse_mask((h, w), cx, cy, ax, ay)] = shade
    if cfg.noise > 0:
        image = image + rng.normal(0.0, cfg.noise, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)

    boxes = [f.bbox() for f in figures]
    annotations, records, detected = [], [], []
    for idx, fig in enumerate(figures):
        height = fig.unit * _FIGURE_UNITS
        jitter_sd = JITTER_PER_HEIGHT * height
        true_joints = fig.joints()
        jitter = np.clip(rng.normal(0.0, jitter_sd, size=true_joints.shape), -2 * jitter_sd, 2 * jitter_sd)
        joints = np.zeros((N_JOINTS, 3))
        joints[:, :2] = true_joints + jitter
        conf = rng.uniform(0.9, 1.0, size=N_JOINTS)
        nearer = [e for f in figures[idx + 1 :] for e in f.ellipses()]
        for j, (x, y) in enumerate(true_joints):
            inside = 0 <= x < w and 0 <= y < h
            if not inside or any(_in_ellipse(x, y, e) for e in nearer):
                conf[j] = 0.0
                joints[j, :2] = true_joints[j] + rng.normal(0.0, OCCLUDED_SPREAD * height, size=2)
        joints[:, 0] = np.clip(joints[:, 0], 0.0, w - 1e-3)
        joints[:, 1] = np.clip(joints[:, 1], 0.0, h - 1e-3)
        joints[:, 2] = conf
        records.append(KeypointRecord(joints))
        annotations.append(PersonAnnotation(fig.head(), fig.category))
        n_visible = int(np.sum(conf > 0))
        crowding = sum(_overlap_fraction(boxes[idx], b) for j, b in enumerate(boxes) if j != idx)
        p_detect = n_visible / N_JOINTS * np.exp(-cfg.crowd_miss * crowding)
        draw = rng.random()
        detected.append(n_visible >= cfg.detect_min_joints and draw < p_detect)
    return SceneSample(image[None], annotations, records, detected, flags)


# -- image files -----------------------------------------------------------------


class ImageFormatError(ValueError):
    pass


def encode_image(image: np.ndarray) -> bytes:
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 3:
        if img.shape[0] != 1:
            raise ValueError(f"images are single-channel, got {img.shape[0]} channels")
        img = img[0]
    h, w = img.shape
    return IMAGE_MAGIC + struct.pack("<III", IMAGE_VERSION, h, w) + img.astype("<f4").tobytes()


def decode_image(blob: bytes) -> np.ndarray:
    """Decode to an ``H x W`` float32 array."""
    if len(blob) < 16:
        raise ImageFormatError("truncated image header")
    if blob[:4] != IMAGE_MAGIC:
        raise ImageFormatError(f"bad magic {blob[:4]!r}, expected {IMAGE_MAGIC!r}")
    version, h, w = struct.unpack("<III", blob[4:16])
    if version != IMAGE_VERSION:
        raise ImageFormatError(f"unsupported image version {version}")
    if len(blob) != 16 + 4 * h * w:
        raise ImageFormatError(f"truncated image: {len(blob)} bytes, expected {16 + 4 * h * w}")
    return np.frombuffer(blob, dtype="<f4", offset=16).reshape(h, w).astype(np.float32)


def write_image(path: str | os.PathLike, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_image(image))


def read_image(path: str | os.PathLike) -> np.ndarray:
    return decode_image(Path(path).read_bytes())


# -- corpora -------------------------------------------------------------------------

MANIFEST = "manifest.json"


def scene_id(i: int) -> str:
    return f"scene_{i:04d}"


def generate_corpus(
    out_dir: str | os.PathLike,
    n_scenes: int,
    configs: SceneConfig | Sequence[SceneConfig],
    seed: int,
) -> dict:
    """Write ``n_scenes`` scenes plus a manifest; scene ``i`` uses ``configs[i % len]``.

    Each scene draws from its own stream seeded by ``(seed, i)``.
    """
    if isinstance(configs, SceneConfig):
        configs = [configs]
    root = Path(out_dir)
    for sub in ("images", "annotations", "keypoints"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    scenes = []
    for i in range(n_scenes):
        cfg = configs[i % len(configs)]
        sample = generate_scene(cfg, np.random.default_rng([seed, i]))
        sid = scene_id(i)
        records, labels = sample.detections()
        for rec in records:
            rec.image_id = sid
        write_image(root / "images" / f"{sid}.ccim", sample.image)
        write_annotations(root / "annotations" / f"{sid}.json", AnnotationFile(sid, sample.size, sample.annotations))
        write_keypoints(root / "keypoints" / f"{sid}.json", KeypointFile(sid, records, list(labels)))
        n_sit = sum(1 for a in sample.annotations if a.category is Category.SITTING)
        scenes.append(
            {
                "id": sid,
                "image": f"images/{sid}.ccim",
                "annotations": f"annotations/{sid}.json",
                "keypoints": f"keypoints/{sid}.json",
                "n_persons": len(sample.annotations),
                "n_sitting": n_sit,
                "n_standing": len(sample.annotations) - n_sit,
                "n_detected": len(records),
                "flags": sample.flags,
            }
        )
    manifest = {
        "format": 1,
        "seed": seed,
        "n_scenes": n_scenes,
        "configs": [c.to_json() for c in configs],
        "scenes": scenes,
    }
    (root / MANIFEST).write_text(json.dumps(manifest, indent=1) + "\n")
    return manifest


def corpus_checksum(root: str | os.PathLike) -> str:
    """SHA-256 over every file in the corpus (relative path and bytes, sorted)."""
    root = Path(root)
    digest = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        digest.update(str(path.relative_to(root)).encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()


@dataclass
class Scene:
    id: str
    image: np.ndarray  # H x W
    annotations: list[PersonAnnotation]
    detections: list[KeypointRecord]
    detection_labels: list[Category | None]

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape


class Corpus:
    """Read access to a generated corpus; every scene load is recorded in ``access_log``."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        path = self.root / MANIFEST
        if not path.exists():
            raise FileNotFoundError(f"corpus manifest not found: {path}")
        self.manifest = json.loads(path.read_text())
        self.entries = self.manifest["scenes"]
        self.access_log: list[int] = []
        self._cache: dict[int, Scene] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def scene(self, i: int) -> Scene:
        self.access_log.append(i)
        if i not in self._cache:
            e = self.entries[i]
            ann = read_annotations(self.root / e["annotations"])
            kp = read_keypoints(self.root / e["keypoints"])
            self._cache[i] = Scene(e["id"], read_image(self.root / e["image"]), ann.persons, kp.records, kp.labels)
        return self._cache[i]
