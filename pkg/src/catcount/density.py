"""Density maps: geometry-adaptive Gaussian rendering, counting and file I/O.

Maps live on a grid ``scale`` times coarser than the source image. A head at
pixel ``(x, y)`` sits at grid coordinate ``(x / scale, y / scale)``; grid cell
``(r, c)`` has its centre at ``(c + 0.5, r + 0.5)``.
"""

from __future__ import annotations

import enum
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

DEFAULT_SCALE = 4
MAGIC = b"CCDM"
VERSION = 1


class Category(str, enum.Enum):
    SITTING = "sitting"
    STANDING = "standing"


class MapFormatError(ValueError):
    """Malformed density-map file (bad magic, version or length)."""


class MapInvariantError(ValueError):
    """Density-map content violates nonnegativity."""


@dataclass(frozen=True)
class PersonAnnotation:
    head: tuple[float, float]
    category: Category

    def to_json(self) -> dict:
        return {"head": [float(self.head[0]), float(self.head[1])], "category": self.category.value}

    @classmethod
    def from_json(cls, obj: dict) -> PersonAnnotation:
        x, y = obj["head"]
        return cls((float(x), float(y)), Category(obj["category"]))


@dataclass
class DensityMap:
    grid: np.ndarray
    scale: int = DEFAULT_SCALE

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float32)
        if self.grid.ndim != 2:
            raise ValueError(f"density grid must be 2-D, got shape {self.grid.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    @classmethod
    def zeros(cls, shape: tuple[int, int], scale: int = DEFAULT_SCALE) -> DensityMap:
        return cls(np.zeros(shape, dtype=np.float32), scale)


@dataclass(frozen=True)
class KernelConfig:
    k: int = 3
    beta: float = 0.3
    fallback_sigma: float = 4.0
    min_sigma: float = 0.5
    truncate: float = 4.0


def adaptive_sigmas(
    points: Sequence[tuple[float, float]],
    k: int = 3,
    beta: float = 0.3,
    fallback_sigma: float = 4.0,
    min_sigma: float | None = None,
    max_sigma: float | None = None,
) -> list[float]:
    """Per-point spread ``beta * mean distance to the k nearest other points``.

    Points with fewer than ``k`` neighbours get ``fallback_sigma``. Optional
    bounds clamp the result (degenerate geometry otherwise yields 0).
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if beta <= 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    n = len(points)
    if n == 0:
        return []
    if n - 1 < k:
        sigmas = np.full(n, float(fallback_sigma))
    else:
        pts = np.asarray(points, dtype=np.float64).reshape(n, 2)
        dist, _ = cKDTree(pts).query(pts, k=k + 1)
        # column 0 is the point itself (distance 0, or a coincident twin; either way 0)
        sigmas = beta * dist[:, 1:].mean(axis=1)
    lo = -np.inf if min_sigma is None else min_sigma
    hi = np.inf if max_sigma is None else max_sigma
    return [float(s) for s in np.clip(sigmas, lo, hi)]


def _axis_kernel(center: float, sigma: float, truncate: float, length: int) -> tuple[int, np.ndarray]:
    lo = max(0, int(np.floor(center - truncate * sigma - 0.5)))
    hi = min(length, int(np.ceil(center + truncate * sigma + 0.5)))
    cells = np.arange(lo, hi, dtype=np.float64) + 0.5
    offset = cells - center
    values = np.exp(-0.5 * (offset / sigma) ** 2)
    values[np.abs(offset) > truncate * sigma] = 0.0
    return lo, values


def render_points(
    points: Sequence[tuple[float, float]],
    grid_shape: tuple[int, int],
    sigmas: Sequence[float],
    truncate: float = 4.0,
) -> np.ndarray:
    """Sum of unit-mass truncated Gaussians at grid-coordinate ``points`` (64-bit)."""
    h, w = grid_shape
    out = np.zeros((h, w), dtype=np.float64)
    for (cx, cy), sigma in zip(points, sigmas):
        x0, gx = _axis_kernel(cx, sigma, truncate, w)
        y0, gy = _axis_kernel(cy, sigma, truncate, h)
        out[y0 : y0 + gy.size, x0 : x0 + gx.size] += np.outer(gy, gx) / (gy.sum() * gx.sum())
    return out


def grid_shape_for(image_size: tuple[int, int], scale: int = DEFAULT_SCALE) -> tuple[int, int]:
    h, w = image_size
    if h % scale or w % scale:
        raise ValueError(f"image size {h}x{w} is not divisible by scale {scale}")
    return h // scale, w // scale


def render_heads(
    heads: Sequence[tuple[float, float]],
    image_size: tuple[int, int],
    scale: int = DEFAULT_SCALE,
    kernel: KernelConfig = KernelConfig(),
    sigmas: Sequence[float] | None = None,
) -> DensityMap:
    """Render pixel-coordinate ``heads`` into a map at ``1/scale`` resolution.

    ``sigmas`` (grid units) default to the adaptive widths of ``heads`` themselves.
    """
    gh, gw = grid_shape_for(image_size, scale)
    for x, y in heads:
        if not (0 <= x < image_size[1] and 0 <= y < image_size[0]):
            raise ValueError(f"head ({x}, {y}) lies outside the {image_size[0]}x{image_size[1]} image")
    grid_pts = [(x / scale, y / scale) for x, y in heads]
    if sigmas is None:
        sigmas = kernel_sigmas(heads, (gh, gw), scale, kernel)
    grid = render_points(grid_pts, (gh, gw), sigmas, kernel.truncate)
    return DensityMap(grid.astype(np.float32), scale)


def kernel_sigmas(
    heads: Sequence[tuple[float, float]],
    grid_shape: tuple[int, int],
    scale: int = DEFAULT_SCALE,
    kernel: KernelConfig = KernelConfig(),
) -> list[float]:
    """Clamped adaptive widths, in grid units, for pixel-coordinate heads."""
    pts = [(x / scale, y / scale) for x, y in heads]
    return adaptive_sigmas(pts, kernel.k, kernel.beta, kernel.fallback_sigma, kernel.min_sigma, float(grid_shape[0]))


def render_partition(
    heads: Sequence[tuple[float, float]],
    groups: Sequence[bool],
    image_size: tuple[int, int],
    scale: int = DEFAULT_SCALE,
    kernel: KernelConfig = KernelConfig(),
) -> tuple[DensityMap, DensityMap]:
    """Split ``heads`` into (False, True) groups rendered with scene-wide widths.

    The two maps add up to the map of all heads.
    """
    sigmas = kernel_sigmas(heads, grid_shape_for(image_size, scale), scale, kernel)
    maps = []
    for flag in (False, True):
        idx = [i for i, g in enumerate(groups) if bool(g) is flag]
        maps.append(render_heads([heads[i] for i in idx], image_size, scale, kernel, [sigmas[i] for i in idx]))
    return maps[0], maps[1]


def render_density(
    annotations: Sequence[PersonAnnotation],
    image_size: tuple[int, int],
    scale: int = DEFAULT_SCALE,
    kernel: KernelConfig = KernelConfig(),
) -> DensityMap:
    """Ground-truth map of every annotated head."""
    return render_heads([a.head for a in annotations], image_size, scale, kernel)


def render_categories(
    annotations: Sequence[PersonAnnotation],
    image_size: tuple[int, int],
    scale: int = DEFAULT_SCALE,
    kernel: KernelConfig = KernelConfig(),
) -> tuple[DensityMap, DensityMap]:
    """(sitting, standing) ground-truth maps; kernel widths use the whole scene."""
    heads = [a.head for a in annotations]
    standing = [a.category is Category.STANDING for a in annotations]
    return render_partition(heads, standing, image_size, scale, kernel)


def count(dmap: DensityMap | np.ndarray) -> float:
    grid = dmap.grid if isinstance(dmap, DensityMap) else np.asarray(dmap)
    return float(np.sum(grid, dtype=np.float64))


# -- files ----------------------------------------------------------------------


def encode_map(dmap: DensityMap) -> bytes:
    h, w = dmap.shape
    return MAGIC + struct.pack("<IIII", VERSION, h, w, dmap.scale) + dmap.grid.astype("<f4").tobytes()


def decode_map(blob: bytes) -> DensityMap:
    if len(blob) < 20:
        raise MapFormatError(f"truncated density map: {len(blob)} bytes, header needs 20")
    if blob[:4] != MAGIC:
        raise MapFormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, h, w, scale = struct.unpack("<IIII", blob[4:20])
    if version != VERSION:
        raise MapFormatError(f"unsupported density map version {version}")
    expected = 20 + 4 * h * w
    if len(blob) != expected:
        raise MapFormatError(f"truncated density map: {len(blob)} bytes, expected {expected}")
    grid = np.frombuffer(blob, dtype="<f4", offset=20).reshape(h, w).astype(np.float32)
    if not np.all(np.isfinite(grid)):
        raise MapInvariantError("density map contains non-finite cells")
    if np.any(grid < 0):
        r, c = np.argwhere(grid < 0)[0]
        raise MapInvariantError(f"negative density {grid[r, c]} at cell ({r}, {c})")
    return DensityMap(grid, scale)


def write_map(path: str | os.PathLike, dmap: DensityMap) -> None:
    Path(path).write_bytes(encode_map(dmap))


def read_map(path: str | os.PathLike) -> DensityMap:
    return decode_map(Path(path).read_bytes())


def to_pgm(grid: np.ndarray) -> bytes:
    """8-bit binary PGM, max-normalised (an all-zero grid stays black)."""
    grid = np.asarray(grid, dtype=np.float64)
    peak = grid.max() if grid.size else 0.0
    pixels = np.zeros(grid.shape, dtype=np.uint8) if peak <= 0 else np.round(np.clip(grid / peak, 0, 1) * 255).astype(np.uint8)
    h, w = grid.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def write_pgm(path: str | os.PathLike, grid: np.ndarray) -> None:
    Path(path).write_bytes(to_pgm(grid))


# -- annotation files ---------------------------------------------------------


@dataclass
class AnnotationFile:
    image_id: str
    size: tuple[int, int]
    persons: list[PersonAnnotation] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "size": [int(self.size[0]), int(self.size[1])],
            "persons": [p.to_json() for p in self.persons],
        }

    @classmethod
    def from_json(cls, obj: dict) -> AnnotationFile:
        h, w = obj["size"]
        return cls(str(obj.get("image_id", "")), (int(h), int(w)), [PersonAnnotation.from_json(p) for p in obj["persons"]])


def write_annotations(path: str | os.PathLike, ann: AnnotationFile) -> None:
    Path(path).write_text(json.dumps(ann.to_json(), indent=1) + "\n")


def read_annotations(path: str | os.PathLike) -> AnnotationFile:
    return AnnotationFile.from_json(json.loads(Path(path).read_text()))


def category_counts(persons: Iterable[PersonAnnotation]) -> tuple[int, int]:
    """(sitting, standing) head counts."""
    sit = stand = 0
    for p in persons:
        if p.category is Category.SITTING:
            sit += 1
        else:
            stand += 1
    return sit, stand
