"""Geometric and counting primitives shared by every other module.

Boxes live in normalized center-size coordinates. Polygons and masks live in
pixel coordinates, with pixel ``(row i, col j)`` covering the unit square whose
center is ``(j + 0.5, i + 0.5)``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np
from shapely.geometry import Polygon


class SppClass(enum.IntEnum):
    """Seeds-per-pod category. ``SppClass(5)`` raises ``ValueError``."""

    SPP1 = 1
    SPP2 = 2
    SPP3 = 3
    SPP4 = 4

    @classmethod
    def parse(cls, value) -> "SppClass":
        if isinstance(value, bool) or not isinstance(value, (int, np.integer, SppClass)):
            raise ValueError(f"spp must be an integer in 1..4, got {value!r}")
        if int(value) not in (1, 2, 3, 4):
            raise ValueError(f"spp {value} not in 1..4")
        return cls(int(value))

    def __str__(self) -> str:
        return f"{int(self)}spp"


class Domain(str, enum.Enum):
    SOURCE = "source"
    TARGET = "target"


@dataclass(frozen=True)
class Box:
    """Axis-aligned box, normalized center-size. Clipped to ``[0, 1]`` on construction."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box must have positive size, got w={self.w} h={self.h}")
        x0, x1 = self.cx - self.w / 2, self.cx + self.w / 2
        y0, y1 = self.cy - self.h / 2, self.cy + self.h / 2
        if x0 < 0 or x1 > 1:
            x0, x1 = max(0.0, x0), min(1.0, x1)
            if x1 <= x0:
                raise ValueError(f"box {vals} lies outside the image")
            object.__setattr__(self, "cx", (x0 + x1) / 2)
            object.__setattr__(self, "w", x1 - x0)
        if y0 < 0 or y1 > 1:
            y0, y1 = max(0.0, y0), min(1.0, y1)
            if y1 <= y0:
                raise ValueError(f"box {vals} lies outside the image")
            object.__setattr__(self, "cy", (y0 + y1) / 2)
            object.__setattr__(self, "h", y1 - y0)

    @classmethod
    def from_xyxy(cls, x0: float, y0: float, x1: float, y1: float) -> "Box":
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)

    @property
    def xyxy(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    @property
    def center(self) -> tuple[float, float]:
        return (self.cx, self.cy)

    @property
    def area(self) -> float:
        return self.w * self.h

    def to_pixels(self, width: int, height: int) -> tuple[float, float, float, float]:
        x0, y0, x1, y1 = self.xyxy
        return (x0 * width, y0 * height, x1 * width, y1 * height)

    def pixel_window(self, width: int, height: int) -> tuple[int, int, int, int]:
        """Integer ``(x0, y0, x1, y1)`` pixel range covered by the box (exclusive max).

        A small tolerance absorbs float error so pixel-aligned boxes map back
        to their exact window.
        """
        x0, y0, x1, y1 = self.to_pixels(width, height)
        eps = 1e-6
        return (
            max(int(math.floor(x0 + eps)), 0),
            max(int(math.floor(y0 + eps)), 0),
            min(int(math.ceil(x1 - eps)), width),
            min(int(math.ceil(y1 - eps)), height),
        )


@dataclass(frozen=True)
class Detection:
    box: Box
    spp: SppClass
    confidence: float = 1.0
    # carried through annotation files only; counting ignores it
    occluded: bool | None = None

    def __post_init__(self):
        object.__setattr__(self, "spp", SppClass.parse(self.spp))
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class InstanceAnnotation:
    polygon: tuple[tuple[float, float], ...]
    spp: SppClass

    def __post_init__(self):
        poly = tuple((float(x), float(y)) for x, y in self.polygon)
        object.__setattr__(self, "polygon", poly)
        object.__setattr__(self, "spp", SppClass.parse(self.spp))
        validate_polygon(poly)

    def check_bounds(self, width: int, height: int) -> None:
        for k, (x, y) in enumerate(self.polygon):
            if not (0 <= x <= width and 0 <= y <= height):
                raise ValueError(f"vertex {k} ({x}, {y}) outside {width}x{height} image")

    def translated(self, dx: float, dy: float) -> "InstanceAnnotation":
        return InstanceAnnotation(tuple((x + dx, y + dy) for x, y in self.polygon), self.spp)


Annotation = Union[Detection, InstanceAnnotation]


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    path: str
    width: int
    height: int
    domain: Domain = Domain.SOURCE
    annotations: tuple[Annotation, ...] = field(default_factory=tuple)
    # foreground (plant) regions as pixel polygons; only field scenes carry them
    regions: tuple[tuple[tuple[float, float], ...], ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "domain", Domain(self.domain))
        object.__setattr__(self, "annotations", tuple(self.annotations))
        regions = tuple(tuple((float(x), float(y)) for x, y in r) for r in self.regions)
        for r in regions:
            validate_polygon(r)
        object.__setattr__(self, "regions", regions)
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"{self.image_id}: bad image size {self.width}x{self.height}")

    @property
    def detections(self) -> list[Detection]:
        return [a for a in self.annotations if isinstance(a, Detection)]

    @property
    def instances(self) -> list[InstanceAnnotation]:
        return [a for a in self.annotations if isinstance(a, InstanceAnnotation)]

    def ground_truth(self) -> "CountResult":
        return CountResult(len(self.annotations), sum(int(a.spp) for a in self.annotations))


@dataclass(frozen=True)
class CountResult:
    pod_count: int = 0
    seed_count: int = 0

    def __post_init__(self):
        if self.pod_count < 0:
            raise ValueError("pod_count must be non-negative")
        if not (self.pod_count <= self.seed_count <= 4 * self.pod_count):
            raise ValueError(
                f"seed_count {self.seed_count} inconsistent with pod_count {self.pod_count}"
            )

    def __add__(self, other: "CountResult") -> "CountResult":
        return CountResult(self.pod_count + other.pod_count, self.seed_count + other.seed_count)


def validate_polygon(vertices: Sequence[tuple[float, float]]) -> None:
    if len(vertices) < 3:
        raise ValueError(f"polygon needs at least 3 vertices, got {len(vertices)}")
    if not all(math.isfinite(c) for v in vertices for c in v):
        raise ValueError("polygon has non-finite vertices")
    poly = Polygon(vertices)
    if poly.area <= 0:
        raise ValueError("polygon has zero area")
    if not poly.is_valid:
        raise ValueError("polygon is self-intersecting")


# --- IoU -------------------------------------------------------------------

def box_iou(a: Box, b: Box) -> float:
    ax0, ay0, ax1, ay1 = a.xyxy
    bx0, by0, bx1, by1 = b.xyxy
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return min(1.0, inter / union)


def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU for ``(N, 4)`` and ``(M, 4)`` xyxy arrays."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0, inter / union, 0.0)
    return np.clip(iou, 0.0, 1.0)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


# --- rasterization -----------------------------------------------------------

def _ring_array(ring) -> np.ndarray:
    if isinstance(ring, InstanceAnnotation):
        ring = ring.polygon
    return np.asarray(ring, dtype=float).reshape(-1, 2)


def rasterize_rings(
    rings: Iterable, width: int, height: int, origin: tuple[int, int] = (0, 0)
) -> np.ndarray:
    """Even-odd scanline fill of one or more closed rings.

    A pixel is set iff its center has an odd number of edge crossings at or to
    its left on its row. Edges are half-open in y (top end included), so a
    center lying exactly on a left or top boundary is inside and one on a right
    or bottom boundary is outside. ``origin`` shifts the raster window: output
    pixel ``(i, j)`` has its center at ``(origin[0] + j + .5, origin[1] + i + .5)``.
    """
    ox, oy = origin
    toggles = np.zeros((height, width + 1), dtype=np.int32)
    yc = oy + np.arange(height) + 0.5
    for ring in rings:
        p = _ring_array(ring)
        q = np.roll(p, -1, axis=0)
        xa, ya, xb, yb = p[:, 0], p[:, 1], q[:, 0], q[:, 1]
        keep = ya != yb
        xa, ya, xb, yb = xa[keep], ya[keep], xb[keep], yb[keep]
        if xa.size == 0:
            continue
        lo, hi = np.minimum(ya, yb), np.maximum(ya, yb)
        hit = (lo[:, None] <= yc[None, :]) & (yc[None, :] < hi[:, None])
        e_idx, r_idx = np.nonzero(hit)
        if e_idx.size == 0:
            continue
        x = xa[e_idx] + (yc[r_idx] - ya[e_idx]) * (xb[e_idx] - xa[e_idx]) / (yb[e_idx] - ya[e_idx])
        j = np.clip(np.ceil(x - ox - 0.5), 0, width).astype(np.int64)
        np.add.at(toggles, (r_idx, j), 1)
    return (np.cumsum(toggles, axis=1)[:, :width] % 2).astype(bool)


def rasterize(
    poly, width: int, height: int, origin: tuple[int, int] = (0, 0)
) -> np.ndarray:
    """Binary ``(height, width)`` mask of a single polygon (pixel-center rule)."""
    vertices = poly.polygon if isinstance(poly, InstanceAnnotation) else poly
    validate_polygon([tuple(v) for v in vertices])
    return rasterize_rings([vertices], width, height, origin)


def trace_contours(mask: np.ndarray) -> list[list[tuple[int, int]]]:
    """Pixel-edge boundary rings of a binary mask.

    Rings follow pixel borders on the integer grid, so ``rasterize_rings`` of
    the result reproduces ``mask`` exactly (holes included, via even-odd).
    """
    m = np.pad(np.asarray(mask, dtype=bool), 1)
    inner = m[1:-1, 1:-1]
    edges: dict[tuple[int, int], list[tuple[int, int]]] = {}

    def add(starts, ends):
        for s, e in zip(starts, ends):
            edges.setdefault(s, []).append(e)

    ii, jj = np.nonzero(inner & ~m[:-2, 1:-1])  # top
    add(zip(jj, ii), zip(jj + 1, ii))
    ii, jj = np.nonzero(inner & ~m[1:-1, 2:])  # right
    add(zip(jj + 1, ii), zip(jj + 1, ii + 1))
    ii, jj = np.nonzero(inner & ~m[2:, 1:-1])  # bottom
    add(zip(jj + 1, ii + 1), zip(jj, ii + 1))
    ii, jj = np.nonzero(inner & ~m[1:-1, :-2])  # left
    add(zip(jj, ii + 1), zip(jj, ii))

    rings = []
    for start in sorted(edges):
        while edges.get(start):
            ring = [start]
            cur = edges[start].pop()
            while cur != start:
                ring.append(cur)
                cur = edges[cur].pop()
            rings.append(_drop_collinear([(int(x), int(y)) for x, y in ring]))
    return rings


def _drop_collinear(ring: list[tuple[int, int]]) -> list[tuple[int, int]]:
    out = []
    n = len(ring)
    for k in range(n):
        px, py = ring[k - 1]
        x, y = ring[k]
        nx, ny = ring[(k + 1) % n]
        if (x - px) * (ny - y) - (y - py) * (nx - x) != 0:
            out.append((x, y))
    return out


def mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int] | None:
    """Tight ``(x0, y0, x1, y1)`` pixel bounds (exclusive max) or ``None`` if empty."""
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(mask.any(axis=0))
    return int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1


# --- counting ------------------------------------------------------------------

def count_from_detections(dets: Iterable[Annotation]) -> CountResult:
    """Pods are detections; seeds are the sum of their spp classes."""
    pods = seeds = 0
    for d in dets:
        pods += 1
        seeds += int(d.spp)
    return CountResult(pods, seeds)
