"""Copy-paste scene synthesis from masked pod instances.

Instances are cut out of labelled pool images, rotated about their patch
centre, and dropped at integer offsets on a background. The annotation of a
placed instance is its polygon under the same rigid motion, and the
composited pixels are exactly the pixel-center raster of that polygon, so
annotations and pixels agree by construction.
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .core import ImageRecord, InstanceAnnotation, SppClass, mask_bbox, rasterize_rings

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "podcount-synthetic"
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class InstanceCutout:
    """RGBA patch of one pod. ``polygon`` is in patch pixel coordinates."""

    patch: np.ndarray  # (h, w, 4) uint8, alpha in {0, 255}
    spp: SppClass
    source_image_id: str
    polygon: tuple[tuple[float, float], ...]

    def __post_init__(self):
        object.__setattr__(self, "spp", SppClass.parse(self.spp))
        if self.patch.ndim != 3 or self.patch.shape[2] != 4:
            raise ValueError(f"patch must be (h, w, 4), got {self.patch.shape}")
        alpha = self.patch[..., 3] > 0
        bb = mask_bbox(alpha)
        if bb is None:
            raise ValueError("cutout has no opaque pixel")
        x0, y0, x1, y1 = bb
        h, w = alpha.shape
        if x0 > 1 or y0 > 1 or w - x1 > 1 or h - y1 > 1:
            raise ValueError(f"patch {w}x{h} does not tightly bound its opaque region {bb}")

    @property
    def size(self) -> tuple[int, int]:
        """``(width, height)`` in pixels."""
        return self.patch.shape[1], self.patch.shape[0]

    @property
    def mask(self) -> np.ndarray:
        return self.patch[..., 3] > 0


@dataclass(frozen=True)
class ComposerConfig:
    instances_per_image: tuple[int, int] = (40, 80)
    rotation: tuple[float, float] = (0.0, 360.0)
    max_overlap_iou: float = 0.0
    max_placement_attempts: int = 50
    rng_seed: int = 0
    image_size: tuple[int, int] = (1024, 1024)  # (width, height)

    def __post_init__(self):
        lo, hi = self.instances_per_image
        if not (1 <= lo <= hi):
            raise ValueError(f"instances_per_image needs 1 <= min <= max, got {self.instances_per_image}")
        if self.rotation[0] > self.rotation[1]:
            raise ValueError(f"bad rotation range {self.rotation}")
        if not (0.0 <= self.max_overlap_iou <= 1.0):
            raise ValueError(f"max_overlap_iou {self.max_overlap_iou} outside [0, 1]")
        if self.max_placement_attempts < 1:
            raise ValueError("max_placement_attempts must be >= 1")
        if min(self.image_size) < 1:
            raise ValueError(f"bad image_size {self.image_size}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ComposerConfig":
        d = dict(d)
        for k in ("instances_per_image", "rotation", "image_size"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass(frozen=True)
class Provenance:
    source_image_id: str
    rotation_deg: float
    placement_xy: tuple[int, int]


@dataclass
class _Placed:
    x0: int
    y0: int
    mask: np.ndarray

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass
class SyntheticScene:
    image: np.ndarray  # (H, W, 3) uint8
    annotations: list[InstanceAnnotation] = field(default_factory=list)
    provenance: list[Provenance] = field(default_factory=list)
    _placed: list[_Placed] = field(default_factory=list, repr=False)

    @classmethod
    def from_background(cls, background: np.ndarray) -> "SyntheticScene":
        bg = np.asarray(background)
        if bg.ndim != 3 or bg.shape[2] != 3 or bg.dtype != np.uint8:
            raise ValueError("background must be (H, W, 3) uint8")
        return cls(bg.copy())

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def height(self) -> int:
        return self.image.shape[0]

    def instance_mask(self, k: int) -> np.ndarray:
        """Full-size boolean mask of the ``k``-th placed instance."""
        p = self._placed[k]
        out = np.zeros((self.height, self.width), dtype=bool)
        h, w = p.mask.shape
        out[p.y0 : p.y0 + h, p.x0 : p.x0 + w] = p.mask
        return out


# --- extraction -------------------------------------------------------------------

def load_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def extract_instances(record: ImageRecord, image: np.ndarray | None = None) -> list[InstanceCutout]:
    """One cutout per instance annotation, alpha = the polygon's pixel-center raster."""
    if not record.instances:
        raise ValueError(f"{record.image_id}: no instance annotations to extract")
    px = load_rgb(record.path) if image is None else np.asarray(image)
    if px.shape[:2] != (record.height, record.width):
        raise ValueError(f"{record.image_id}: image is {px.shape[1]}x{px.shape[0]}, record says {record.width}x{record.height}")
    out = []
    for k, inst in enumerate(record.instances):
        mask = rasterize_rings([inst.polygon], record.width, record.height)
        bb = mask_bbox(mask)
        if bb is None:
            warnings.warn(f"{record.image_id}: instance {k} covers no pixel centre; skipped", RuntimeWarning)
            continue
        x0, y0, x1, y1 = bb
        patch = np.zeros((y1 - y0, x1 - x0, 4), dtype=np.uint8)
        patch[..., :3] = px[y0:y1, x0:x1, :3]
        patch[..., 3] = np.where(mask[y0:y1, x0:x1], 255, 0)
        poly = tuple((x - x0, y - y0) for x, y in inst.polygon)
        out.append(InstanceCutout(patch, inst.spp, record.image_id, poly))
    return out


# --- placement --------------------------------------------------------------------

def rotate_polygon(poly: Sequence[tuple[float, float]], deg: float, center: tuple[float, float]):
    """Rotate vertices about ``center``; a multiple of 360 degrees is returned untouched."""
    if deg % 360.0 == 0.0:
        return tuple((float(x), float(y)) for x, y in poly)
    t = math.radians(deg)
    c, s = math.cos(t), math.sin(t)
    cx, cy = center
    return tuple((cx + c * (x - cx) - s * (y - cy), cy + s * (x - cx) + c * (y - cy)) for x, y in poly)


def _sample_rgb(patch: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Alpha-weighted bilinear read of patch colours at continuous pixel coordinates.

    Transparent texels carry no weight, so background never bleeds into the
    pod. Where all four neighbours are transparent the nearest texel is used.
    """
    h, w = patch.shape[:2]
    u, v = xs - 0.5, ys - 0.5
    j0, i0 = np.floor(u).astype(np.int64), np.floor(v).astype(np.int64)
    fu, fv = u - j0, v - i0
    rgb = patch[..., :3].astype(np.float64)
    alpha = (patch[..., 3] > 0).astype(np.float64)
    acc = np.zeros(xs.shape + (3,))
    wsum = np.zeros(xs.shape)
    for di, dj, wt in ((0, 0, (1 - fv) * (1 - fu)), (0, 1, (1 - fv) * fu), (1, 0, fv * (1 - fu)), (1, 1, fv * fu)):
        ii, jj = i0 + di, j0 + dj
        ok = (ii >= 0) & (ii < h) & (jj >= 0) & (jj < w)
        a = np.zeros(xs.shape)
        a[ok] = alpha[ii[ok], jj[ok]] * wt[ok]
        acc[ok] += a[ok, None] * rgb[ii[ok], jj[ok]]
        wsum += a
    out = np.empty(xs.shape + (3,))
    good = wsum > 1e-12
    out[good] = acc[good] / wsum[good, None]
    if (~good).any():
        ni = np.clip(np.floor(ys[~good]).astype(np.int64), 0, h - 1)
        nj = np.clip(np.floor(xs[~good]).astype(np.int64), 0, w - 1)
        out[~good] = rgb[ni, nj]
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def _overlaps(scene: SyntheticScene, x0: int, y0: int, mask: np.ndarray, limit: float) -> bool:
    h, w = mask.shape
    area = int(mask.sum())
    for p in scene._placed:
        ph, pw = p.mask.shape
        ix0, iy0 = max(x0, p.x0), max(y0, p.y0)
        ix1, iy1 = min(x0 + w, p.x0 + pw), min(y0 + h, p.y0 + ph)
        if ix0 >= ix1 or iy0 >= iy1:
            continue
        a = mask[iy0 - y0 : iy1 - y0, ix0 - x0 : ix1 - x0]
        b = p.mask[iy0 - p.y0 : iy1 - p.y0, ix0 - p.x0 : ix1 - p.x0]
        inter = int((a & b).sum())
        if inter and inter / (area + p.area - inter) > limit:
            return True
    return False


def place_instance(
    scene: SyntheticScene, cutout: InstanceCutout, cfg: ComposerConfig, rng: np.random.Generator
) -> bool:
    """Try up to ``max_placement_attempts`` random poses; True if the cutout was placed.

    Offsets are integers drawn uniformly over the range that keeps the
    rotated polygon inside the image.
    """
    pw, ph = cutout.size
    center = (pw / 2.0, ph / 2.0)
    W, H = scene.width, scene.height
    for _ in range(cfg.max_placement_attempts):
        deg = float(rng.uniform(*cfg.rotation))
        rot = rotate_polygon(cutout.polygon, deg, center)
        xs = [x for x, _ in rot]
        ys = [y for _, y in rot]
        lo_x, hi_x = math.ceil(-min(xs)), math.floor(W - max(xs))
        lo_y, hi_y = math.ceil(-min(ys)), math.floor(H - max(ys))
        if lo_x > hi_x or lo_y > hi_y:
            continue  # rotated instance cannot fit inside the image
        dx = int(rng.integers(lo_x, hi_x + 1))
        dy = int(rng.integers(lo_y, hi_y + 1))
        poly = tuple((x + dx, y + dy) for x, y in rot)

        wx0 = max(int(math.floor(min(xs) + dx)), 0)
        wy0 = max(int(math.floor(min(ys) + dy)), 0)
        wx1 = min(int(math.ceil(max(xs) + dx)), W)
        wy1 = min(int(math.ceil(max(ys) + dy)), H)
        mask = rasterize_rings([poly], wx1 - wx0, wy1 - wy0, origin=(wx0, wy0))
        if not mask.any():
            continue
        if _overlaps(scene, wx0, wy0, mask, cfg.max_overlap_iou):
            continue
        try:
            ann = InstanceAnnotation(poly, cutout.spp)
        except ValueError:
            continue  # rotation produced a numerically degenerate ring

        ii, jj = np.nonzero(mask)
        # pixel centres in scene coordinates, mapped back into the patch
        gx, gy = wx0 + jj + 0.5 - dx, wy0 + ii + 0.5 - dy
        if deg % 360.0 != 0.0:
            t = math.radians(-deg)
            c, s = math.cos(t), math.sin(t)
            gx, gy = (
                center[0] + c * (gx - center[0]) - s * (gy - center[1]),
                center[1] + s * (gx - center[0]) + c * (gy - center[1]),
            )
        scene.image[wy0 + ii, wx0 + jj] = _sample_rgb(cutout.patch, gx, gy)
        scene.annotations.append(ann)
        scene.provenance.append(Provenance(cutout.source_image_id, deg, (dx, dy)))
        scene._placed.append(_Placed(wx0, wy0, mask))
        return True
    return False


def compose_scene(
    background: np.ndarray, pool: Sequence[InstanceCutout], cfg: ComposerConfig, rng: np.random.Generator
) -> SyntheticScene:
    if not pool:
        raise ValueError("empty instance pool")
    scene = SyntheticScene.from_background(background)
    if all(c.size[0] > scene.width or c.size[1] > scene.height for c in pool):
        raise ValueError("infeasible composition: background smaller than every cutout")
    lo, hi = cfg.instances_per_image
    n = int(rng.integers(lo, hi + 1))
    for _ in range(n):
        place_instance(scene, pool[int(rng.integers(len(pool)))], cfg, rng)
    return scene


# --- backgrounds and the procedural pool -------------------------------------------

def fit_background(bg: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Tile then crop ``bg`` to ``(width, height)``."""
    w, h = size
    bg = np.asarray(bg, dtype=np.uint8)
    reps = (-(-h // bg.shape[0]), -(-w // bg.shape[1]), 1)
    return np.ascontiguousarray(np.tile(bg, reps)[:h, :w])


def black_cloth(size: tuple[int, int], seed: int = 0) -> np.ndarray:
    """Dark woven-looking texture standing in for a photographed black cloth."""
    w, h = size
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w]
    weave = 3.0 * np.sin(xx * 1.9) * np.sin(yy * 1.7)
    base = 14.0 + weave + rng.normal(0.0, 2.5, size=(h, w))
    img = np.stack([base, base * 0.95, base * 1.05], axis=-1)
    return np.clip(np.round(img), 0, 40).astype(np.uint8)


def pod_polygon(spp: int, rng: np.random.Generator, seed_len: float = 11.0, width: float = 9.0):
    """Outline of a pod with ``spp`` seed bulges, centred on the origin, long axis along x."""
    length = seed_len * spp + 6.0
    n = 12 * spp + 8
    t = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
    x = 0.5 * length * np.cos(t)
    # bulge over each seed, pinched between seeds
    phase = (x / length + 0.5) * spp * np.pi
    half = 0.5 * width * (0.8 + 0.2 * np.abs(np.sin(phase)))
    y = half * np.sin(t) * (1.0 + 0.04 * rng.standard_normal(n))
    return [(float(a), float(b)) for a, b in zip(x, y)]


def render_pool_image(
    rng: np.random.Generator, image_id: str, size: int = 160, n_pods: int = 3
) -> tuple[ImageRecord, np.ndarray]:
    """A labelled lab photo: tan pods with brighter seeds on black cloth."""
    img = black_cloth((size, size), int(rng.integers(2**31)))
    anns: list[InstanceAnnotation] = []
    taken = np.zeros((size, size), dtype=bool)
    tries = 0
    while len(anns) < n_pods and tries < 200:
        tries += 1
        spp = int(rng.integers(1, 5))
        base = pod_polygon(spp, rng)
        t = rng.uniform(0, 2 * np.pi)
        c, s = np.cos(t), np.sin(t)
        r = max(math.hypot(x, y) for x, y in base) + 2
        cx, cy = rng.uniform(r, size - r, size=2)
        poly = [(cx + c * x - s * y, cy + s * x + c * y) for x, y in base]
        try:
            ann = InstanceAnnotation(tuple(poly), spp)
        except ValueError:
            continue
        mask = rasterize_rings([ann.polygon], size, size)
        if (mask & taken).any() or not mask.any():
            continue
        taken |= np.pad(mask, 2)[:-4, 2:-2] | np.pad(mask, 2)[4:, 2:-2] | mask
        tone = rng.uniform(0.85, 1.1)
        col = np.array([170.0, 140.0, 80.0]) * tone
        ii, jj = np.nonzero(mask)
        # seeds brighten the pod along its long axis
        along = (jj + 0.5 - cx) * c + (ii + 0.5 - cy) * s
        seed_pos = (along / (11.0 * spp + 6.0) + 0.5) * spp
        glow = 0.75 + 0.25 * np.cos(2 * np.pi * (seed_pos - 0.5)) ** 2
        px = col[None, :] * glow[:, None] + rng.normal(0, 4, size=(ii.size, 3))
        img[ii, jj] = np.clip(np.round(px), 60, 255).astype(np.uint8)
        anns.append(ann)
    rec = ImageRecord(image_id, f"{image_id}.png", size, size, annotations=tuple(anns))
    return rec, img


def procedural_pool(n_images: int = 40, seed: int = 0, size: int = 160, pods: tuple[int, int] = (2, 4)):
    """``n_images`` labelled pool images (records and pixels) from a fixed seed."""
    rng = np.random.default_rng([seed, 40])
    out = []
    for k in range(n_images):
        n = int(rng.integers(pods[0], pods[1] + 1))
        out.append(render_pool_image(rng, f"pool_{k:03d}", size, n))
    return out


# --- dataset writing --------------------------------------------------------------

def save_png(path: Path, pixels: np.ndarray) -> None:
    # fixed settings and no metadata keep the bytes reproducible
    Image.fromarray(np.ascontiguousarray(pixels)).save(path, format="PNG", compress_level=6)


def scene_annotation_json(scene: SyntheticScene, image_name: str) -> dict:
    return {
        "image": image_name,
        "width": scene.width,
        "height": scene.height,
        "instances": [
            {"polygon": [[x, y] for x, y in a.polygon], "spp": int(a.spp)} for a in scene.annotations
        ],
        "provenance": [
            {"source_image_id": p.source_image_id, "rotation_deg": p.rotation_deg, "placement_xy": list(p.placement_xy)}
            for p in scene.provenance
        ],
    }


def scene_seed(cfg: ComposerConfig, index: int) -> list[int]:
    return [int(cfg.rng_seed), int(index)]


def _render_and_write(args):
    index, split, bg, pool, cfg, out = args
    scene = compose_scene(bg, pool, cfg, np.random.default_rng(scene_seed(cfg, index)))
    stem = f"{index:05d}"
    save_png(out / split / f"{stem}.png", scene.image)
    with open(out / split / f"{stem}.json", "w") as f:
        json.dump(scene_annotation_json(scene, f"{stem}.png"), f, separators=(",", ":"))
    hist = [0, 0, 0, 0]
    for a in scene.annotations:
        hist[int(a.spp) - 1] += 1
    return {
        "index": index,
        "split": split,
        "image": f"{split}/{stem}.png",
        "annotation": f"{split}/{stem}.json",
        "seed": scene_seed(cfg, index),
        "pods": len(scene.annotations),
        "seeds": sum(int(a.spp) for a in scene.annotations),
        "classes": hist,
    }


def generate_dataset(
    pool: Sequence[InstanceCutout],
    background: np.ndarray,
    n_train: int,
    n_eval: int,
    cfg: ComposerConfig,
    out,
    workers: int = 1,
    config_echo: dict | None = None,
) -> dict:
    """Write ``n_train + n_eval`` scenes plus ``manifest.json`` under ``out``.

    Scene ``i`` (train first, then eval) draws from ``default_rng([rng_seed, i])``,
    so output does not depend on ``workers``.
    """
    if n_train < 0 or n_eval < 0:
        raise ValueError("n_train and n_eval must be non-negative")
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for split, n in (("train", n_train), ("eval", n_eval)):
            if n:
                (out / split).mkdir(exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot write dataset to {out}: {e}") from e
    bg = fit_background(background, cfg.image_size)
    jobs = [(i, "train" if i < n_train else "eval", bg, pool, cfg, out) for i in range(n_train + n_eval)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            scenes = list(ex.map(_render_and_write, jobs))
    else:
        scenes = [_render_and_write(j) for j in jobs]
    scenes.sort(key=lambda s: s["index"])
    hist = np.sum([s["classes"] for s in scenes], axis=0).tolist() if scenes else [0, 0, 0, 0]
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "kind": "instance",
        "splits": {"train": n_train, "eval": n_eval},
        "total_images": len(scenes),
        "total_instances": int(sum(s["pods"] for s in scenes)),
        "class_histogram": {f"{k + 1}spp": int(v) for k, v in enumerate(hist)},
        "composer": cfg.to_dict(),
        "config": config_echo,
        "scenes": scenes,
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    log.info("wrote %d scenes (%d instances) to %s", len(scenes), manifest["total_instances"], out)
    return manifest
