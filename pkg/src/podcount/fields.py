"""Synthetic outdoor field scenes for the detection pipelines.

A scene is soil with one or more plant regions (the foreground a promptable
segmenter should recover). Pods are axis-aligned bars inside the plants and
may overlap each other; optional distractor pods lie wholly on the soil,
outside every plant. Boxes are pixel aligned so visibility checks are exact.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .core import Box, Detection, Domain, ImageRecord, SppClass, rasterize_rings

SOIL = (96, 74, 52)
FOLIAGE = (52, 112, 44)
POD = (196, 164, 92)


@dataclass(frozen=True)
class FieldSceneConfig:
    size: tuple[int, int] = (256, 256)  # (width, height)
    pods_per_image: tuple[int, int] = (50, 70)
    plants: tuple[int, int] = (1, 3)
    distractors: tuple[int, int] = (0, 0)
    pod_length: tuple[int, int] = (8, 16)
    pod_thickness: tuple[int, int] = (4, 6)

    def __post_init__(self):
        for name in ("pods_per_image", "plants", "distractors", "pod_length", "pod_thickness"):
            lo, hi = getattr(self, name)
            if not (0 <= lo <= hi):
                raise ValueError(f"{name}: need 0 <= min <= max, got {(lo, hi)}")
        if self.plants[0] < 1:
            raise ValueError("a field scene needs at least one plant")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FieldSceneConfig":
        return cls(**{k: tuple(v) for k, v in d.items()})


def _ellipse(cx, cy, ax, ay, tilt, n=24):
    t = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
    x, y = ax * np.cos(t), ay * np.sin(t)
    c, s = math.cos(tilt), math.sin(tilt)
    return tuple((float(cx + c * a - s * b), float(cy + s * a + c * b)) for a, b in zip(x, y))


def _paint_pod(img, x0, y0, x1, y1, spp, rng):
    img[y0:y1, x0:x1] = POD
    horizontal = (x1 - x0) >= (y1 - y0)
    n = (x1 - x0) if horizontal else (y1 - y0)
    # one lighter blob per seed along the long axis
    for k in range(spp):
        c = int((k + 0.5) * n / spp)
        if horizontal:
            img[y0 + 1 : y1 - 1, x0 + max(c - 1, 0) : x0 + c + 1] = (226, 198, 128)
        else:
            img[y0 + max(c - 1, 0) : y0 + c + 1, x0 + 1 : x1 - 1] = (226, 198, 128)
    img[y0:y1, x0:x1] = np.clip(
        img[y0:y1, x0:x1].astype(np.int16) + rng.integers(-6, 7, size=(y1 - y0, x1 - x0, 3)), 40, 255
    ).astype(np.uint8)


def _pod_rect(rng, cfg, W, H):
    length = int(rng.integers(cfg.pod_length[0], cfg.pod_length[1] + 1))
    thick = int(rng.integers(cfg.pod_thickness[0], cfg.pod_thickness[1] + 1))
    w, h = (length, thick) if rng.random() < 0.5 else (thick, length)
    x0 = int(rng.integers(0, W - w + 1))
    y0 = int(rng.integers(0, H - h + 1))
    return x0, y0, x0 + w, y0 + h


def make_field_scene(
    rng: np.random.Generator,
    cfg: FieldSceneConfig = FieldSceneConfig(),
    image_id: str = "field",
    domain: Domain = Domain.SOURCE,
) -> tuple[ImageRecord, np.ndarray]:
    """Render one scene; returns the record (boxes, plant regions) and ``(H, W, 3)`` uint8 pixels."""
    W, H = cfg.size
    img = np.empty((H, W, 3), dtype=np.uint8)
    img[:] = SOIL
    img[:] = np.clip(img.astype(np.int16) + rng.integers(-12, 13, size=img.shape), 20, 255)

    regions = []
    for _ in range(int(rng.integers(cfg.plants[0], cfg.plants[1] + 1))):
        ax = rng.uniform(0.18, 0.32) * W
        ay = rng.uniform(0.18, 0.32) * H
        r = max(ax, ay)
        cx = rng.uniform(r, W - r) if W > 2 * r else W / 2
        cy = rng.uniform(r, H - r) if H > 2 * r else H / 2
        regions.append(_ellipse(cx, cy, ax, ay, rng.uniform(0, np.pi)))
    fg = rasterize_rings(regions[:1], W, H)
    for reg in regions[1:]:
        fg |= rasterize_rings([reg], W, H)
    img[fg] = np.clip(np.asarray(FOLIAGE) + rng.integers(-10, 11, size=(int(fg.sum()), 3)), 20, 255)

    rects, spps = [], []
    n_pods = int(rng.integers(cfg.pods_per_image[0], cfg.pods_per_image[1] + 1))
    tries = 0
    while len(rects) < n_pods and tries < 100 * max(n_pods, 1):
        tries += 1
        x0, y0, x1, y1 = _pod_rect(rng, cfg, W, H)
        if fg[y0:y1, x0:x1].all():
            rects.append((x0, y0, x1, y1))
            spps.append(int(rng.integers(1, 5)))
    n_dis = int(rng.integers(cfg.distractors[0], cfg.distractors[1] + 1))
    placed = 0
    tries = 0
    taken = np.zeros_like(fg)
    while placed < n_dis and tries < 1000 * max(n_dis, 1):
        tries += 1
        x0, y0, x1, y1 = _pod_rect(rng, cfg, W, H)
        # keep a one-pixel soil moat so a distractor never touches a plant
        if fg[max(y0 - 1, 0) : y1 + 1, max(x0 - 1, 0) : x1 + 1].any() or taken[y0:y1, x0:x1].any():
            continue
        taken[y0:y1, x0:x1] = True
        rects.append((x0, y0, x1, y1))
        spps.append(int(rng.integers(1, 5)))
        placed += 1

    dets = []
    for k, ((x0, y0, x1, y1), spp) in enumerate(zip(rects, spps)):
        _paint_pod(img, x0, y0, x1, y1, spp, rng)
    for k, ((x0, y0, x1, y1), spp) in enumerate(zip(rects, spps)):
        later = rects[k + 1 :]
        occluded = any(a0 < x1 and x0 < a1 and b0 < y1 and y0 < b1 for a0, b0, a1, b1 in later)
        dets.append(Detection(Box.from_xyxy(x0 / W, y0 / H, x1 / W, y1 / H), SppClass(spp), 1.0, occluded))
    rec = ImageRecord(image_id, f"{image_id}.png", W, H, domain, tuple(dets), tuple(regions))
    return rec, img


def distractor_count(rec: ImageRecord) -> int:
    """Pods whose pixel window lies entirely outside every plant region."""
    fg = np.zeros((rec.height, rec.width), dtype=bool)
    for reg in rec.regions:
        fg |= rasterize_rings([reg], rec.width, rec.height)
    n = 0
    for d in rec.detections:
        x0, y0, x1, y1 = d.box.pixel_window(rec.width, rec.height)
        n += not fg[y0:y1, x0:x1].any()
    return n
