"""Desk-scale two-domain detection task and a small trainable grid detector.

Images are split into ``grid x grid`` cells of ``cell`` pixels. An occupied
cell holds one pod: a bar whose length grows with its seed count and whose
seeds are drawn as brighter pixels. The target domain is the source domain
under a global per-channel colour offset (a lighting / camera change), so the
two share pod geometry and differ only in appearance.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import Box, Detection, Domain, SppClass


@dataclass(frozen=True)
class ToyDomainStyle:
    offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    background: tuple[float, float, float] = (0.15, 0.15, 0.15)
    pod: tuple[float, float, float] = (0.65, 0.55, 0.30)
    seed: float = 0.75
    noise: float = 0.03


SOURCE_STYLE = ToyDomainStyle()
TARGET_STYLE = ToyDomainStyle(offset=(0.12, 0.18, 0.04))


@dataclass(frozen=True)
class ToyTaskConfig:
    grid: int = 4
    cell: int = 8
    occupancy: float = 0.5
    source: ToyDomainStyle = SOURCE_STYLE
    target: ToyDomainStyle = TARGET_STYLE

    @property
    def size(self) -> int:
        return self.grid * self.cell


@dataclass
class ToyImage:
    pixels: np.ndarray  # (H, W, 3) float32 in [0, 1]
    detections: list[Detection]
    domain: Domain = Domain.SOURCE

    def as_uint8(self) -> np.ndarray:
        return np.round(self.pixels * 255).astype(np.uint8)


def make_toy_image(
    rng: np.random.Generator,
    cfg: ToyTaskConfig = ToyTaskConfig(),
    domain: Domain = Domain.SOURCE,
    n_pods: int | None = None,
) -> ToyImage:
    """Render one toy image. ``n_pods`` fixes the pod count instead of Bernoulli occupancy."""
    style = cfg.source if Domain(domain) is Domain.SOURCE else cfg.target
    g, c = cfg.grid, cfg.cell
    size = cfg.size
    img = np.empty((size, size, 3), dtype=np.float32)
    img[:] = style.background
    img += rng.normal(0.0, style.noise, size=img.shape).astype(np.float32)

    if n_pods is None:
        cells = np.flatnonzero(rng.random(g * g) < cfg.occupancy)
    else:
        cells = np.sort(rng.choice(g * g, size=n_pods, replace=False))
    dets = []
    for cell_idx in cells:
        gy, gx = divmod(int(cell_idx), g)
        spp = int(rng.integers(1, 5))
        length, thick = min(spp + 3, c - 1), min(3, c - 1)
        ox = gx * c + int(rng.integers(0, c - length + 1))
        oy = gy * c + int(rng.integers(0, c - thick + 1))
        img[oy : oy + thick, ox : ox + length] = style.pod
        # seeds: bright pixels along the middle row
        mid = oy + thick // 2
        img[mid, ox + 1 : ox + 1 + spp] = style.seed
        img[oy : oy + thick, ox : ox + length] += rng.normal(
            0.0, style.noise, size=(thick, length, 3)
        ).astype(np.float32)
        box = Box.from_xyxy(ox / size, oy / size, (ox + length) / size, (oy + thick) / size)
        dets.append(Detection(box, SppClass(spp), 1.0))
    img += np.asarray(style.offset, dtype=np.float32)
    np.clip(img, 0.0, 1.0, out=img)
    return ToyImage(img, dets, Domain(domain))


def make_toy_batch(
    rng: np.random.Generator, n: int, cfg: ToyTaskConfig = ToyTaskConfig(), domain=Domain.SOURCE
) -> list[ToyImage]:
    return [make_toy_image(rng, cfg, domain) for _ in range(n)]


def to_tensor(images) -> torch.Tensor:
    """Stack ``(H, W, 3)`` arrays (float in [0,1] or uint8) into ``(N, 3, H, W)`` float32."""
    arrs = []
    for im in images:
        px = im.pixels if isinstance(im, ToyImage) else np.asarray(im)
        if px.dtype == np.uint8:
            px = px.astype(np.float32) / 255.0
        arrs.append(np.ascontiguousarray(px.transpose(2, 0, 1), dtype=np.float32))
    return torch.from_numpy(np.stack(arrs))


@dataclass
class GridTargets:
    objectness: torch.Tensor  # (N, G, G) float 0/1
    classes: torch.Tensor  # (N, G, G) long, spp - 1 (ignored where empty)
    boxes: torch.Tensor  # (N, G, G, 4) cell-relative cx, cy and normalized w, h


def encode_targets(batch: list[list[Detection]], grid: int) -> GridTargets:
    n = len(batch)
    obj = np.zeros((n, grid, grid), np.float32)
    cls = np.zeros((n, grid, grid), np.int64)
    box = np.zeros((n, grid, grid, 4), np.float32)
    for i, dets in enumerate(batch):
        for d in dets:
            gx = min(int(d.box.cx * grid), grid - 1)
            gy = min(int(d.box.cy * grid), grid - 1)
            obj[i, gy, gx] = 1.0
            cls[i, gy, gx] = int(d.spp) - 1
            box[i, gy, gx] = (d.box.cx * grid - gx, d.box.cy * grid - gy, d.box.w, d.box.h)
    obj, cls, box = torch.from_numpy(obj), torch.from_numpy(cls), torch.from_numpy(box)
    return GridTargets(obj, cls, box)


@dataclass
class FeaturePyramid:
    """Three tapped feature levels with strictly decreasing spatial size.

    Levels are ``(C, H, W)`` for a single image or ``(N, C, H, W)`` for a batch.
    """

    levels: list[torch.Tensor]
    taps: tuple[int, ...] = (1, 2, 3)

    def __post_init__(self):
        if len(self.levels) != 3:
            raise ValueError(f"feature pyramid needs exactly 3 levels, got {len(self.levels)}")
        sizes = [tuple(t.shape[-2:]) for t in self.levels]
        for a, b in zip(sizes, sizes[1:]):
            if not (b[0] < a[0] and b[1] < a[1]):
                raise ValueError(f"pyramid spatial sizes must strictly decrease, got {sizes}")

    def image(self, i: int) -> "FeaturePyramid":
        return FeaturePyramid([t[i] for t in self.levels], self.taps)


class ToyDetector(nn.Module):
    """Stride-8 grid detector with three tapped backbone stages.

    The backbone is the feature extractor that domain adaptation acts on; the
    1x1 head predicts objectness, four spp logits and a box per cell.
    """

    HEAD_CHANNELS = 1 + 4 + 4

    def __init__(self, width: int = 16, score_threshold: float = 0.5):
        super().__init__()
        self.width = width
        self.score_threshold = score_threshold
        self.stem = nn.Conv2d(3, width, 3, padding=1, padding_mode="replicate")
        self.stage1 = nn.Conv2d(width, width, 3, stride=2, padding=1, padding_mode="replicate")
        self.stage2 = nn.Conv2d(width, 2 * width, 3, stride=2, padding=1, padding_mode="replicate")
        self.stage3 = nn.Conv2d(2 * width, 2 * width, 3, stride=2, padding=1, padding_mode="replicate")
        self.neck = nn.Conv2d(2 * width, 2 * width, 1)
        self.head = nn.Conv2d(2 * width, self.HEAD_CHANNELS, 1)

    @property
    def fused_channels(self) -> int:
        """Length of a fused ROI vector (channels summed over the three taps)."""
        return self.width + 2 * self.width + 2 * self.width

    @property
    def feature_extractor(self) -> list[nn.Module]:
        return [self.stem, self.stage1, self.stage2, self.stage3]

    def feature_parameters(self):
        for m in self.feature_extractor:
            yield from m.parameters()

    def head_parameters(self):
        yield from self.neck.parameters()
        yield from self.head.parameters()

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, FeaturePyramid]:
        h = F.silu(self.stem(x))
        p1 = F.silu(self.stage1(h))
        p2 = F.silu(self.stage2(p1))
        p3 = F.silu(self.stage3(p2))
        out = self.head(F.silu(self.neck(p3)))
        return out, FeaturePyramid([p1, p2, p3], taps=(1, 2, 3))

    def detection_loss(self, out: torch.Tensor, targets: GridTargets) -> torch.Tensor:
        obj_logit = out[:, 0]
        cls_logit = out[:, 1:5]
        box_raw = out[:, 5:9]
        loss = F.binary_cross_entropy_with_logits(obj_logit, targets.objectness)
        pos = targets.objectness > 0.5
        if pos.any():
            cls_flat = cls_logit.permute(0, 2, 3, 1)[pos]
            loss = loss + F.cross_entropy(cls_flat, targets.classes[pos])
            pred_box = torch.sigmoid(box_raw.permute(0, 2, 3, 1)[pos])
            loss = loss + 4.0 * F.l1_loss(pred_box, targets.boxes[pos])
        return loss

    @staticmethod
    def decode_boxes(out: torch.Tensor) -> torch.Tensor:
        """``(N, G, G, 4)`` normalized xyxy boxes for every cell."""
        grid = out.shape[-1]
        raw = torch.sigmoid(out[:, 5:9]).permute(0, 2, 3, 1)
        gy, gx = torch.meshgrid(torch.arange(grid), torch.arange(grid), indexing="ij")
        cx = (gx + raw[..., 0]) / grid
        cy = (gy + raw[..., 1]) / grid
        w = raw[..., 2].clamp_min(1e-3)
        h = raw[..., 3].clamp_min(1e-3)
        return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1).clamp(0.0, 1.0)

    def top_k_boxes(self, out: torch.Tensor, k: int) -> tuple[torch.Tensor, torch.Tensor]:
        """Highest-objectness ``k`` cell boxes per image, no threshold.

        Returns ``(boxes (N*k, 4) xyxy, batch_index (N*k,))``.
        """
        n, grid = out.shape[0], out.shape[-1]
        k = min(k, grid * grid)
        conf = out[:, 0].detach().reshape(n, -1)
        boxes = self.decode_boxes(out.detach()).reshape(n, -1, 4)
        # stable descending order so equal scores keep cell order
        order = torch.sort(conf, dim=1, descending=True, stable=True).indices[:, :k]
        picked = torch.gather(boxes, 1, order[..., None].expand(-1, -1, 4))
        return picked.reshape(-1, 4), torch.arange(n).repeat_interleave(k)

    @torch.no_grad()
    def predict(self, x: torch.Tensor) -> list[list[Detection]]:
        out, _ = self(x)
        conf = torch.sigmoid(out[:, 0])
        cls = out[:, 1:5].argmax(dim=1) + 1
        boxes = self.decode_boxes(out)
        results = []
        for i in range(out.shape[0]):
            dets = []
            for gy, gx in zip(*torch.nonzero(conf[i] > self.score_threshold, as_tuple=True)):
                x0, y0, x1, y1 = boxes[i, gy, gx].tolist()
                if x1 <= x0 or y1 <= y0:
                    continue
                dets.append(
                    Detection(Box.from_xyxy(x0, y0, x1, y1), SppClass(int(cls[i, gy, gx])), float(conf[i, gy, gx]))
                )
            dets.sort(key=lambda d: (-d.confidence, d.box.cx, d.box.cy))
            results.append(dets)
        return results


def toy_detector_build(seed: int, width: int = 16) -> ToyDetector:
    """Fresh toy detector whose initial parameters depend only on ``seed``.

    He-uniform weights and zero biases; the default 1/sqrt(fan_in) scale
    leaves this five-layer SiLU stack too quiet for plain SGD to get going.
    """
    gen = torch.Generator().manual_seed(int(seed))
    model = ToyDetector(width=width)
    with torch.no_grad():
        for p in model.parameters():
            if p.dim() > 1:
                bound = float(np.sqrt(6.0 / p[0].numel()))
                p.copy_(torch.empty(p.shape).uniform_(-bound, bound, generator=gen))
            else:
                p.zero_()
    return model
