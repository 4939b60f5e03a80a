"""Adversarial domain adaptation for the detector.

A gradient reversal layer sits between the tapped backbone features (after
ROI cropping) and a small domain discriminator. One backward pass of
``detection loss + hinge discriminator loss`` then trains the discriminator to
separate domains while pushing the backbone towards domain-invariant features.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.optim.swa_utils import AveragedModel, get_ema_multi_avg_fn

from .core import Box, Detection, Domain
from .toy import (
    FeaturePyramid,
    ToyDetector,
    ToyImage,
    ToyTaskConfig,
    encode_targets,
    make_toy_batch,
    to_tensor,
    toy_detector_build,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GrlConfig:
    alpha: float = 1.0

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")


@dataclass(frozen=True)
class RoiConfig:
    output_size: int = 7
    top_k: int = 8

    def __post_init__(self):
        if self.output_size < 1 or self.top_k < 1:
            raise ValueError("output_size and top_k must be >= 1")


@dataclass(frozen=True)
class LossBreakdown:
    det_loss: float
    dis_loss: float
    total: float


@dataclass
class DiscriminatorScores:
    source_scores: torch.Tensor | Sequence[float]
    target_scores: torch.Tensor | Sequence[float]


# --- gradient reversal ------------------------------------------------------

def grl_forward(x: torch.Tensor) -> torch.Tensor:
    return x


def grl_backward(upstream_grad: torch.Tensor, cfg: GrlConfig) -> torch.Tensor:
    return -cfg.alpha * upstream_grad


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, alpha):
        ctx.cfg = GrlConfig(alpha)
        return grl_forward(x).view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grl_backward(grad_output, ctx.cfg), None


def grad_reverse(x: torch.Tensor, cfg: GrlConfig) -> torch.Tensor:
    return _GradReverse.apply(x, cfg.alpha)


class GradientReversal(nn.Module):
    def __init__(self, alpha: float = 1.0):
        super().__init__()
        self.cfg = GrlConfig(alpha)

    def forward(self, x):
        return grad_reverse(x, self.cfg)


# --- ROI module ---------------------------------------------------------------

def _axis_weights(lo: torch.Tensor, hi: torch.Tensor, s: int, size: int) -> torch.Tensor:
    """Bilinear weights along one axis, averaged over ``s`` cell-centre samples.

    Matches ``grid_sample(align_corners=False, padding_mode="border")``:
    sample coordinates are clamped to the outermost pixel centres.
    Returns ``(M, size)``.
    """
    u = lo[:, None] + (torch.arange(s, dtype=lo.dtype) + 0.5) / s * (hi - lo)[:, None]
    pos = (u * size - 0.5).clamp(0, size - 1)
    i0 = pos.floor().long().clamp(max=size - 1)
    i1 = (i0 + 1).clamp(max=size - 1)
    frac = pos - i0
    w = lo.new_zeros(lo.shape[0], s, size)
    w.scatter_add_(-1, i0[..., None], (1 - frac)[..., None])
    w.scatter_add_(-1, i1[..., None], frac[..., None])
    return w.mean(1)


def roi_fuse(
    levels: Sequence[torch.Tensor],
    boxes: torch.Tensor,
    batch_index: torch.Tensor,
    output_size: int,
) -> torch.Tensor:
    """Crop-resize-pool each box from every ``(N, C, H, W)`` level and concatenate.

    ``boxes`` are normalized xyxy, shape ``(M, 4)``. Sampling points sit at the
    cell centres of an ``output_size`` grid over the box, read bilinearly with
    border clamping, then averaged. Bilinear reads are separable, so the
    average is a row-weight vector times a column-weight vector and the whole
    op is one contraction per level. Returns ``(M, sum(C))``.
    """
    if boxes.shape[0] == 0:
        raise ValueError("no ROIs for discriminator")
    if not torch.isfinite(boxes).all():
        raise FloatingPointError("non-finite ROI boxes; training has diverged")
    x0, y0, x1, y1 = boxes.detach().unbind(-1)
    m = boxes.shape[0]
    fused = []
    for level in levels:
        n, c, h, w = level.shape
        wy = _axis_weights(y0, y1, output_size, h).to(level.dtype)
        wx = _axis_weights(x0, x1, output_size, w).to(level.dtype)
        # (M, N*H*W) pooling matrix, nonzero only in each ROI's own image block
        pool = level.new_zeros(m, n, h * w)
        pool[torch.arange(m), batch_index] = (wy[:, :, None] * wx[:, None, :]).reshape(m, h * w)
        fused.append(pool.reshape(m, -1) @ level.permute(0, 2, 3, 1).reshape(-1, c))
    return torch.cat(fused, dim=1)


def roi_crop_resize(
    pyr: FeaturePyramid, boxes: Sequence[Box | Detection], cfg: RoiConfig = RoiConfig()
) -> torch.Tensor:
    """Fused ROI vectors for one image's pyramid (levels ``(C, H, W)``).

    Detections are ranked by confidence (stable); plain boxes keep their order.
    Only the first ``cfg.top_k`` are used.
    """
    if len(boxes) == 0:
        raise ValueError("no ROIs for discriminator")
    items = list(boxes)
    if all(isinstance(b, Detection) for b in items):
        items = sorted(items, key=lambda d: -d.confidence)
    items = items[: cfg.top_k]
    plain = [b.box if isinstance(b, Detection) else b for b in items]
    dtype = pyr.levels[0].dtype
    xyxy = torch.tensor([b.xyxy for b in plain], dtype=dtype)
    levels = [t.unsqueeze(0) if t.dim() == 3 else t for t in pyr.levels]
    return roi_fuse(levels, xyxy, torch.zeros(len(plain), dtype=torch.long), cfg.output_size)


# --- discriminator and losses ---------------------------------------------------

class Discriminator(nn.Module):
    """Two-layer perceptron mapping a fused ROI vector to a raw domain score.

    Inputs are standardized with the statistics of the batch being scored
    (source and target ROIs together), so the backbone cannot fool the
    discriminator by merely rescaling its features.
    """

    def __init__(self, in_features: int, hidden: int = 64):
        super().__init__()
        self.in_features = in_features
        self.hidden = hidden
        self.fc1 = nn.Linear(in_features, hidden)
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, x):
        if x.shape[0] > 1:
            x = (x - x.mean(0)) / (x.std(0) + 1e-5)
        return self.fc2(F.silu(self.fc1(x))).squeeze(-1)


def build_discriminator(in_features: int, seed: int, hidden: int = 64) -> Discriminator:
    gen = torch.Generator().manual_seed(int(seed))
    disc = Discriminator(in_features, hidden)
    fan_in = {"fc1": in_features, "fc2": hidden}
    with torch.no_grad():
        for name, p in disc.named_parameters():
            bound = 1.0 / np.sqrt(fan_in[name.split(".")[0]])
            p.copy_(torch.empty(p.shape).uniform_(-bound, bound, generator=gen))
    return disc


def hinge_discriminator_loss(scores: DiscriminatorScores):
    """Source scores are pushed above +1, target scores below -1.

    Returns a tensor when given tensors (so it can be backpropagated) and a
    float otherwise.
    """
    s, t = scores.source_scores, scores.target_scores
    as_float = not (torch.is_tensor(s) or torch.is_tensor(t))
    s = torch.as_tensor(s, dtype=torch.float64) if not torch.is_tensor(s) else s
    t = torch.as_tensor(t, dtype=torch.float64) if not torch.is_tensor(t) else t
    if s.numel() == 0 or t.numel() == 0:
        raise ValueError("hinge loss needs non-empty source and target scores")
    loss = F.relu(1 - s).mean() + F.relu(1 + t).mean()
    return float(loss) if as_float else loss


def total_loss(det: float, dis: float) -> LossBreakdown:
    if det < 0 or dis < 0:
        raise ValueError(f"losses must be non-negative, got det={det} dis={dis}")
    return LossBreakdown(det, dis, det + dis)


# --- training step ----------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 8
    lr: float = 0.03
    # two-timescale: the discriminator must keep up with the backbone
    disc_lr_mult: float = 20.0
    # applied per module, so alpha = 0 leaves detector updates untouched
    grad_clip: float | None = 5.0
    disc_hidden: int = 256
    width: int = 16
    # the adversarial game oscillates; the weight average is the model we keep
    ema_decay: float | None = 0.99


@dataclass
class DomainBatch:
    images: list[ToyImage]

    def __len__(self):
        return len(self.images)


def make_optimizer(
    detector: ToyDetector, discriminator: Discriminator | None, train: TrainConfig = TrainConfig()
) -> torch.optim.SGD:
    groups = [{"params": list(detector.parameters()), "lr": train.lr}]
    if discriminator is not None:
        groups.append({"params": list(discriminator.parameters()), "lr": train.lr * train.disc_lr_mult})
    return torch.optim.SGD(groups, lr=train.lr)


def discriminator_scores(
    discriminator: Discriminator,
    src_pyr: FeaturePyramid,
    src_rois: tuple[torch.Tensor, torch.Tensor],
    tgt_pyr: FeaturePyramid,
    tgt_rois: tuple[torch.Tensor, torch.Tensor],
    grl: GrlConfig,
    roi: RoiConfig,
) -> DiscriminatorScores:
    f_s = roi_fuse(src_pyr.levels, *src_rois, roi.output_size)
    f_t = roi_fuse(tgt_pyr.levels, *tgt_rois, roi.output_size)
    scores = discriminator(grad_reverse(torch.cat([f_s, f_t]), grl))
    return DiscriminatorScores(scores[: len(f_s)], scores[len(f_s) :])


def _as_input(detector: ToyDetector, batch: DomainBatch) -> torch.Tensor:
    return to_tensor(batch.images).to(next(detector.parameters()).dtype)


def da_train_step(
    source_batch: DomainBatch,
    target_batch: DomainBatch | None,
    detector: ToyDetector,
    discriminator: Discriminator | None,
    cfg: GrlConfig,
    roi: RoiConfig,
    optimizer: torch.optim.Optimizer,
    grad_clip: float | None = None,
) -> LossBreakdown:
    """One simultaneous update of detector and discriminator.

    Only the source batch is supervised. ROIs for both domains are the
    detector's current ``top_k`` cells by objectness. With an empty or missing
    target batch this is a plain detection step. Parameters absent from
    ``optimizer`` are left untouched (e.g. a frozen detector).
    """
    if len(source_batch) == 0:
        raise ValueError("source batch is empty")
    x_s = _as_input(detector, source_batch)
    grid = x_s.shape[-1] // 8
    targets = encode_targets([im.detections for im in source_batch.images], grid)

    out_s, pyr_s = detector(x_s)
    det = detector.detection_loss(out_s, targets)
    if target_batch is None or len(target_batch) == 0 or discriminator is None:
        if discriminator is not None:
            warnings.warn("empty target batch; running a detection-only step", RuntimeWarning)
        dis = det.new_zeros(())
    else:
        out_t, pyr_t = detector(_as_input(detector, target_batch))
        scores = discriminator_scores(
            discriminator,
            pyr_s,
            detector.top_k_boxes(out_s, roi.top_k),
            pyr_t,
            detector.top_k_boxes(out_t, roi.top_k),
            cfg,
            roi,
        )
        dis = hinge_discriminator_loss(scores)

    total = det + dis
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    if grad_clip:
        nn.utils.clip_grad_norm_(list(detector.parameters()), grad_clip)
        if discriminator is not None:
            nn.utils.clip_grad_norm_(list(discriminator.parameters()), grad_clip)
    optimizer.step()
    if not torch.isfinite(total):
        raise FloatingPointError(f"non-finite loss det={float(det)} dis={float(dis)}")
    return total_loss(float(det.detach()), float(dis.detach()))


class DATrainer:
    """Desk-scale training run on the toy two-domain task.

    Source and target batches are drawn every step whether or not adaptation
    is on, so DA and detection-only runs with the same seed see identical
    source data.
    """

    def __init__(
        self,
        seed: int,
        use_da: bool = True,
        grl: GrlConfig = GrlConfig(),
        roi: RoiConfig = RoiConfig(),
        train: TrainConfig = TrainConfig(),
        task: ToyTaskConfig = ToyTaskConfig(),
    ):
        self.seed = seed
        self.use_da = use_da
        self.grl, self.roi, self.train_cfg, self.task = grl, roi, train, task
        self.rng = np.random.default_rng(seed)
        self.detector = toy_detector_build(seed, train.width)
        self.discriminator = (
            build_discriminator(self.detector.fused_channels, seed + 1, train.disc_hidden) if use_da else None
        )
        self.optimizer = make_optimizer(self.detector, self.discriminator, train)
        self.averaged = (
            AveragedModel(self.detector, multi_avg_fn=get_ema_multi_avg_fn(train.ema_decay))
            if train.ema_decay
            else None
        )
        self.history: list[LossBreakdown] = []

    @property
    def model(self) -> ToyDetector:
        """The detector to evaluate: the weight average when enabled."""
        return self.averaged.module if self.averaged is not None else self.detector

    def step(self) -> LossBreakdown:
        n = self.train_cfg.batch_size
        src = DomainBatch(make_toy_batch(self.rng, n, self.task, Domain.SOURCE))
        tgt = DomainBatch(make_toy_batch(self.rng, n, self.task, Domain.TARGET))
        lb = da_train_step(
            src,
            tgt if self.use_da else None,
            self.detector,
            self.discriminator,
            self.grl,
            self.roi,
            self.optimizer,
            self.train_cfg.grad_clip,
        )
        if self.averaged is not None:
            self.averaged.update_parameters(self.detector)
        self.history.append(lb)
        return lb

    def train(self, steps: int | None = None) -> list[LossBreakdown]:
        steps = self.train_cfg.steps if steps is None else steps
        for i in range(steps):
            lb = self.step()
            if (i + 1) % 100 == 0:
                log.info("step %d det %.4f dis %.4f", i + 1, lb.det_loss, lb.dis_loss)
        return self.history


# --- probe ------------------------------------------------------------------------

@torch.no_grad()
def roi_features_at_truth(detector: ToyDetector, images: list[ToyImage], roi: RoiConfig) -> torch.Tensor:
    """Frozen fused ROI vectors at ground-truth boxes, one row per pod."""
    x = to_tensor(images).to(next(detector.parameters()).dtype)
    _, pyr = detector(x)
    boxes, index = [], []
    for i, im in enumerate(images):
        for d in im.detections:
            boxes.append(d.box.xyxy)
            index.append(i)
    return roi_fuse(pyr.levels, torch.tensor(boxes, dtype=x.dtype), torch.tensor(index), roi.output_size)


def probe_domain_accuracy(
    train_src: torch.Tensor,
    train_tgt: torch.Tensor,
    test_src: torch.Tensor,
    test_tgt: torch.Tensor,
    seed: int = 0,
    steps: int = 400,
    lr: float = 1e-2,
    hidden: int = 64,
) -> float:
    """Held-out accuracy of a freshly trained discriminator on frozen features.

    Full-batch Adam on the hinge loss; a score above zero means "source".
    """
    probe = build_discriminator(train_src.shape[1], seed, hidden)
    # fixed standardization from the probe's training split
    pool = torch.cat([train_src, train_tgt])
    mu, sd = pool.mean(0), pool.std(0).clamp_min(1e-6)
    head = lambda f: probe.fc2(F.silu(probe.fc1((f - mu) / sd))).squeeze(-1)  # noqa: E731
    opt = torch.optim.Adam(probe.parameters(), lr=lr)
    for _ in range(steps):
        loss = hinge_discriminator_loss(DiscriminatorScores(head(train_src), head(train_tgt)))
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        correct = int((head(test_src) > 0).sum()) + int((head(test_tgt) <= 0).sum())
    return correct / (len(test_src) + len(test_tgt))


PROBE_STREAM = 0x9E0B


def probe_after_training(
    detector: ToyDetector,
    seed: int,
    roi: RoiConfig = RoiConfig(),
    task: ToyTaskConfig = ToyTaskConfig(),
    n_images: int = 100,
) -> float:
    """Domain-probe accuracy on fresh held-out toy images of both domains."""
    rng = np.random.default_rng([seed, PROBE_STREAM])
    feats = {}
    for split in ("train", "test"):
        for dom in (Domain.SOURCE, Domain.TARGET):
            feats[split, dom] = roi_features_at_truth(detector, make_toy_batch(rng, n_images, task, dom), roi)
    return probe_domain_accuracy(
        feats["train", Domain.SOURCE],
        feats["train", Domain.TARGET],
        feats["test", Domain.SOURCE],
        feats["test", Domain.TARGET],
        seed=seed,
    )
