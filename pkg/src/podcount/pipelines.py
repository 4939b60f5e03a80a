"""Counting pipelines over pluggable detector / segmenter / classifier backends.

* outdoor: count the detector's boxes directly.
* outdoor-sam: detect, segment the foreground from the top box centres,
  blank everything else, detect again and count the second pass.
* indoor: segment pod instances, classify each masked crop, sum.
"""
from __future__ import annotations

import hashlib
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np
from shapely.geometry import Point, Polygon

from .core import (
    CountResult,
    Detection,
    ImageRecord,
    SppClass,
    count_from_detections,
    mask_bbox,
    mask_iou,
    rasterize_rings,
)

TASKS = ("outdoor", "outdoor-sam", "indoor")


class BackendError(RuntimeError):
    """A backend raised while processing an image; the message names the image."""


@dataclass(frozen=True)
class Sample:
    """Pixels handed to a backend. ``origin`` is where ``pixels[0, 0]`` sits in the full image."""

    image_id: str
    pixels: np.ndarray  # (H, W, 3) uint8
    origin: tuple[int, int] = (0, 0)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


class DetectorBackend(Protocol):
    thread_safe: bool

    def detect(self, image: Sample) -> list[Detection]: ...


class SegmenterBackend(Protocol):
    thread_safe: bool

    def segment_from_points(self, image: Sample, points: Sequence[tuple[float, float]]) -> np.ndarray: ...

    def segment_instances(self, image: Sample) -> list[tuple[np.ndarray, float]]: ...


class ClassifierBackend(Protocol):
    thread_safe: bool

    def classify(self, crop: Sample, mask: np.ndarray) -> SppClass: ...


@dataclass(frozen=True)
class PipelineConfig:
    prompt_top_n: int = 10
    background_fill: tuple[int, int, int] = (0, 0, 0)
    crop_margin: int = 4

    def __post_init__(self):
        if self.prompt_top_n < 1:
            raise ValueError("prompt_top_n must be >= 1")
        if len(self.background_fill) != 3 or not all(0 <= c <= 255 for c in self.background_fill):
            raise ValueError(f"background_fill must be an RGB triple, got {self.background_fill}")
        if self.crop_margin < 0:
            raise ValueError("crop_margin must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        if "background_fill" in d:
            d["background_fill"] = tuple(d["background_fill"])
        return cls(**d)


@dataclass
class PipelineOutput:
    """Final count plus the instances it was computed from (for matching)."""

    count: CountResult
    detections: list[Detection] = field(default_factory=list)
    masks: list[tuple[np.ndarray, SppClass, float]] = field(default_factory=list)


def _guard(image_id: str, fn, *args):
    try:
        return fn(*args)
    except BackendError:
        raise
    except Exception as e:  # noqa: BLE001 - re-raised with context
        raise BackendError(f"{image_id}: {type(e).__name__}: {e}") from e


# --- pipelines --------------------------------------------------------------------

def run_outdoor(image: Sample, det: DetectorBackend) -> PipelineOutput:
    dets = list(_guard(image.image_id, det.detect, image))
    return PipelineOutput(count_from_detections(dets), dets)


def count_outdoor(image: Sample, det: DetectorBackend) -> CountResult:
    return run_outdoor(image, det).count


def prompt_points_from_detections(dets: Sequence[Detection], cfg: PipelineConfig = PipelineConfig()):
    """Normalized centres of the ``prompt_top_n`` most confident boxes.

    Equal confidences are ordered by ``(cx, cy)`` so the result does not
    depend on input order.
    """
    if not dets:
        raise ValueError("nothing to prompt")
    ranked = sorted(dets, key=lambda d: (-d.confidence, d.box.cx, d.box.cy))
    return [d.box.center for d in ranked[: cfg.prompt_top_n]]


def remove_background(image: Sample, mask: np.ndarray, fill: tuple[int, int, int]) -> Sample:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != image.pixels.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image {image.pixels.shape[:2]}")
    px = image.pixels.copy()
    px[~mask] = fill
    return Sample(image.image_id, px, image.origin)


def run_outdoor_sam(
    image: Sample, det: DetectorBackend, seg: SegmenterBackend, cfg: PipelineConfig = PipelineConfig()
) -> PipelineOutput:
    first = list(_guard(image.image_id, det.detect, image))
    if not first:
        return PipelineOutput(CountResult(0, 0))
    points = prompt_points_from_detections(first, cfg)
    mask = _guard(image.image_id, seg.segment_from_points, image, points)
    masked = _guard(image.image_id, remove_background, image, mask, cfg.background_fill)
    # step-one boxes only choose prompts; the count comes from the second pass
    final = list(_guard(image.image_id, det.detect, masked))
    return PipelineOutput(count_from_detections(final), final)


def count_outdoor_sam(
    image: Sample, det: DetectorBackend, seg: SegmenterBackend, cfg: PipelineConfig = PipelineConfig()
) -> CountResult:
    return run_outdoor_sam(image, det, seg, cfg).count


def masked_crop(image: Sample, mask: np.ndarray, margin: int) -> tuple[Sample, np.ndarray]:
    """Tight mask bounding box grown by ``margin`` px, with pixels outside the mask zeroed."""
    bb = mask_bbox(mask)
    if bb is None:
        raise ValueError("segmenter returned an empty instance mask")
    x0, y0, x1, y1 = bb
    x0, y0 = max(x0 - margin, 0), max(y0 - margin, 0)
    x1, y1 = min(x1 + margin, image.width), min(y1 + margin, image.height)
    m = mask[y0:y1, x0:x1]
    px = np.where(m[..., None], image.pixels[y0:y1, x0:x1], 0).astype(image.pixels.dtype)
    return Sample(image.image_id, px, (image.origin[0] + x0, image.origin[1] + y0)), m


def run_indoor(
    image: Sample, seg: SegmenterBackend, cls: ClassifierBackend, cfg: PipelineConfig = PipelineConfig()
) -> PipelineOutput:
    instances = list(_guard(image.image_id, seg.segment_instances, image))
    out = []
    for mask, conf in instances:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != image.pixels.shape[:2]:
            raise BackendError(f"{image.image_id}: instance mask shape {mask.shape} != image {image.pixels.shape[:2]}")
        crop, m = _guard(image.image_id, masked_crop, image, mask, cfg.crop_margin)
        spp = SppClass.parse(_guard(image.image_id, cls.classify, crop, m))
        out.append((mask, spp, float(conf)))
    count = CountResult(len(out), sum(int(s) for _, s, _ in out))
    return PipelineOutput(count, masks=out)


def count_indoor(
    image: Sample, seg: SegmenterBackend, cls: ClassifierBackend, cfg: PipelineConfig = PipelineConfig()
) -> CountResult:
    return run_indoor(image, seg, cls, cfg).count


# --- bundled backends ---------------------------------------------------------------

def _lookup(records: Mapping[str, ImageRecord], image_id: str) -> ImageRecord:
    try:
        return records[image_id]
    except KeyError:
        raise KeyError(f"no ground truth for image {image_id!r}") from None


class OracleDetector:
    """Ground-truth boxes, minus any whose pixels were all blanked to ``fill``."""

    thread_safe = True

    def __init__(self, records: Mapping[str, ImageRecord], fill: tuple[int, int, int] = (0, 0, 0)):
        self.records = records
        self.fill = np.asarray(fill, dtype=np.uint8)

    def _visible(self, image: Sample, d: Detection) -> bool:
        x0, y0, x1, y1 = d.box.pixel_window(image.width, image.height)
        win = image.pixels[y0:y1, x0:x1]
        return bool((win != self.fill).any())

    def ground_truth(self, image: Sample) -> list[Detection]:
        return list(_lookup(self.records, image.image_id).detections)

    def detect(self, image: Sample) -> list[Detection]:
        return [d for d in self.ground_truth(image) if self._visible(image, d)]


def _image_stream(seed: int, image_id: str) -> np.random.Generator:
    digest = hashlib.sha256(image_id.encode()).digest()
    return np.random.default_rng([int(seed), int.from_bytes(digest[:8], "little")])


class DropoutOracle(OracleDetector):
    """Oracle that misses each box independently with probability ``p``.

    The misses for an image depend only on ``(seed, image_id)``, so repeated
    calls agree and results do not depend on processing order.
    """

    def __init__(self, records, p: float = 0.1, seed: int = 0, fill=(0, 0, 0)):
        super().__init__(records, fill)
        if not (0.0 <= p <= 1.0):
            raise ValueError(f"dropout p {p} outside [0, 1]")
        self.p, self.seed = float(p), int(seed)

    def ground_truth(self, image: Sample) -> list[Detection]:
        gt = super().ground_truth(image)
        keep = _image_stream(self.seed, image.image_id).random(len(gt)) >= self.p
        return [d for d, k in zip(gt, keep) if k]


class ToyDetectorBackend:
    """Wraps a trained toy detector (or a checkpoint path)."""

    thread_safe = False

    def __init__(self, checkpoint=None, detector=None):
        if detector is None:
            from .io import load_checkpoint

            detector = load_checkpoint(checkpoint).detector
        self.detector = detector.eval()

    def detect(self, image: Sample) -> list[Detection]:
        from .toy import to_tensor

        if image.width % 8 or image.height % 8:
            raise ValueError(f"toy detector needs sides divisible by 8, got {image.width}x{image.height}")
        return self.detector.predict(to_tensor([image.pixels]))[0]


class FullMaskSegmenter:
    """Everything is foreground; turns background removal into a no-op."""

    thread_safe = True

    def segment_from_points(self, image: Sample, points) -> np.ndarray:
        return np.ones(image.pixels.shape[:2], dtype=bool)

    def segment_instances(self, image: Sample) -> list[tuple[np.ndarray, float]]:
        return [(np.ones(image.pixels.shape[:2], dtype=bool), 1.0)]


class OracleSegmenter:
    """Foreground = union of ground-truth regions containing a prompt; instances = GT polygons."""

    thread_safe = True

    def __init__(self, records: Mapping[str, ImageRecord]):
        self.records = records

    def segment_from_points(self, image: Sample, points) -> np.ndarray:
        rec = _lookup(self.records, image.image_id)
        mask = np.zeros(image.pixels.shape[:2], dtype=bool)
        pts = [Point(cx * image.width, cy * image.height) for cx, cy in points]
        for reg in rec.regions:
            poly = Polygon(reg)
            if any(poly.covers(p) for p in pts):
                mask |= rasterize_rings([reg], image.width, image.height)
        return mask

    def segment_instances(self, image: Sample) -> list[tuple[np.ndarray, float]]:
        rec = _lookup(self.records, image.image_id)
        return [(rasterize_rings([a.polygon], image.width, image.height), 1.0) for a in rec.instances]


class OracleClassifier:
    """spp of the ground-truth instance that best overlaps the crop's mask."""

    thread_safe = True

    def __init__(self, records: Mapping[str, ImageRecord]):
        self.records = records

    def classify(self, crop: Sample, mask: np.ndarray) -> SppClass:
        rec = _lookup(self.records, crop.image_id)
        h, w = mask.shape
        best, best_iou = None, 0.0
        for a in rec.instances:
            iou = mask_iou(rasterize_rings([a.polygon], w, h, origin=crop.origin), mask)
            if iou > best_iou:
                best, best_iou = a.spp, iou
        if best is None:
            raise ValueError(f"mask at {crop.origin} overlaps no ground-truth instance")
        return best


class ConstantClassifier:
    thread_safe = True

    def __init__(self, k: int = 2):
        self.k = SppClass.parse(int(k))

    def classify(self, crop: Sample, mask: np.ndarray) -> SppClass:
        return self.k


# --- registry -----------------------------------------------------------------------

@dataclass(frozen=True)
class BackendSpec:
    name: str
    params: dict = field(default_factory=dict)

    def __str__(self) -> str:
        if not self.params:
            return self.name
        inner = ",".join(f"{k}={v}" for k, v in sorted(self.params.items()))
        return f"{self.name}({inner})"

    def to_dict(self) -> dict:
        return {"name": self.name, "params": dict(self.params)}


@dataclass(frozen=True)
class _Entry:
    role: str  # detector | segmenter | classifier
    factory: Callable
    params: tuple[str, ...]  # accepted parameter names; the first takes a positional value
    needs_truth: bool = False


REGISTRY: dict[str, _Entry] = {
    "oracle": _Entry("detector", lambda recs, **kw: OracleDetector(recs, **kw), ("fill",), True),
    "dropout-oracle": _Entry("detector", lambda recs, **kw: DropoutOracle(recs, **kw), ("p", "seed", "fill"), True),
    "toy-detector": _Entry("detector", lambda recs, **kw: ToyDetectorBackend(**kw), ("checkpoint",)),
    "fullmask-segmenter": _Entry("segmenter", lambda recs, **kw: FullMaskSegmenter(), ()),
    "oracle-segmenter": _Entry("segmenter", lambda recs, **kw: OracleSegmenter(recs), (), True),
    "oracle-classifier": _Entry("classifier", lambda recs, **kw: OracleClassifier(recs), (), True),
    "constant-classifier": _Entry("classifier", lambda recs, **kw: ConstantClassifier(**kw), ("k",)),
}

_SPEC = re.compile(r"^\s*([a-z][a-z0-9-]*)\s*(?:\((.*)\))?\s*$")


def _literal(v: str):
    v = v.strip()
    for conv in (int, float):
        try:
            return conv(v)
        except ValueError:
            pass
    return v.strip("'\"")


def parse_backend(spec) -> BackendSpec:
    """Accepts ``BackendSpec``, ``{"name", "params"}``, or text like ``dropout-oracle(p=0.1)``."""
    if isinstance(spec, BackendSpec):
        out = spec
    elif isinstance(spec, Mapping):
        out = BackendSpec(spec["name"], dict(spec.get("params") or {}))
    else:
        m = _SPEC.match(str(spec))
        if not m:
            raise ValueError(f"cannot parse backend spec {spec!r}")
        name, inner = m.group(1), m.group(2)
        params = {}
        if name not in REGISTRY:
            raise ValueError(f"unknown backend {name!r}; known: {', '.join(sorted(REGISTRY))}")
        if inner and inner.strip():
            for k, part in enumerate(inner.split(",")):
                if "=" in part:
                    key, val = part.split("=", 1)
                    params[key.strip()] = _literal(val)
                elif k == 0 and REGISTRY[name].params:
                    params[REGISTRY[name].params[0]] = _literal(part)
                else:
                    raise ValueError(f"{spec!r}: positional argument only allowed first")
        out = BackendSpec(name, params)
    entry = REGISTRY.get(out.name)
    if entry is None:
        raise ValueError(f"unknown backend {out.name!r}; known: {', '.join(sorted(REGISTRY))}")
    extra = set(out.params) - set(entry.params)
    if extra:
        raise ValueError(f"backend {out.name!r} takes no parameter(s) {sorted(extra)}")
    return out


def backend_role(spec) -> str:
    return REGISTRY[parse_backend(spec).name].role


def make_backend(spec, records: Mapping[str, ImageRecord] | None = None, role: str | None = None):
    spec = parse_backend(spec)
    entry = REGISTRY[spec.name]
    if role is not None and entry.role != role:
        raise ValueError(f"backend {spec.name!r} is a {entry.role}, not a {role}")
    if entry.needs_truth and records is None:
        raise ValueError(f"backend {spec.name!r} needs ground-truth records")
    params = dict(spec.params)
    if "fill" in params and isinstance(params["fill"], str):
        params["fill"] = tuple(int(c) for c in params["fill"].split())
    return entry.factory(records, **params)


@dataclass(frozen=True)
class PipelineBackends:
    detector: BackendSpec | None = None
    segmenter: BackendSpec | None = None
    classifier: BackendSpec | None = None

    def required(self, task: str) -> tuple[str, ...]:
        return {"outdoor": ("detector",), "outdoor-sam": ("detector", "segmenter"), "indoor": ("segmenter", "classifier")}[task]


def run_pipeline(
    task: str,
    samples: Sequence[Sample],
    backends: PipelineBackends,
    records: Mapping[str, ImageRecord] | None = None,
    cfg: PipelineConfig = PipelineConfig(),
    workers: int = 1,
) -> list[tuple[str, PipelineOutput]]:
    """Run ``task`` over ``samples``; results come back in input order.

    With ``workers > 1`` each worker thread builds its own backend instances.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    for role in backends.required(task):
        if getattr(backends, role) is None:
            raise ValueError(f"task {task!r} needs a {role} backend")
    local = threading.local()

    def build():
        if not hasattr(local, "b"):
            local.b = {
                r: make_backend(getattr(backends, r), records, role=r) for r in backends.required(task)
            }
        return local.b

    def one(s: Sample) -> tuple[str, PipelineOutput]:
        b = build()
        if task == "outdoor":
            return s.image_id, run_outdoor(s, b["detector"])
        if task == "outdoor-sam":
            return s.image_id, run_outdoor_sam(s, b["detector"], b["segmenter"], cfg)
        return s.image_id, run_indoor(s, b["segmenter"], b["classifier"], cfg)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(one, samples))
    return [one(s) for s in samples]


def load_sample(record: ImageRecord, root: Path | str | None = None) -> Sample:
    from .composer import load_rgb

    path = Path(record.path)
    if root is not None and not path.is_absolute():
        path = Path(root) / path
    return Sample(record.image_id, load_rgb(path))
