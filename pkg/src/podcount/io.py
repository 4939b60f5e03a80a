"""Annotation files, dataset ingestion, run configuration and checkpoints.

Field files hold normalized boxes, instance files hold pixel polygons:

    {"image": "a.png", "width": 640, "height": 480,
     "boxes": [{"cx": .5, "cy": .5, "w": .1, "h": .2, "spp": 3, "occluded": false}],
     "regions": [[[x, y], ...]]}

    {"image": "b.png", "width": 1024, "height": 1024,
     "instances": [{"polygon": [[x, y], ...], "spp": 2}]}

An optional ``domains.json`` next to the annotations lists target-domain ids:
``{"target": ["img_001", ...]}``. Every target id must also be a source image.
"""
from __future__ import annotations

import base64
import dataclasses
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .adaptation import Discriminator, GrlConfig, RoiConfig, TrainConfig
from .composer import ComposerConfig
from .core import Box, Detection, Domain, ImageRecord, InstanceAnnotation, SppClass
from .evaluation import MAPE_MODES
from .fields import FieldSceneConfig
from .pipelines import TASKS, PipelineConfig, parse_backend
from .toy import ToyDetector

log = logging.getLogger(__name__)

KINDS = ("field", "instance")
SKIP_JSON = {"manifest.json", "domains.json", "counts.json", "report.json", "checkpoint.json", "train_log.json"}


class DatasetValidationError(ValueError):
    """Every problem found while ingesting, one line each."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        head = "\n".join(self.errors[:50])
        more = f"\n... and {len(self.errors) - 50} more" if len(self.errors) > 50 else ""
        super().__init__(f"{len(self.errors)} validation error(s):\n{head}{more}")


# --- annotation files ---------------------------------------------------------------

def _size(data: dict, where: str, errors: list[str]) -> tuple[int, int] | None:
    try:
        w, h = data["width"], data["height"]
    except KeyError as e:
        errors.append(f"{where}: missing key {e.args[0]!r}")
        return None
    if not (isinstance(w, int) and isinstance(h, int)) or isinstance(w, bool) or w <= 0 or h <= 0:
        errors.append(f"{where}: width/height must be positive integers, got {w!r}x{h!r}")
        return None
    return w, h


def parse_field_annotation(data: dict, where: str, errors: list[str]):
    """``(width, height, image, detections, regions)`` or None; problems go to ``errors``."""
    size = _size(data, where, errors)
    image = data.get("image")
    if not isinstance(image, str):
        errors.append(f"{where}: 'image' must be a file name")
    boxes = data.get("boxes")
    if not isinstance(boxes, list):
        errors.append(f"{where}: 'boxes' must be a list")
        return None
    dets = []
    for k, b in enumerate(boxes):
        loc = f"{where}: boxes[{k}]"
        try:
            spp = SppClass.parse(b["spp"])
            occ = b.get("occluded")
            if occ is not None and not isinstance(occ, bool):
                raise ValueError(f"occluded must be a boolean, got {occ!r}")
            box = Box(float(b["cx"]), float(b["cy"]), float(b["w"]), float(b["h"]))
            if (box.cx, box.cy, box.w, box.h) != (b["cx"], b["cy"], b["w"], b["h"]):
                raise ValueError("box extends outside the image")
            conf = float(b.get("confidence", 1.0))
            dets.append(Detection(box, spp, conf, occ))
        except KeyError as e:
            errors.append(f"{loc}: missing key {e.args[0]!r}")
        except (TypeError, ValueError) as e:
            errors.append(f"{loc}: {e}")
    regions = []
    for k, r in enumerate(data.get("regions") or []):
        try:
            InstanceAnnotation(tuple(tuple(v) for v in r), 1)
            regions.append(tuple((float(x), float(y)) for x, y in r))
        except (TypeError, ValueError) as e:
            errors.append(f"{where}: regions[{k}]: {e}")
    if size is None or not isinstance(image, str):
        return None
    return size[0], size[1], image, dets, regions


def parse_instance_annotation(data: dict, where: str, errors: list[str]):
    size = _size(data, where, errors)
    image = data.get("image")
    if not isinstance(image, str):
        errors.append(f"{where}: 'image' must be a file name")
    insts = data.get("instances")
    if not isinstance(insts, list):
        errors.append(f"{where}: 'instances' must be a list")
        return None
    out = []
    for k, it in enumerate(insts):
        loc = f"{where}: instances[{k}]"
        try:
            ann = InstanceAnnotation(tuple(tuple(v) for v in it["polygon"]), SppClass.parse(it["spp"]))
            if size is not None:
                ann.check_bounds(*size)
            out.append(ann)
        except KeyError as e:
            errors.append(f"{loc}: missing key {e.args[0]!r}")
        except (TypeError, ValueError) as e:
            errors.append(f"{loc}: {e}")
    if size is None or not isinstance(image, str):
        return None
    return size[0], size[1], image, out


def record_to_json(rec: ImageRecord, kind: str, image_name: str | None = None) -> dict:
    """Annotation-file form of a record (inverse of ingestion)."""
    d = {"image": image_name or Path(rec.path).name, "width": rec.width, "height": rec.height}
    if kind == "field":
        boxes = []
        for det in rec.detections:
            b = {"cx": det.box.cx, "cy": det.box.cy, "w": det.box.w, "h": det.box.h, "spp": int(det.spp)}
            if det.occluded is not None:
                b["occluded"] = det.occluded
            if det.confidence != 1.0:
                b["confidence"] = det.confidence
            boxes.append(b)
        d["boxes"] = boxes
        if rec.regions:
            d["regions"] = [[list(v) for v in r] for r in rec.regions]
    elif kind == "instance":
        d["instances"] = [{"polygon": [list(v) for v in a.polygon], "spp": int(a.spp)} for a in rec.instances]
    else:
        raise ValueError(f"unknown annotation kind {kind!r}")
    return d


def _load_json(path: Path, errors: list[str]):
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        errors.append(f"{path}: malformed JSON at line {e.lineno} column {e.colno}: {e.msg}")
    except OSError as e:
        errors.append(f"{path}: {e.strerror or e}")
    return None


def _annotation_files(root: Path, split: str | None) -> list[Path]:
    manifest = root / "manifest.json"
    if manifest.exists():
        with open(manifest) as f:
            m = json.load(f)
        return [root / s["annotation"] for s in m["scenes"] if split is None or s["split"] == split]
    files = sorted(p for p in root.rglob("*.json") if p.name not in SKIP_JSON)
    if split is not None:
        files = [p for p in files if p.parent.name == split]
    return files


def ingest_dataset(root, kind: str, split: str | None = None, check_images: bool = True) -> list[ImageRecord]:
    """Validated records for every annotation file under ``root``.

    A ``manifest.json`` at the root (as written by the composer) fixes the file
    list and order; otherwise all ``*.json`` files below the root are read in
    sorted order. Image ids are annotation paths relative to ``root`` without
    the suffix. All problems are collected and raised together.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")
    root = Path(root)
    if not root.is_dir():
        raise DatasetValidationError([f"{root}: not a directory"])
    errors: list[str] = []
    records = []
    for path in _annotation_files(root, split):
        data = _load_json(path, errors)
        if data is None:
            continue
        if not isinstance(data, dict):
            errors.append(f"{path}: top level must be an object")
            continue
        image_id = path.relative_to(root).with_suffix("").as_posix()
        if kind == "field":
            parsed = parse_field_annotation(data, str(path), errors)
            if parsed is None:
                continue
            w, h, image, anns, regions = parsed
        else:
            parsed = parse_instance_annotation(data, str(path), errors)
            if parsed is None:
                continue
            w, h, image, anns = parsed
            regions = []
        img_path = path.parent / image
        if check_images and not img_path.exists():
            errors.append(f"{path}: image {image!r} not found")
            continue
        records.append(ImageRecord(image_id, str(img_path), w, h, Domain.SOURCE, tuple(anns), tuple(regions)))

    domains = root / "domains.json"
    if domains.exists():
        d = _load_json(domains, errors) or {}
        target = d.get("target", [])
        known = {p.relative_to(root).with_suffix("").as_posix() for p in _annotation_files(root, None)}
        unknown = sorted(set(target) - known)
        for i in unknown:
            errors.append(f"{domains}: target id {i!r} is not in the source set")
        tset = set(target)
        records = [dataclasses.replace(r, domain=Domain.TARGET) if r.image_id in tset else r for r in records]
    ids = [r.image_id for r in records]
    if len(set(ids)) != len(ids):
        errors.append(f"{root}: duplicate image ids")
    if errors:
        raise DatasetValidationError(errors)
    return records


def source_records(records: list[ImageRecord]) -> list[ImageRecord]:
    """All records: the target domain is a subset of the source set."""
    return list(records)


def target_records(records: list[ImageRecord]) -> list[ImageRecord]:
    return [r for r in records if r.domain is Domain.TARGET]


def write_field_dataset(
    out, scenes, splits: Sequence[str] | None = None, target_ids=(), config_echo: dict | None = None
) -> dict:
    """Write ``(record, pixels)`` field scenes plus a manifest in the composer's layout.

    ``splits`` names the split of each scene (default: all ``eval``); file
    stems are the global scene index.
    """
    from .composer import save_png

    out = Path(out)
    splits = list(splits) if splits is not None else ["eval"] * len(scenes)
    if len(splits) != len(scenes):
        raise ValueError("one split name per scene is required")
    entries = []
    hist = [0, 0, 0, 0]
    counts: dict[str, int] = {}
    for k, ((rec, px), split) in enumerate(zip(scenes, splits)):
        (out / split).mkdir(parents=True, exist_ok=True)
        stem = f"{k:05d}"
        save_png(out / split / f"{stem}.png", px)
        with open(out / split / f"{stem}.json", "w") as f:
            json.dump(record_to_json(rec, "field", f"{stem}.png"), f, separators=(",", ":"))
        gt = rec.ground_truth()
        for det in rec.detections:
            hist[int(det.spp) - 1] += 1
        counts[split] = counts.get(split, 0) + 1
        entries.append({
            "index": k, "split": split, "image": f"{split}/{stem}.png", "annotation": f"{split}/{stem}.json",
            "pods": gt.pod_count, "seeds": gt.seed_count,
        })
    if target_ids:
        with open(out / "domains.json", "w") as f:
            json.dump({"target": sorted(target_ids)}, f, indent=1)
    manifest = {
        "format": "podcount-synthetic", "version": 1, "kind": "field", "splits": counts,
        "total_images": len(entries), "total_instances": int(sum(e["pods"] for e in entries)),
        "class_histogram": {f"{k + 1}spp": v for k, v in enumerate(hist)},
        "config": config_echo, "scenes": entries,
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return manifest


# --- converters ---------------------------------------------------------------------

CONVERTERS: dict[str, Callable[[dict], list[dict]]] = {}


def register_converter(name: str):
    """Register ``fn(foreign_json) -> list of instance annotation dicts`` under ``name``."""

    def deco(fn):
        CONVERTERS[name] = fn
        return fn

    return deco


@register_converter("coco-polygons")
def _from_coco(data: dict) -> list[dict]:
    """COCO-style polygons; ``category_id`` 1..4 is taken as the spp class."""
    by_image = {im["id"]: {"image": im["file_name"], "width": im["width"], "height": im["height"], "instances": []}
                for im in data["images"]}
    for a in data["annotations"]:
        for seg in a["segmentation"]:
            xy = np.asarray(seg, dtype=float).reshape(-1, 2).tolist()
            by_image[a["image_id"]]["instances"].append({"polygon": xy, "spp": int(a["category_id"])})
    return [by_image[k] for k in sorted(by_image)]


def convert_annotations(data: dict, fmt: str) -> list[dict]:
    try:
        fn = CONVERTERS[fmt]
    except KeyError:
        raise ValueError(f"no converter {fmt!r}; registered: {sorted(CONVERTERS)}") from None
    return fn(data)


# --- run configuration --------------------------------------------------------------

@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.5
    mape_mode: str = "per-image"

    def __post_init__(self):
        if not (0.0 < self.iou_threshold <= 1.0):
            raise ValueError(f"iou_threshold {self.iou_threshold} outside (0, 1]")
        if self.mape_mode not in MAPE_MODES:
            raise ValueError(f"mape_mode must be one of {MAPE_MODES}")


@dataclass(frozen=True)
class SynthConfig:
    kind: str = "instance"
    n_train: int = 2100
    n_eval: int = 700
    pool_images: int = 40
    pool: str | None = None  # directory of labelled pool images; None = procedural pool
    background: str | None = None
    workers: int = 1
    target_fraction: float = 0.0  # field kind: share of images listed as target domain

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"synth kind must be one of {KINDS}")
        if self.n_train < 0 or self.n_eval < 0:
            raise ValueError("n_train and n_eval must be non-negative")


@dataclass(frozen=True)
class RunConfig:
    task: str = "outdoor"
    detector: str | None = "oracle"
    segmenter: str | None = None
    classifier: str | None = None
    method: str | None = None
    dataset: str | None = None
    split: str | None = None
    counts: str | None = None
    use_da: bool = True
    probe: bool = False
    rng_seed: int = 0
    grl: GrlConfig = GrlConfig()
    roi: RoiConfig = RoiConfig()
    train: TrainConfig = TrainConfig()
    composer: ComposerConfig = ComposerConfig()
    field: FieldSceneConfig = FieldSceneConfig()
    pipeline: PipelineConfig = PipelineConfig()
    evaluation: EvalConfig = EvalConfig()
    synth: SynthConfig = SynthConfig()

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        for role in ("detector", "segmenter", "classifier"):
            spec = getattr(self, role)
            if spec is not None:
                parse_backend(spec)

    def method_name(self) -> str:
        if self.method:
            return self.method
        parts = {"outdoor": [self.detector], "outdoor-sam": [self.detector, self.segmenter],
                 "indoor": [self.segmenter, self.classifier]}[self.task]
        return "+".join(str(p) for p in parts)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        nested = {
            "grl": GrlConfig, "roi": RoiConfig, "train": TrainConfig, "composer": ComposerConfig,
            "field": FieldSceneConfig, "pipeline": PipelineConfig, "evaluation": EvalConfig, "synth": SynthConfig,
        }
        for k, typ in nested.items():
            if k in d and isinstance(d[k], dict):
                d[k] = _build(typ, d[k])
        return cls(**d)


def _build(typ, d: dict):
    if hasattr(typ, "from_dict"):
        return typ.from_dict(d)
    return typ(**d)


def load_config(path) -> RunConfig:
    """A RunConfig file, or any artifact that echoes one under a ``config`` key."""
    with open(path) as f:
        data = json.load(f)
    if isinstance(data, dict) and "config" in data:
        data = data["config"]
    if not isinstance(data, dict):
        raise ValueError(f"{path}: no run configuration found")
    return RunConfig.from_dict(data)


# --- checkpoints --------------------------------------------------------------------

CHECKPOINT_FORMAT = "podcount-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _encode_state(module: torch.nn.Module) -> dict:
    out = {}
    for name, t in module.state_dict().items():
        arr = t.detach().cpu().to(torch.float32).contiguous().numpy()
        out[name] = {"shape": list(arr.shape), "dtype": "float32", "data": base64.b64encode(arr.tobytes()).decode()}
    return out


def _decode_state(enc: dict) -> dict:
    state = {}
    for name, t in enc.items():
        if t.get("dtype") != "float32":
            raise CheckpointError(f"tensor {name}: unsupported dtype {t.get('dtype')!r}")
        raw = base64.b64decode(t["data"], validate=True)
        arr = np.frombuffer(raw, dtype="<f4")
        if arr.size != int(np.prod(t["shape"])):
            raise CheckpointError(f"tensor {name}: {arr.size} values for shape {t['shape']}")
        state[name] = torch.from_numpy(arr.reshape(t["shape"]).copy())
    return state


def _digest(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


@dataclass
class Checkpoint:
    detector: ToyDetector
    grl: GrlConfig
    roi: RoiConfig
    train: TrainConfig | None = None
    discriminator: Discriminator | None = None
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    det = ckpt.detector
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "detector": {"width": det.width, "score_threshold": det.score_threshold, "state": _encode_state(det)},
        "grl": asdict(ckpt.grl),
        "roi": asdict(ckpt.roi),
        "train": None if ckpt.train is None else asdict(ckpt.train),
        "discriminator": None
        if ckpt.discriminator is None
        else {
            "in_features": ckpt.discriminator.in_features,
            "hidden": ckpt.discriminator.hidden,
            "state": _encode_state(ckpt.discriminator),
        },
        "meta": ckpt.meta,
    }
    payload["sha256"] = _digest(payload)
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True, indent=1)


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path) as f:
            payload = json.load(f)
    except (OSError, json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable checkpoint ({e})") from e
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a podcount checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {payload.get('version')!r} is not supported (expected {CHECKPOINT_VERSION})"
        )
    digest = payload.pop("sha256", None)
    if digest != _digest(payload):
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupted")
    try:
        d = payload["detector"]
        det = ToyDetector(width=d["width"], score_threshold=d["score_threshold"])
        det.load_state_dict(_decode_state(d["state"]))
        disc = None
        if payload.get("discriminator"):
            dd = payload["discriminator"]
            disc = Discriminator(dd["in_features"], dd["hidden"])
            disc.load_state_dict(_decode_state(dd["state"]))
        train = None if payload.get("train") is None else TrainConfig(**payload["train"])
        return Checkpoint(det.eval(), GrlConfig(**payload["grl"]), RoiConfig(**payload["roi"]), train, disc, payload.get("meta", {}))
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError, RuntimeError) as e:
        raise CheckpointError(f"{path}: malformed checkpoint ({e})") from e
