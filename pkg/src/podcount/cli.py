"""Command-line entry point: ``podcount <subcommand> [options]``.

Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.
Precedence for settings: built-in defaults < ``--config`` < flags, and the
``PODCOUNT_SEED`` environment variable beats ``--seed``.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from .io import (
    KINDS,
    DatasetValidationError,
    RunConfig,
    ingest_dataset,
    load_config,
)

log = logging.getLogger("podcount")

TARGET_STREAM = 0x7A6

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _global_options(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = {"default": argparse.SUPPRESS} if suppress else {}
    p.add_argument("--seed", type=int, help="master rng seed (PODCOUNT_SEED overrides)", **d)
    p.add_argument("--config", help="run config JSON, or any artifact echoing one", **d)
    p.add_argument("--out", help="output directory", **d)
    p.add_argument("--log-level", choices=sorted(LOG_LEVELS), **({"default": argparse.SUPPRESS} if suppress else {"default": "warn"}))


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="podcount", description="Pod and seed counting toolkit.")
    _global_options(ap, suppress=False)
    sub = ap.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    S = argparse.SUPPRESS

    p = sub.add_parser("synthesize", help="generate a synthetic dataset")
    _global_options(p, suppress=True)
    p.add_argument("--kind", choices=KINDS, default=S, help="instance (copy-paste lab scenes) or field (outdoor boxes)")
    p.add_argument("--n-train", type=int, default=S)
    p.add_argument("--n-eval", type=int, default=S)
    p.add_argument("--pool", default=S, help="directory of labelled pool images (default: procedural pool)")
    p.add_argument("--pool-images", type=int, default=S, help="size of the procedural pool")
    p.add_argument("--background", default=S, help="background photo, tiled or cropped to size")
    p.add_argument("--image-size", type=int, nargs=2, metavar=("W", "H"), default=S)
    p.add_argument("--instances", type=int, nargs=2, metavar=("MIN", "MAX"), default=S)
    p.add_argument("--max-overlap-iou", type=float, default=S)
    p.add_argument("--pods", type=int, nargs=2, metavar=("MIN", "MAX"), default=S, help="field kind: pods per image")
    p.add_argument("--distractors", type=int, nargs=2, metavar=("MIN", "MAX"), default=S)
    p.add_argument("--target-fraction", type=float, default=S, help="field kind: share listed as target domain")
    p.add_argument("--workers", type=int, default=S)

    p = sub.add_parser("train-da", help="desk-scale domain-adversarial training on the toy task")
    _global_options(p, suppress=True)
    p.add_argument("--steps", type=int, default=S)
    p.add_argument("--batch-size", type=int, default=S)
    p.add_argument("--lr", type=float, default=S)
    p.add_argument("--disc-lr-mult", type=float, default=S)
    p.add_argument("--alpha", type=float, default=S)
    p.add_argument("--no-da", action="store_true", default=S, help="detection-only training")
    p.add_argument("--probe", action="store_true", default=S, help="report domain-probe accuracy after training")

    p = sub.add_parser("count", help="run a counting pipeline over a dataset")
    _global_options(p, suppress=True)
    p.add_argument("--task", choices=("outdoor", "outdoor-sam", "indoor"), default=S)
    p.add_argument("--dataset", default=S)
    p.add_argument("--split", default=S)
    p.add_argument("--backend", default=S, help="shorthand that fills every role the named backend can serve")
    p.add_argument("--detector", default=S)
    p.add_argument("--segmenter", default=S)
    p.add_argument("--classifier", default=S)
    p.add_argument("--prompt-top-n", type=int, default=S)
    p.add_argument("--method", default=S, help="label used in reports")

    p = sub.add_parser("evaluate", help="score pipeline counts against ground truth")
    _global_options(p, suppress=True)
    p.add_argument("--dataset", default=S)
    p.add_argument("--split", default=S)
    p.add_argument("--counts", default=S, help="counts.json written by `count`")
    p.add_argument("--iou-threshold", type=float, default=S)
    p.add_argument("--mape-mode", choices=("per-image", "aggregate"), default=S)

    p = sub.add_parser("report", help="render report.json files as tables")
    _global_options(p, suppress=True)
    p.add_argument("reports", nargs="+")

    p = sub.add_parser("validate", help="schema and invariant checks only")
    _global_options(p, suppress=True)
    p.add_argument("dataset", nargs="?", help="dataset directory (default: bundled fixtures)")
    p.add_argument("--kind", choices=KINDS, default=S)
    return ap


# --- config assembly ----------------------------------------------------------------

def _replace(obj, **kw):
    return dataclasses.replace(obj, **kw) if kw else obj


def resolve_config(args: argparse.Namespace, env=os.environ) -> RunConfig:
    a = vars(args)
    cfg = load_config(a["config"]) if a.get("config") else RunConfig()
    top, synth, composer, fieldc, train, grl, pipe, ev = {}, {}, {}, {}, {}, {}, {}, {}
    for k in ("task", "dataset", "split", "counts", "method", "detector", "segmenter", "classifier"):
        if k in a:
            top[k] = a[k]
    for k in ("kind", "n_train", "n_eval", "pool", "pool_images", "background", "workers", "target_fraction"):
        if k in a:
            synth[k] = a[k]
    if "image_size" in a:
        composer["image_size"] = tuple(a["image_size"])
        fieldc["size"] = tuple(a["image_size"])
    if "instances" in a:
        composer["instances_per_image"] = tuple(a["instances"])
    if "max_overlap_iou" in a:
        composer["max_overlap_iou"] = a["max_overlap_iou"]
    if "pods" in a:
        fieldc["pods_per_image"] = tuple(a["pods"])
    if "distractors" in a:
        fieldc["distractors"] = tuple(a["distractors"])
    for k in ("steps", "batch_size", "lr", "disc_lr_mult"):
        if k in a:
            train[k] = a[k]
    if "alpha" in a:
        grl["alpha"] = a["alpha"]
    if a.get("no_da"):
        top["use_da"] = False
    if a.get("probe"):
        top["probe"] = True
    if "prompt_top_n" in a:
        pipe["prompt_top_n"] = a["prompt_top_n"]
    if "iou_threshold" in a:
        ev["iou_threshold"] = a["iou_threshold"]
    if "mape_mode" in a:
        ev["mape_mode"] = a["mape_mode"]

    seed = cfg.rng_seed
    if a.get("seed") is not None:
        seed = a["seed"]
    if env.get("PODCOUNT_SEED"):
        try:
            seed = int(env["PODCOUNT_SEED"])
        except ValueError:
            raise ConfigError(f"PODCOUNT_SEED must be an integer, got {env['PODCOUNT_SEED']!r}") from None
    top["rng_seed"] = seed
    composer["rng_seed"] = seed

    if "backend" in a:
        top.update(_expand_backend(a["backend"], top.get("task", cfg.task)))
    cfg = _replace(
        cfg,
        synth=_replace(cfg.synth, **synth),
        composer=_replace(cfg.composer, **composer),
        field=_replace(cfg.field, **fieldc),
        train=_replace(cfg.train, **train),
        grl=_replace(cfg.grl, **grl),
        pipeline=_replace(cfg.pipeline, **pipe),
        evaluation=_replace(cfg.evaluation, **ev),
        **top,
    )
    return cfg


def _expand_backend(name: str, task: str) -> dict:
    from .pipelines import backend_role, parse_backend

    spec = parse_backend(name)
    role = backend_role(spec)
    out = {role: str(spec)}
    if spec.name == "oracle":
        # an oracle run must be exact: prompting only the top-n boxes can leave a
        # plant unprompted, so the two-step outdoor task gets the identity mask
        if task == "outdoor-sam":
            out["segmenter"] = "fullmask-segmenter"
        if task == "indoor":
            out["segmenter"] = "oracle-segmenter"
            out["classifier"] = "oracle-classifier"
            del out["detector"]
    return out


# --- commands -----------------------------------------------------------------------

def _out_dir(args) -> Path:
    out = getattr(args, "out", None)
    if not out:
        raise UsageError("--out is required for this command")
    p = Path(out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _dump(path: Path, obj) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=1, sort_keys=True)


def cmd_synthesize(cfg: RunConfig, args) -> int:
    from .composer import (
        black_cloth,
        extract_instances,
        generate_dataset,
        load_rgb,
        procedural_pool,
    )

    out = _out_dir(args)
    echo = cfg.to_dict()
    s = cfg.synth
    if s.kind == "field":
        from .fields import make_field_scene
        from .io import write_field_dataset

        n = s.n_train + s.n_eval
        scenes = [make_field_scene(np.random.default_rng([cfg.rng_seed, k]), cfg.field, f"{k:05d}") for k in range(n)]
        splits = ["train"] * s.n_train + ["eval"] * s.n_eval
        target = []
        if s.target_fraction > 0 and n:
            rng = np.random.default_rng([cfg.rng_seed, TARGET_STREAM])
            pick = rng.choice(n, size=int(round(s.target_fraction * n)), replace=False)
            target = [f"{splits[i]}/{i:05d}" for i in sorted(pick.tolist())]
        write_field_dataset(out, scenes, splits, target, config_echo=echo)
        return 0

    if s.pool:
        records = ingest_dataset(s.pool, "instance")
        pool = [c for r in records for c in extract_instances(r)]
    else:
        pool = [c for rec, px in procedural_pool(s.pool_images, cfg.rng_seed) for c in extract_instances(rec, px)]
    bg = load_rgb(s.background) if s.background else black_cloth(cfg.composer.image_size, cfg.rng_seed)
    generate_dataset(pool, bg, s.n_train, s.n_eval, cfg.composer, out, workers=s.workers, config_echo=echo)
    return 0


def cmd_train_da(cfg: RunConfig, args) -> int:
    import torch

    from .adaptation import DATrainer, probe_after_training
    from .io import Checkpoint, save_checkpoint

    out = _out_dir(args)
    torch.set_num_threads(1)
    tr = DATrainer(cfg.rng_seed, use_da=cfg.use_da, grl=cfg.grl, roi=cfg.roi, train=cfg.train)
    tr.train()
    model = tr.model
    ckpt = Checkpoint(model, cfg.grl, cfg.roi, cfg.train, tr.discriminator, {"seed": cfg.rng_seed, "use_da": cfg.use_da})
    save_checkpoint(out / "checkpoint.json", ckpt)
    logd = {
        "config": cfg.to_dict(),
        "history": [[h.det_loss, h.dis_loss] for h in tr.history],
    }
    if cfg.probe:
        logd["probe_accuracy"] = probe_after_training(model, cfg.rng_seed, cfg.roi)
        print(f"probe accuracy {logd['probe_accuracy']:.3f}")
    _dump(out / "train_log.json", logd)
    return 0


def _dataset_kind(task: str) -> str:
    return "instance" if task == "indoor" else "field"


def _instances_json(po) -> list[dict]:
    from .core import mask_bbox, trace_contours

    out = []
    for mask, spp, conf in po.masks:
        x0, y0, x1, y1 = mask_bbox(mask)
        rings = [[[x + x0, y + y0] for x, y in r] for r in trace_contours(mask[y0:y1, x0:x1])]
        out.append({"rings": rings, "spp": int(spp), "confidence": conf})
    return out


def cmd_count(cfg: RunConfig, args) -> int:
    from .pipelines import BackendSpec, PipelineBackends, load_sample, parse_backend, run_pipeline

    if not cfg.dataset:
        raise UsageError("count needs --dataset")
    out = _out_dir(args)
    records = ingest_dataset(cfg.dataset, _dataset_kind(cfg.task), split=cfg.split)
    by_id = {r.image_id: r for r in records}

    def spec(s) -> BackendSpec | None:
        return None if s is None else parse_backend(s)

    backends = PipelineBackends(spec(cfg.detector), spec(cfg.segmenter), spec(cfg.classifier))
    samples = [load_sample(r) for r in records]
    results = run_pipeline(cfg.task, samples, backends, by_id, cfg.pipeline)
    images = []
    for image_id, po in results:
        entry = {"image_id": image_id, "pods": po.count.pod_count, "seeds": po.count.seed_count}
        if cfg.task == "indoor":
            entry["instances"] = _instances_json(po)
        else:
            entry["detections"] = [
                {"cx": d.box.cx, "cy": d.box.cy, "w": d.box.w, "h": d.box.h, "spp": int(d.spp), "confidence": d.confidence}
                for d in po.detections
            ]
        images.append(entry)
    _dump(out / "counts.json", {
        "format": "podcount-counts", "version": 1, "task": cfg.task, "method": cfg.method_name(),
        "config": cfg.to_dict(), "images": images,
    })
    return 0


def evaluate_counts_file(cfg: RunConfig, counts: dict):
    """Build a CountReport (with confusion matrix) from a counts.json payload."""
    from .core import Box, SppClass
    from .evaluation import ConfusionMatrix, MaskGeom, confusion_matrix, evaluate_counts, match_instances

    task = counts["task"]
    records = ingest_dataset(cfg.dataset, _dataset_kind(task), split=cfg.split)
    truth = {r.image_id: (r.ground_truth().pod_count, r.ground_truth().seed_count) for r in records}
    preds = {e["image_id"]: (e["pods"], e["seeds"]) for e in counts["images"]}
    extra = sorted(set(preds) - set(truth))
    if extra:
        raise ValueError(f"counts for images not in the dataset: {', '.join(extra)}")
    by_pred = {e["image_id"]: e for e in counts["images"]}
    cm = ConfusionMatrix()
    for r in records:
        e = by_pred.get(r.image_id)
        if e is None:
            continue
        if task == "indoor":
            p = [(MaskGeom.from_rings(i["rings"]), SppClass.parse(i["spp"]), i["confidence"]) for i in e["instances"]]
            g = [(MaskGeom.from_rings([a.polygon]), a.spp) for a in r.instances]
        else:
            p = [(Box(d["cx"], d["cy"], d["w"], d["h"]), SppClass.parse(d["spp"]), d["confidence"]) for d in e["detections"]]
            g = [(d.box, d.spp) for d in r.detections]
        m = match_instances(p, g, cfg.evaluation.iou_threshold)
        cm = cm + confusion_matrix(m, p, g)
    return evaluate_counts(task, counts["method"], truth, preds, cfg.evaluation.mape_mode, cm, cfg.to_dict())


def cmd_evaluate(cfg: RunConfig, args) -> int:
    from .evaluation import write_report

    if not cfg.counts:
        raise UsageError("evaluate needs --counts")
    with open(cfg.counts) as f:
        counts = json.load(f)
    # dataset and split default to the ones the counts were produced from
    made_by = counts.get("config") or {}
    if not cfg.dataset:
        cfg = dataclasses.replace(cfg, dataset=made_by.get("dataset"), split=cfg.split or made_by.get("split"))
        if not cfg.dataset:
            raise UsageError("evaluate needs --dataset")
    out = _out_dir(args)
    report = evaluate_counts_file(cfg, counts)
    write_report(report, out)
    print(f"{report.method}: pod MAE {report.pod_mae:.2f}, seed MAE {report.seed_mae:.2f}")
    return 0


def cmd_report(cfg: RunConfig, args) -> int:
    from .evaluation import CountReport, render_markdown

    reports = []
    for path in args.reports:
        with open(path) as f:
            reports.append(CountReport.from_dict(json.load(f)))
    md = render_markdown(reports)
    if getattr(args, "out", None):
        (_out_dir(args) / "report.md").write_text(md)
    else:
        sys.stdout.write(md)
    return 0


def bundled_fixtures() -> list[tuple[Path, str]]:
    root = Path(str(resources.files("podcount") / "fixtures"))
    return [(root / kind, kind) for kind in KINDS if (root / kind).is_dir()]


def _guess_kind(root: Path) -> str:
    m = root / "manifest.json"
    if m.exists():
        with open(m) as f:
            return json.load(f).get("kind", "instance")
    for p in sorted(root.rglob("*.json")):
        if p.name in ("domains.json",):
            continue
        try:
            with open(p) as f:
                d = json.load(f)
        except (OSError, json.JSONDecodeError):
            continue
        if isinstance(d, dict) and "boxes" in d:
            return "field"
        if isinstance(d, dict) and "instances" in d:
            return "instance"
    raise DatasetValidationError([f"{root}: cannot tell dataset kind; pass --kind"])


def cmd_validate(cfg: RunConfig, args) -> int:
    targets = (
        [(Path(args.dataset), getattr(args, "kind", None) or _guess_kind(Path(args.dataset)))]
        if args.dataset
        else bundled_fixtures()
    )
    total = 0
    for root, kind in targets:
        recs = ingest_dataset(root, kind)
        total += len(recs)
        print(f"{root}: {len(recs)} {kind} record(s) OK")
    return 0


COMMANDS = {
    "synthesize": cmd_synthesize,
    "train-da": cmd_train_da,
    "count": cmd_count,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "validate": cmd_validate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help(sys.stderr)
            return 1
        logging.basicConfig(level=LOG_LEVELS[getattr(args, "log_level", "warn")], format="%(levelname)s %(name)s: %(message)s")
        try:
            cfg = resolve_config(args)
        except (ValueError, TypeError, OSError, json.JSONDecodeError) as e:
            raise ConfigError(str(e)) from e
        return COMMANDS[args.command](cfg, args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except (ConfigError, DatasetValidationError) as e:
        print(f"validation error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - runtime failures map to exit 2
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
