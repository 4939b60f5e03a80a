"""Regenerate the small fixtures bundled under src/podcount/fixtures.

    python scripts/make_fixtures.py [--out src/podcount/fixtures]

field/     three small outdoor scenes with distractors; one listed as target domain
instance/  three small copy-paste lab scenes
matching.json  detector-like prediction sets with at most six objects per side
"""
from __future__ import annotations

import argparse
import json
import shutil
from pathlib import Path

import numpy as np

from podcount.composer import (
    ComposerConfig,
    black_cloth,
    compose_scene,
    extract_instances,
    procedural_pool,
    save_png,
    scene_annotation_json,
)
from podcount.fields import FieldSceneConfig, make_field_scene
from podcount.io import write_field_dataset

SEED = 7


def field_fixture(out: Path) -> None:
    cfg = FieldSceneConfig(size=(96, 96), pods_per_image=(4, 8), plants=(1, 1), distractors=(1, 2), pod_length=(8, 12))
    scenes = [make_field_scene(np.random.default_rng([SEED, k]), cfg, f"{k:05d}") for k in range(3)]
    write_field_dataset(out, scenes, ["eval"] * 3, target_ids=["eval/00002"])
    (out / "manifest.json").unlink()  # exercise the manifest-free layout


def instance_fixture(out: Path) -> None:
    pool = [c for rec, px in procedural_pool(6, SEED) for c in extract_instances(rec, px)]
    cfg = ComposerConfig(instances_per_image=(3, 5), image_size=(128, 128), rng_seed=SEED)
    bg = black_cloth(cfg.image_size, SEED)
    out.mkdir(parents=True, exist_ok=True)
    for k in range(3):
        scene = compose_scene(bg, pool, cfg, np.random.default_rng([SEED, k]))
        save_png(out / f"{k:05d}.png", scene.image)
        with open(out / f"{k:05d}.json", "w") as f:
            json.dump(scene_annotation_json(scene, f"{k:05d}.png"), f, separators=(",", ":"))


def matching_fixture(path: Path, n_cases: int = 60) -> None:
    """Ground-truth boxes plus jittered, occasionally duplicated or spurious predictions."""
    rng = np.random.default_rng([SEED, 99])
    cases = []
    for _ in range(n_cases):
        n_gt = int(rng.integers(1, 7))
        c = rng.uniform(0.15, 0.85, size=(n_gt, 2))
        s = rng.uniform(0.05, 0.2, size=(n_gt, 2))
        gts = [[*np.clip(c[i] - s[i] / 2, 0, 1), *np.clip(c[i] + s[i] / 2, 0, 1), int(rng.integers(1, 5))] for i in range(n_gt)]
        preds = []
        for g in gts:
            for _ in range(int(rng.choice([0, 1, 1, 1, 2]))):
                j = rng.normal(0, 0.015, size=4)
                x0, y0, x1, y1 = np.clip(np.asarray(g[:4]) + j, 0, 1)
                if x1 - x0 > 0.01 and y1 - y0 > 0.01:
                    preds.append([x0, y0, x1, y1, int(rng.integers(1, 5)), float(rng.uniform(0.3, 1.0))])
        if rng.random() < 0.3:
            x0, y0 = rng.uniform(0, 0.8, size=2)
            preds.append([x0, y0, x0 + 0.1, y0 + 0.1, int(rng.integers(1, 5)), float(rng.uniform(0.3, 1.0))])
        preds = preds[:6]
        cases.append({"gts": [[round(float(v), 6) for v in g[:4]] + [g[4]] for g in gts],
                      "preds": [[round(float(v), 6) for v in p[:4]] + [p[4], round(p[5], 6)] for p in preds]})
    with open(path, "w") as f:
        json.dump({"iou_threshold": 0.5, "cases": cases}, f, indent=1)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "src/podcount/fixtures"))
    args = ap.parse_args()
    out = Path(args.out)
    for sub in ("field", "instance"):
        shutil.rmtree(out / sub, ignore_errors=True)
    out.mkdir(parents=True, exist_ok=True)
    field_fixture(out / "field")
    instance_fixture(out / "instance")
    matching_fixture(out / "matching.json")
    print(f"fixtures written to {out}")


if __name__ == "__main__":
    main()
