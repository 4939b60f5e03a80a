import json
from collections import Counter

import numpy as np
import pytest

from helpers import check_scene
from podcount.composer import (
    ComposerConfig,
    InstanceCutout,
    SyntheticScene,
    black_cloth,
    compose_scene,
    extract_instances,
    fit_background,
    generate_dataset,
    place_instance,
    procedural_pool,
)
from podcount.core import ImageRecord, InstanceAnnotation, mask_iou, rasterize_rings
from podcount.io import ingest_dataset


@pytest.fixture(scope="module")
def pool_images():
    return procedural_pool(40, seed=0)


@pytest.fixture(scope="module")
def pool(pool_images):
    return [c for rec, px in pool_images for c in extract_instances(rec, px)]


def square_cutout(side: int, spp: int = 1) -> InstanceCutout:
    patch = np.full((side, side, 4), 200, dtype=np.uint8)
    poly = ((0, 0), (side, 0), (side, side), (0, side))
    return InstanceCutout(patch, spp, "sq", poly)


def test_extract_three_cutouts():
    rng = np.random.default_rng(3)
    from podcount.composer import render_pool_image

    rec, px = render_pool_image(rng, "p", 160, 3)
    cuts = extract_instances(rec, px)
    assert len(cuts) == 3
    assert [int(c.spp) for c in cuts] == [int(a.spp) for a in rec.instances]


def test_cutout_alpha_round_trip(pool_images):
    for rec, px in pool_images[:10]:
        for inst, cut in zip(rec.instances, extract_instances(rec, px)):
            full = rasterize_rings([inst.polygon], rec.width, rec.height)
            ys, xs = np.nonzero(full)
            placed = np.zeros_like(full)
            h, w = cut.mask.shape
            placed[ys.min() : ys.min() + h, xs.min() : xs.min() + w] = cut.mask
            assert np.array_equal(placed, full)
            # alpha also equals the local polygon rasterized in patch coordinates
            assert np.array_equal(rasterize_rings([cut.polygon], w, h), cut.mask)


def test_forty_image_pool_ingests(tmp_path, pool_images):
    from podcount.composer import save_png
    from podcount.io import record_to_json

    for rec, px in pool_images:
        save_png(tmp_path / f"{rec.image_id}.png", px)
        (tmp_path / f"{rec.image_id}.json").write_text(json.dumps(record_to_json(rec, "instance")))
    records = ingest_dataset(tmp_path, "instance")
    assert len(records) == 40
    assert sum(len(extract_instances(r)) for r in records) == sum(len(r.instances) for r, _ in pool_images)


def test_zero_area_instance_skipped_with_warning():
    rec = ImageRecord("thin", "thin.png", 8, 8, annotations=(InstanceAnnotation(((1.1, 1.1), (1.4, 1.1), (1.4, 1.4)), 1),))
    with pytest.raises(ValueError):
        InstanceCutout(np.zeros((2, 2, 4), np.uint8), 1, "x", ((0, 0), (1, 0), (0, 1)))
    with pytest.warns(RuntimeWarning, match="no pixel"):
        assert extract_instances(rec, np.zeros((8, 8, 3), np.uint8)) == []


def test_place_on_empty_scene():
    scene = SyntheticScene.from_background(np.zeros((64, 64, 3), np.uint8))
    cfg = ComposerConfig(max_placement_attempts=100)
    assert place_instance(scene, square_cutout(10), cfg, np.random.default_rng(0))
    assert len(scene.annotations) == 1


def test_pigeonhole_rejects_second_copy():
    scene = SyntheticScene.from_background(np.zeros((20, 20, 3), np.uint8))
    cfg = ComposerConfig(rotation=(0.0, 0.0), max_overlap_iou=0.0, max_placement_attempts=100)
    rng = np.random.default_rng(0)
    cut = square_cutout(12)
    assert place_instance(scene, cut, cfg, rng)
    assert not place_instance(scene, cut, cfg, rng)
    assert len(scene.annotations) == 1


def test_zero_rotation_is_a_translation(pool):
    scene = SyntheticScene.from_background(np.zeros((200, 200, 3), np.uint8))
    cfg = ComposerConfig(rotation=(0.0, 0.0))
    cut = pool[0]
    assert place_instance(scene, cut, cfg, np.random.default_rng(5))
    dx, dy = scene.provenance[0].placement_xy
    assert scene.annotations[0].polygon == tuple((x + dx, y + dy) for x, y in cut.polygon)
    # pixels are copied verbatim where the alpha is set
    m = scene.instance_mask(0)
    y0, x0 = np.nonzero(m)[0].min(), np.nonzero(m)[1].min()
    h, w = cut.mask.shape
    win = scene.image[y0 : y0 + h, x0 : x0 + w]
    assert np.array_equal(win[cut.mask], cut.patch[..., :3][cut.mask])


def test_forced_count_and_determinism(pool):
    cfg = ComposerConfig(instances_per_image=(5, 5), image_size=(512, 512), max_placement_attempts=200)
    bg = black_cloth(cfg.image_size, 0)
    a = compose_scene(bg, pool, cfg, np.random.default_rng([0, 1]))
    b = compose_scene(bg, pool, cfg, np.random.default_rng([0, 1]))
    assert len(a.annotations) == 5
    assert np.array_equal(a.image, b.image) and a.annotations == b.annotations
    check_scene(a, bg, cfg.max_overlap_iou)


def test_dense_scene_invariants(pool):
    cfg = ComposerConfig(image_size=(512, 512))
    bg = black_cloth(cfg.image_size, 1)
    scene = compose_scene(bg, pool, cfg, np.random.default_rng(9))
    assert 30 <= len(scene.annotations) <= 80
    check_scene(scene, bg, cfg.max_overlap_iou)


def test_overlap_allowed_when_configured(pool):
    cfg = ComposerConfig(instances_per_image=(60, 60), image_size=(128, 128), max_overlap_iou=0.3)
    bg = black_cloth(cfg.image_size, 0)
    scene = compose_scene(bg, pool, cfg, np.random.default_rng(2))
    masks = [scene.instance_mask(k) for k in range(len(scene.annotations))]
    ious = [mask_iou(masks[i], masks[j]) for i in range(len(masks)) for j in range(i + 1, len(masks))]
    assert max(ious) > 0 and max(ious) <= 0.3


def test_infeasible_background():
    with pytest.raises(ValueError, match="infeasible"):
        compose_scene(np.zeros((4, 4, 3), np.uint8), [square_cutout(10)], ComposerConfig(), np.random.default_rng(0))
    with pytest.raises(ValueError):
        compose_scene(np.zeros((40, 40, 3), np.uint8), [], ComposerConfig(), np.random.default_rng(0))


def test_class_histogram_tracks_pool(pool):
    # sparse scenes so rejections cannot bias the draw toward small cutouts
    cfg = ComposerConfig(instances_per_image=(3, 3), image_size=(400, 400))
    bg = black_cloth(cfg.image_size, 0)
    counts = Counter()
    for i in range(1000):
        scene = compose_scene(bg, pool, cfg, np.random.default_rng([7, i]))
        counts.update(int(a.spp) for a in scene.annotations)
    n = sum(counts.values())
    assert n == 3000
    freq = Counter(int(c.spp) for c in pool)
    for k in range(1, 5):
        p = freq[k] / len(pool)
        assert abs(counts[k] - n * p) <= 3 * np.sqrt(n * p * (1 - p))


def test_scene_seeds_are_independent(pool):
    cfg = ComposerConfig(instances_per_image=(4, 4), image_size=(256, 256))
    bg = black_cloth(cfg.image_size, 0)
    picks = set()
    for i in range(100):
        scene = compose_scene(bg, pool, cfg, np.random.default_rng([0, i]))
        picks.add(tuple((p.source_image_id, p.rotation_deg) for p in scene.provenance))
    assert len(picks) == 100


def test_fit_background_tiles():
    bg = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3)
    out = fit_background(bg, (7, 5))
    assert out.shape == (5, 7, 3)
    assert np.array_equal(out[2:4, 3:6], bg)


def test_generate_dataset_manifest(tmp_path, pool):
    cfg = ComposerConfig(instances_per_image=(3, 6), image_size=(128, 128))
    bg = black_cloth((64, 64), 0)
    m = generate_dataset(pool, bg, 4, 2, cfg, tmp_path / "d")
    assert m["total_images"] == 6 and m["splits"] == {"train": 4, "eval": 2}
    recount = 0
    for s in m["scenes"]:
        ann = json.loads((tmp_path / "d" / s["annotation"]).read_text())
        recount += len(ann["instances"])
        assert len(ann["instances"]) == s["pods"]
    assert recount == m["total_instances"] == sum(m["class_histogram"].values())
    assert m["composer"] == cfg.to_dict()
    recs = ingest_dataset(tmp_path / "d", "instance")
    assert [r.image_id for r in recs] == [s["annotation"][:-5] for s in m["scenes"]]


def test_generate_dataset_workers_do_not_change_bytes(tmp_path, pool):
    cfg = ComposerConfig(instances_per_image=(3, 6), image_size=(96, 96))
    bg = black_cloth((96, 96), 0)
    generate_dataset(pool, bg, 3, 2, cfg, tmp_path / "a", workers=1)
    generate_dataset(pool, bg, 3, 2, cfg, tmp_path / "b", workers=3)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_empty_dataset(tmp_path, pool):
    m = generate_dataset(pool, black_cloth((32, 32)), 0, 0, ComposerConfig(), tmp_path / "e")
    assert m["total_images"] == 0 and m["scenes"] == []
    assert [p.name for p in (tmp_path / "e").iterdir()] == ["manifest.json"]


def test_paper_scale_manifest_totals(tmp_path, pool):
    # full 2100/700 split on tiny canvases to keep the run short
    cfg = ComposerConfig(instances_per_image=(1, 2), image_size=(64, 64))
    m = generate_dataset(pool, black_cloth((64, 64)), 2100, 700, cfg, tmp_path / "big", workers=4)
    assert m["total_images"] == 2800
    assert m["splits"] == {"train": 2100, "eval": 700}
    assert len(list((tmp_path / "big" / "train").glob("*.png"))) == 2100
    assert len(list((tmp_path / "big" / "eval").glob("*.json"))) == 700


def test_config_validation():
    with pytest.raises(ValueError):
        ComposerConfig(instances_per_image=(5, 2))
    with pytest.raises(ValueError):
        ComposerConfig(max_overlap_iou=1.5)
    cfg = ComposerConfig(rotation=(10.0, 20.0))
    assert ComposerConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
