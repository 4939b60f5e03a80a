import json
import shutil

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from conftest import FIXTURES
from podcount.adaptation import GrlConfig, RoiConfig, TrainConfig, build_discriminator
from podcount.composer import save_png
from podcount.core import Domain
from podcount.fields import FieldSceneConfig, make_field_scene
from podcount.io import (
    CHECKPOINT_VERSION,
    Checkpoint,
    CheckpointError,
    DatasetValidationError,
    RunConfig,
    convert_annotations,
    ingest_dataset,
    load_checkpoint,
    load_config,
    record_to_json,
    save_checkpoint,
    source_records,
    target_records,
    write_field_dataset,
)
from podcount.toy import make_toy_batch, to_tensor, toy_detector_build


def copy_fixture(tmp_path, kind):
    dst = tmp_path / kind
    shutil.copytree(FIXTURES / kind, dst)
    return dst


def test_bundled_fixtures_ingest():
    field = ingest_dataset(FIXTURES / "field", "field")
    inst = ingest_dataset(FIXTURES / "instance", "instance")
    assert len(field) == 3 and len(inst) == 3
    assert [r.domain for r in field] == [Domain.SOURCE, Domain.SOURCE, Domain.TARGET]
    assert all(r.detections and r.regions for r in field)
    assert all(r.instances for r in inst)


def test_spp_five_names_file_and_box(tmp_path):
    root = copy_fixture(tmp_path, "field")
    path = root / "eval" / "00001.json"
    data = json.loads(path.read_text())
    data["boxes"][2]["spp"] = 5
    path.write_text(json.dumps(data))
    with pytest.raises(DatasetValidationError) as e:
        ingest_dataset(root, "field")
    assert len(e.value.errors) == 1
    msg = e.value.errors[0]
    assert "00001.json" in msg and "boxes[2]" in msg and "spp 5" in msg


def test_errors_are_itemized(tmp_path):
    root = copy_fixture(tmp_path, "instance")
    (root / "00000.json").write_text('{"image": "00000.png",\n "width": 128,')
    d = json.loads((root / "00001.json").read_text())
    d["instances"][0]["polygon"] = [[0, 0], [500, 0], [0, 500]]
    d["instances"][1]["spp"] = "two"
    (root / "00001.json").write_text(json.dumps(d))
    (root / "00002.png").unlink()
    with pytest.raises(DatasetValidationError) as e:
        ingest_dataset(root, "instance")
    errs = e.value.errors
    assert len(errs) == 4
    assert "line 2" in errs[0]
    assert "instances[0]" in errs[1] and "instances[1]" in errs[2]
    assert "not found" in errs[3]


def test_unknown_target_id_rejected(tmp_path):
    root = copy_fixture(tmp_path, "field")
    (root / "domains.json").write_text(json.dumps({"target": ["eval/00002", "eval/99999"]}))
    with pytest.raises(DatasetValidationError, match="99999"):
        ingest_dataset(root, "field")


def test_box_outside_image_rejected(tmp_path):
    root = copy_fixture(tmp_path, "field")
    path = root / "eval" / "00000.json"
    d = json.loads(path.read_text())
    d["boxes"][0].update(cx=0.99, w=0.1)
    path.write_text(json.dumps(d))
    with pytest.raises(DatasetValidationError, match="outside"):
        ingest_dataset(root, "field")


def test_table_one_replica(tmp_path):
    # 150 field images plus three lab sets of 300, 300 and 260; the field images are the target
    groups = {"field": 150, "lab-a": 300, "lab-b": 300, "lab-c": 260}
    px = np.zeros((8, 8, 3), np.uint8)
    target = []
    for g, n in groups.items():
        (tmp_path / g).mkdir()
        for k in range(n):
            save_png(tmp_path / g / f"{k:04d}.png", px)
            ann = {"image": f"{k:04d}.png", "width": 8, "height": 8, "boxes": [{"cx": 0.5, "cy": 0.5, "w": 0.25, "h": 0.5, "spp": 1 + k % 4}]}
            (tmp_path / g / f"{k:04d}.json").write_text(json.dumps(ann))
            if g == "field":
                target.append(f"{g}/{k:04d}")
    (tmp_path / "domains.json").write_text(json.dumps({"target": target}))
    records = ingest_dataset(tmp_path, "field")
    src, tgt = source_records(records), target_records(records)
    assert len(src) == 1010 and len(tgt) == 150
    assert {r.image_id for r in tgt} <= {r.image_id for r in src}
    assert all(r.image_id.startswith("field/") for r in tgt)


@given(st.integers(0, 10_000))
def test_field_annotation_round_trip(seed):
    rec, _ = make_field_scene(np.random.default_rng(seed), FieldSceneConfig(size=(64, 48), pods_per_image=(3, 8), distractors=(0, 2)))
    d = record_to_json(rec, "field")
    from podcount.io import parse_field_annotation

    errors = []
    w, h, image, dets, regions = parse_field_annotation(json.loads(json.dumps(d)), "x", errors)
    assert not errors
    assert (w, h) == (64, 48) and tuple(dets) == rec.annotations and tuple(regions) == rec.regions
    assert record_to_json(rec.__class__(rec.image_id, rec.path, w, h, rec.domain, tuple(dets), tuple(regions)), "field") == d


def test_instance_files_round_trip():
    for rec in ingest_dataset(FIXTURES / "instance", "instance"):
        on_disk = json.loads((FIXTURES / "instance" / f"{rec.image_id}.json").read_text())
        again = record_to_json(rec, "instance")
        assert again["instances"] == on_disk["instances"]
        assert (again["width"], again["height"], again["image"]) == (on_disk["width"], on_disk["height"], on_disk["image"])


def test_write_field_dataset_splits(tmp_path):
    scenes = [make_field_scene(np.random.default_rng(k), FieldSceneConfig(size=(48, 48), pods_per_image=(2, 4)), f"{k}") for k in range(5)]
    m = write_field_dataset(tmp_path, scenes, ["train"] * 3 + ["eval"] * 2, ["eval/00004"])
    assert m["splits"] == {"train": 3, "eval": 2}
    ev = ingest_dataset(tmp_path, "field", split="eval")
    assert [r.image_id for r in ev] == ["eval/00003", "eval/00004"]
    assert [r.domain for r in ev] == [Domain.SOURCE, Domain.TARGET]
    assert len(ingest_dataset(tmp_path, "field")) == 5


def test_coco_converter():
    coco = {
        "images": [{"id": 1, "file_name": "a.png", "width": 20, "height": 20}],
        "annotations": [{"image_id": 1, "category_id": 3, "segmentation": [[1, 1, 9, 1, 9, 6]]}],
    }
    out = convert_annotations(coco, "coco-polygons")
    assert out == [{"image": "a.png", "width": 20, "height": 20, "instances": [{"polygon": [[1, 1], [9, 1], [9, 6]], "spp": 3}]}]
    with pytest.raises(ValueError, match="no converter"):
        convert_annotations(coco, "voc")


# --- config -----------------------------------------------------------------------

def test_run_config_round_trip(tmp_path):
    cfg = RunConfig(task="indoor", detector=None, segmenter="oracle-segmenter", classifier="constant-classifier(k=3)",
                    rng_seed=11, grl=GrlConfig(0.5), train=TrainConfig(steps=7))
    again = RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg
    (tmp_path / "c.json").write_text(json.dumps({"config": cfg.to_dict(), "other": 1}))
    assert load_config(tmp_path / "c.json") == cfg


def test_run_config_rejects_bad_values():
    with pytest.raises(ValueError, match="unknown backend"):
        RunConfig(detector="yolo")
    with pytest.raises(ValueError, match="unknown task"):
        RunConfig(task="aerial")
    with pytest.raises(ValueError, match="unknown config keys"):
        RunConfig.from_dict({"tsk": "outdoor"})


# --- checkpoints -------------------------------------------------------------------

def toy_probe_batch():
    return to_tensor(make_toy_batch(np.random.default_rng(123), 5))


def trained_detector():
    from podcount.adaptation import DATrainer

    tr = DATrainer(2, train=TrainConfig(steps=30))
    tr.train()
    return tr


def test_checkpoint_round_trip_bit_exact(tmp_path):
    tr = trained_detector()
    path = tmp_path / "ck.json"
    save_checkpoint(path, Checkpoint(tr.model, GrlConfig(), RoiConfig(), tr.train_cfg, tr.discriminator, {"seed": 2}))
    ck = load_checkpoint(path)
    x = toy_probe_batch()
    with torch.no_grad():
        a, _ = tr.model(x)
        b, _ = ck.detector(x)
    assert torch.equal(a, b)
    assert tr.model.predict(x) == ck.detector.predict(x)
    assert all(torch.equal(p, q) for p, q in zip(tr.discriminator.parameters(), ck.discriminator.parameters()))
    assert ck.meta == {"seed": 2} and ck.train == tr.train_cfg


def test_checkpoint_corruption_detected(tmp_path):
    det = toy_detector_build(0)
    path = tmp_path / "ck.json"
    save_checkpoint(path, Checkpoint(det, GrlConfig(), RoiConfig(), discriminator=build_discriminator(det.fused_channels, 1)))
    text = path.read_text()
    d = json.loads(text)
    blob = d["detector"]["state"]["stem.weight"]["data"]
    d["detector"]["state"]["stem.weight"]["data"] = ("B" if blob[0] != "B" else "C") + blob[1:]
    (tmp_path / "flip.json").write_text(json.dumps(d))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(tmp_path / "flip.json")
    (tmp_path / "trunc.json").write_text(text[: len(text) // 2])
    with pytest.raises(CheckpointError, match="unreadable"):
        load_checkpoint(tmp_path / "trunc.json")
    d = json.loads(text)
    d["version"] = CHECKPOINT_VERSION + 1
    (tmp_path / "ver.json").write_text(json.dumps(d))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "ver.json")
    (tmp_path / "other.json").write_text(json.dumps({"format": "something-else"}))
    with pytest.raises(CheckpointError, match="not a podcount"):
        load_checkpoint(tmp_path / "other.json")
