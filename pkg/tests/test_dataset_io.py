"""Manifest round trips, byte determinism, and the invariant auditor."""

import dataclasses

import numpy as np
import pytest

from planksynth.dataset_io import (
    AnnotationSet,
    CategoryRecord,
    Detection,
    DetectionSet,
    ImageRecord,
    Provenance,
    annotation_for_mask,
    dumps_manifest,
    read_detections,
    read_manifest,
    validate,
    write_detections,
    write_manifest,
)
from planksynth.errors import ManifestError
from planksynth.raster import InstanceMask, rle_encode


def _mask(seed, h=24, w=24):
    rng = np.random.default_rng(seed)
    bitmap = rng.random((h, w)) < 0.3
    bitmap[0, 0] = True
    return rle_encode(bitmap)


def _fixture_set() -> AnnotationSet:
    images = [ImageRecord(i, f"images/{i:06d}.png", 24, 24, recipe_digest=f"d{i}") for i in range(3)]
    categories = [
        CategoryRecord(1, "FamilyA", "Family", 501),
        CategoryRecord(2, "FamilyB", "Family", 501),
    ]
    annotations = []
    for k in range(7):
        annotations.append(
            annotation_for_mask(
                k + 1, k % 3, 1 + k % 2, _mask(seed=k), visible_fraction=1.0 / (k + 1)
            )
        )
    return AnnotationSet(
        images=images,
        categories=categories,
        annotations=annotations,
        provenance=Provenance(seed=99, config={"canvas": [24, 24]}, config_digest="abc"),
    )


def test_empty_set_round_trip(tmp_path):
    path = tmp_path / "empty.json"
    write_manifest(AnnotationSet(), path)
    loaded = read_manifest(path)
    assert loaded.images == [] and loaded.categories == [] and loaded.annotations == []


def test_fixture_round_trip_field_for_field(tmp_path):
    aset = _fixture_set()
    path = tmp_path / "m.json"
    write_manifest(aset, path)
    loaded = read_manifest(path)
    assert loaded.images == aset.images
    assert loaded.categories == aset.categories
    assert loaded.annotations == aset.annotations
    assert loaded.provenance == aset.provenance


def test_serialization_is_byte_deterministic(tmp_path):
    aset = _fixture_set()
    assert dumps_manifest(aset) == dumps_manifest(aset)
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    write_manifest(aset, p1)
    write_manifest(aset, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_read_rejects_dangling_image_id(tmp_path):
    aset = _fixture_set()
    bad = dataclasses.replace(aset.annotations[4], image_id=77)
    aset.annotations[4] = bad
    path = tmp_path / "m.json"
    write_manifest(aset, path)
    with pytest.raises(ManifestError) as err:
        read_manifest(path)
    assert "annotation 5" in str(err.value)
    assert "77" in str(err.value)


def test_read_rejects_duplicate_annotation_ids(tmp_path):
    aset = _fixture_set()
    aset.annotations[1] = dataclasses.replace(aset.annotations[1], id=1)
    path = tmp_path / "m.json"
    write_manifest(aset, path)
    with pytest.raises(ManifestError):
        read_manifest(path)


def test_validate_sound_fixture_is_clean(tmp_path):
    aset = _fixture_set()
    assert validate(aset) == []
    path = tmp_path / "m.json"
    write_manifest(aset, path)
    assert validate(read_manifest(path)) == []


def test_validate_flags_area_off_by_one():
    aset = _fixture_set()
    a = aset.annotations[2]
    aset.annotations[2] = dataclasses.replace(a, area=a.area + 1)
    violations = validate(aset)
    assert len(violations) == 1
    assert "area" in violations[0]
    assert f"annotation {a.id}" in violations[0]


def test_validate_flags_short_rle_sum():
    aset = _fixture_set()
    a = aset.annotations[0]
    short = InstanceMask(size=a.segmentation.size, rle=a.segmentation.rle[:-1], bbox=a.bbox, area=a.area)
    aset.annotations[0] = dataclasses.replace(a, segmentation=short)
    violations = validate(aset)
    assert any("malformed RLE" in v for v in violations)


def test_validate_flags_loose_bbox_and_crowd_and_fraction():
    aset = _fixture_set()
    a = aset.annotations[1]
    x, y, w, h = a.bbox
    aset.annotations[1] = dataclasses.replace(a, bbox=(x, y, w + 1, h))
    b = aset.annotations[3]
    aset.annotations[3] = dataclasses.replace(b, iscrowd=1)
    c = aset.annotations[4]
    aset.annotations[4] = dataclasses.replace(c, visible_fraction=1.5)
    violations = validate(aset)
    assert any("bbox" in v and f"annotation {a.id}" in v for v in violations)
    assert any("iscrowd" in v for v in violations)
    assert any("visible_fraction" in v for v in violations)


def test_validate_flags_mask_frame_mismatch():
    aset = _fixture_set()
    a = aset.annotations[0]
    wrong = rle_encode(np.ones((8, 8), bool))
    aset.annotations[0] = dataclasses.replace(
        a, segmentation=wrong, bbox=wrong.bbox, area=wrong.area
    )
    violations = validate(aset)
    assert any("frame" in v for v in violations)


def test_detections_round_trip_and_score_check(tmp_path):
    dset = DetectionSet(
        detections=[
            Detection(0, 1, _mask(5), 0.75),
            Detection(1, 2, _mask(6), 1.0),
        ]
    )
    path = tmp_path / "d.json"
    write_detections(dset, path)
    loaded = read_detections(path)
    assert loaded == dset

    bad = path.read_text().replace("0.75", "1.75")
    path.write_text(bad)
    with pytest.raises(ManifestError) as err:
        read_detections(path)
    assert "score" in str(err.value)


def test_read_manifest_names_file_on_parse_error(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(ManifestError):
        read_manifest(path)
