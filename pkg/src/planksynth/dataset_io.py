"""COCO-style manifest and detection-file I/O.

The manifest is plain UTF-8 JSON with ``images``, ``categories`` (taxon-
derived, carrying ``rank`` and ``parent_id``), ``annotations`` (column-major
RLE segmentation, tight bbox, area, ``iscrowd`` pinned to 0, optional
``visible_fraction``) and an ``info`` block with provenance.  The writer
emits keys in a fixed order with default float formatting, so serializing
the same set twice yields identical bytes.  JSON-Schema documents for both
file kinds live under ``schemas/`` in the repository root.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

from . import __version__
from .errors import ManifestError
from .raster import InstanceMask, ones_intervals
from .taxonomy import RANKS

__all__ = [
    "ImageRecord",
    "CategoryRecord",
    "Annotation",
    "Detection",
    "Provenance",
    "AnnotationSet",
    "DetectionSet",
    "annotation_for_mask",
    "write_manifest",
    "read_manifest",
    "dumps_manifest",
    "write_detections",
    "read_detections",
    "validate",
]


@dataclass(frozen=True)
class ImageRecord:
    id: int
    file_name: str
    width: int
    height: int
    recipe_digest: str | None = None


@dataclass(frozen=True)
class CategoryRecord:
    id: int
    name: str
    rank: str
    parent_id: int | None = None


@dataclass(frozen=True)
class Annotation:
    id: int
    image_id: int
    category_id: int
    segmentation: InstanceMask
    bbox: tuple[int, int, int, int]
    area: int
    iscrowd: int = 0
    visible_fraction: float | None = None


@dataclass(frozen=True)
class Detection:
    image_id: int
    category_id: int
    segmentation: InstanceMask
    score: float


@dataclass(frozen=True)
class Provenance:
    seed: int | None = None
    config: dict | None = None
    config_digest: str | None = None
    tool_version: str = __version__


@dataclass
class AnnotationSet:
    images: list[ImageRecord] = field(default_factory=list)
    categories: list[CategoryRecord] = field(default_factory=list)
    annotations: list[Annotation] = field(default_factory=list)
    provenance: Provenance = field(default_factory=Provenance)


@dataclass
class DetectionSet:
    detections: list[Detection] = field(default_factory=list)


def annotation_for_mask(
    ann_id: int,
    image_id: int,
    category_id: int,
    mask: InstanceMask,
    visible_fraction: float | None = None,
) -> Annotation:
    """Annotation whose bbox/area mirror the mask's own (the sound default)."""
    return Annotation(
        id=ann_id,
        image_id=image_id,
        category_id=category_id,
        segmentation=mask,
        bbox=mask.bbox,
        area=mask.area,
        visible_fraction=visible_fraction,
    )


# ---------------------------------------------------------------------------
# Serialization (fixed key order => byte-deterministic)
# ---------------------------------------------------------------------------

def _mask_obj(mask: InstanceMask) -> dict:
    return {"size": [mask.size[0], mask.size[1]], "counts": list(mask.rle)}


def _manifest_obj(aset: AnnotationSet) -> dict:
    info: dict[str, Any] = {
        "seed": aset.provenance.seed,
        "config_digest": aset.provenance.config_digest,
        "tool_version": aset.provenance.tool_version,
    }
    if aset.provenance.config is not None:
        info["config"] = aset.provenance.config
    images = []
    for im in aset.images:
        rec: dict[str, Any] = {
            "id": im.id,
            "file_name": im.file_name,
            "width": im.width,
            "height": im.height,
        }
        if im.recipe_digest is not None:
            rec["recipe_digest"] = im.recipe_digest
        images.append(rec)
    categories = [
        {"id": c.id, "name": c.name, "rank": c.rank, "parent_id": c.parent_id}
        for c in aset.categories
    ]
    annotations = []
    for a in aset.annotations:
        rec = {
            "id": a.id,
            "image_id": a.image_id,
            "category_id": a.category_id,
            "segmentation": _mask_obj(a.segmentation),
            "bbox": list(a.bbox),
            "area": a.area,
            "iscrowd": a.iscrowd,
        }
        if a.visible_fraction is not None:
            rec["visible_fraction"] = a.visible_fraction
        annotations.append(rec)
    return {
        "info": info,
        "images": images,
        "categories": categories,
        "annotations": annotations,
    }


def dumps_manifest(aset: AnnotationSet) -> str:
    return json.dumps(_manifest_obj(aset), separators=(",", ":"), allow_nan=False) + "\n"


def write_manifest(aset: AnnotationSet, path) -> None:
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(dumps_manifest(aset))
    except OSError as exc:
        raise ManifestError(f"cannot write manifest {path}: {exc}")


def _rle_stats(size: tuple[int, int], runs: tuple[int, ...]):
    """Best-effort (bbox, area) from raw runs; area falls back to the ones-run
    sum when the runs do not tile the frame."""
    h, w = size
    total = sum(runs)
    area = int(sum(runs[1::2]))
    if total != h * w or any(r < 0 for r in runs) or area == 0:
        return (0, 0, 0, 0), area
    probe = InstanceMask(size=size, rle=runs, bbox=(0, 0, 0, 0), area=area)
    ivals = ones_intervals(probe)
    rebuilt = InstanceMask.from_intervals(size, ivals)
    return rebuilt.bbox, rebuilt.area


def _read_mask(obj, where: str) -> InstanceMask:
    try:
        h, w = int(obj["size"][0]), int(obj["size"][1])
        counts = tuple(int(c) for c in obj["counts"])
    except (KeyError, TypeError, ValueError, IndexError):
        raise ManifestError(f"{where}: segmentation must carry 'size' [h, w] and 'counts'")
    bbox, area = _rle_stats((h, w), counts)
    return InstanceMask(size=(h, w), rle=counts, bbox=bbox, area=area)


def read_manifest(path) -> AnnotationSet:
    """Read and structurally check a manifest; referential or type violations
    are rejected with the offending record named."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path} is not valid JSON: {exc}")
    if not isinstance(raw, dict):
        raise ManifestError(f"{path}: top level must be a JSON object")

    info = raw.get("info", {}) or {}
    provenance = Provenance(
        seed=info.get("seed"),
        config=info.get("config"),
        config_digest=info.get("config_digest"),
        tool_version=info.get("tool_version", __version__),
    )

    images: list[ImageRecord] = []
    image_ids: set[int] = set()
    for rec in raw.get("images", []):
        try:
            im = ImageRecord(
                id=int(rec["id"]),
                file_name=str(rec["file_name"]),
                width=int(rec["width"]),
                height=int(rec["height"]),
                recipe_digest=rec.get("recipe_digest"),
            )
        except (KeyError, TypeError, ValueError):
            raise ManifestError(f"image record {rec!r}: missing or bad field")
        if im.id in image_ids:
            raise ManifestError(f"image {im.id}: duplicate id")
        image_ids.add(im.id)
        images.append(im)

    categories: list[CategoryRecord] = []
    category_ids: set[int] = set()
    for rec in raw.get("categories", []):
        try:
            cat = CategoryRecord(
                id=int(rec["id"]),
                name=str(rec["name"]),
                rank=str(rec["rank"]),
                parent_id=None if rec.get("parent_id") is None else int(rec["parent_id"]),
            )
        except (KeyError, TypeError, ValueError):
            raise ManifestError(f"category record {rec!r}: missing or bad field")
        if cat.id in category_ids:
            raise ManifestError(f"category {cat.id}: duplicate id")
        category_ids.add(cat.id)
        categories.append(cat)

    annotations: list[Annotation] = []
    ann_ids: set[int] = set()
    for rec in raw.get("annotations", []):
        try:
            ann_id = int(rec["id"])
        except (KeyError, TypeError, ValueError):
            raise ManifestError(f"annotation record {rec!r}: missing or bad id")
        where = f"annotation {ann_id}"
        try:
            ann = Annotation(
                id=ann_id,
                image_id=int(rec["image_id"]),
                category_id=int(rec["category_id"]),
                segmentation=_read_mask(rec["segmentation"], where),
                bbox=tuple(int(v) for v in rec["bbox"]),
                area=int(rec["area"]),
                iscrowd=int(rec.get("iscrowd", 0)),
                visible_fraction=(
                    None if rec.get("visible_fraction") is None
                    else float(rec["visible_fraction"])
                ),
            )
        except ManifestError:
            raise
        except (KeyError, TypeError, ValueError):
            raise ManifestError(f"{where}: missing or bad field")
        if len(ann.bbox) != 4:
            raise ManifestError(f"{where}: bbox must have 4 entries")
        if ann.id in ann_ids:
            raise ManifestError(f"{where}: duplicate id")
        if ann.image_id not in image_ids:
            raise ManifestError(f"{where}: unknown image_id {ann.image_id}")
        if ann.category_id not in category_ids:
            raise ManifestError(f"{where}: unknown category_id {ann.category_id}")
        ann_ids.add(ann.id)
        annotations.append(ann)

    return AnnotationSet(
        images=images, categories=categories, annotations=annotations, provenance=provenance
    )


def _detections_obj(dset: DetectionSet) -> dict:
    return {
        "detections": [
            {
                "image_id": d.image_id,
                "category_id": d.category_id,
                "segmentation": _mask_obj(d.segmentation),
                "score": d.score,
            }
            for d in dset.detections
        ]
    }


def write_detections(dset: DetectionSet, path) -> None:
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(_detections_obj(dset), separators=(",", ":"), allow_nan=False) + "\n")
    except OSError as exc:
        raise ManifestError(f"cannot write detections {path}: {exc}")


def read_detections(path) -> DetectionSet:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ManifestError(f"cannot read detections {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path} is not valid JSON: {exc}")
    records = raw.get("detections", raw) if isinstance(raw, dict) else raw
    if not isinstance(records, list):
        raise ManifestError(f"{path}: expected a list of detection records")
    dets: list[Detection] = []
    for i, rec in enumerate(records):
        where = f"detection {i}"
        try:
            det = Detection(
                image_id=int(rec["image_id"]),
                category_id=int(rec["category_id"]),
                segmentation=_read_mask(rec["segmentation"], where),
                score=float(rec["score"]),
            )
        except ManifestError:
            raise
        except (KeyError, TypeError, ValueError):
            raise ManifestError(f"{where}: missing or bad field")
        if not 0.0 <= det.score <= 1.0:
            raise ManifestError(f"{where}: score {det.score} outside [0, 1]")
        dets.append(det)
    return DetectionSet(detections=dets)


# ---------------------------------------------------------------------------
# Invariant audit
# ---------------------------------------------------------------------------

def validate(aset: AnnotationSet) -> list[str]:
    """Audit every invariant; returns human-readable violations (empty means
    sound).  Violations are data, not errors."""
    violations: list[str] = []
    image_by_id: dict[int, ImageRecord] = {}
    for im in aset.images:
        if im.id in image_by_id:
            violations.append(f"image {im.id}: duplicate id")
        image_by_id[im.id] = im
        if im.width < 1 or im.height < 1:
            violations.append(f"image {im.id}: non-positive size {im.width}x{im.height}")
    cat_ids = set()
    for cat in aset.categories:
        if cat.id in cat_ids:
            violations.append(f"category {cat.id}: duplicate id")
        cat_ids.add(cat.id)
        if cat.rank not in RANKS:
            violations.append(f"category {cat.id}: unknown rank {cat.rank!r}")
    ann_ids = set()
    for a in aset.annotations:
        where = f"annotation {a.id}"
        if a.id in ann_ids:
            violations.append(f"{where}: duplicate id")
        ann_ids.add(a.id)
        if a.image_id not in image_by_id:
            violations.append(f"{where}: dangling image_id {a.image_id}")
        if a.category_id not in cat_ids:
            violations.append(f"{where}: dangling category_id {a.category_id}")
        if a.iscrowd != 0:
            violations.append(f"{where}: iscrowd must be 0, got {a.iscrowd}")
        if a.visible_fraction is not None and not 0.0 < a.visible_fraction <= 1.0:
            violations.append(
                f"{where}: visible_fraction {a.visible_fraction} outside (0, 1]"
            )
        mask = a.segmentation
        h, w = mask.size
        im = image_by_id.get(a.image_id)
        if im is not None and (h, w) != (im.height, im.width):
            violations.append(
                f"{where}: mask frame {h}x{w} does not match image {im.height}x{im.width}"
            )
        runs = mask.rle
        if len(runs) == 0 or any(r < 0 for r in runs):
            violations.append(f"{where}: malformed RLE (negative or empty runs)")
            continue
        if any(r == 0 for r in runs[1:]):
            violations.append(f"{where}: malformed RLE (zero-length interior run)")
            continue
        if sum(runs) != h * w:
            violations.append(
                f"{where}: malformed RLE (runs sum to {sum(runs)}, frame is {h * w})"
            )
            continue
        true_mask = InstanceMask.from_intervals((h, w), ones_intervals(mask))
        if true_mask.area < 1:
            violations.append(f"{where}: empty mask (area 0) stored")
        if a.area != true_mask.area:
            violations.append(
                f"{where}: area {a.area} does not match mask area {true_mask.area}"
            )
        if tuple(a.bbox) != true_mask.bbox:
            violations.append(
                f"{where}: bbox {tuple(a.bbox)} is not tight (expected {true_mask.bbox})"
            )
    return violations
