"""Tiled inference over very large microscope frames.

Large captures are cropped into fixed-size overlapping patches, per-patch
detections are lifted back to global coordinates, and duplicates at patch
seams are merged by greedy score-ordered IoU clustering with mask union (the
integration step of the evaluation protocol; the merge can also be skipped
to let the evaluator's matching absorb duplicates).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .dataset_io import Detection, DetectionSet
from .errors import ConfigError, ManifestError
from .raster import InstanceMask, ones_intervals

__all__ = [
    "TilePlan",
    "MergeConfig",
    "plan_tiles",
    "crop",
    "lift_detections",
    "merge_detections",
    "write_tile_plan",
    "read_tile_plan",
]


@dataclass(frozen=True)
class TilePlan:
    image_size: tuple[int, int]  # (width, height)
    tile: int
    overlap: int
    origins: tuple[tuple[int, int], ...]  # (x, y), strictly increasing

    @property
    def tile_width(self) -> int:
        return min(self.tile, self.image_size[0])

    @property
    def tile_height(self) -> int:
        return min(self.tile, self.image_size[1])


@dataclass(frozen=True)
class MergeConfig:
    iou_merge_threshold: float = 0.5
    score_rule: str = "keep-max"

    def __post_init__(self):
        if not 0.0 < self.iou_merge_threshold <= 1.0:
            raise ConfigError(
                f"iou_merge_threshold must lie in (0, 1], got {self.iou_merge_threshold}"
            )
        if self.score_rule != "keep-max":
            raise ConfigError(f"unsupported score rule {self.score_rule!r}")


def _axis_origins(length: int, tile: int, overlap: int) -> list[int]:
    t = min(tile, length)
    stride = tile - overlap
    origins = []
    k = 0
    while k * stride + t <= length:
        origins.append(k * stride)
        k += 1
    if origins[-1] + t < length:
        origins.append(length - t)
    return origins


def plan_tiles(
    image_w: int, image_h: int, tile: int = 1000, overlap: int = 200
) -> TilePlan:
    """Plan fixed-size overlapping tiles covering every pixel.

    Origins step by ``tile - overlap``; the final origin per axis is clamped
    so edge tiles stay inside the image instead of padding past it.  Images
    smaller than the tile get a single full-image tile along that axis.
    """
    if overlap < 0 or tile <= overlap:
        raise ConfigError(f"need tile > overlap >= 0, got tile={tile} overlap={overlap}")
    if image_w < 1 or image_h < 1:
        raise ConfigError(f"image must be at least 1x1, got {image_w}x{image_h}")
    xs = _axis_origins(image_w, tile, overlap)
    ys = _axis_origins(image_h, tile, overlap)
    origins = tuple((x, y) for x in xs for y in ys)
    return TilePlan(image_size=(image_w, image_h), tile=tile, overlap=overlap, origins=origins)


def crop(img: np.ndarray, plan: TilePlan) -> Iterator[tuple[tuple[int, int], np.ndarray]]:
    """Yield ``((x, y), tile_raster)`` for every planned origin."""
    h, w = img.shape[:2]
    if (w, h) != plan.image_size:
        raise ConfigError(f"plan is for {plan.image_size}, image is {(w, h)}")
    tw, th = plan.tile_width, plan.tile_height
    for x, y in plan.origins:
        yield (x, y), img[y : y + th, x : x + tw].copy()


def lift_detections(
    dets: DetectionSet | Sequence[Detection],
    origin: tuple[int, int],
    image_size: tuple[int, int],
    image_id: int | None = None,
) -> DetectionSet:
    """Re-embed tile-frame detection masks at global image coordinates.

    Scores and categories pass through; set ``image_id`` to relabel the
    lifted detections (per-tile files usually key them by tile index).
    """
    det_list = list(dets.detections if isinstance(dets, DetectionSet) else dets)
    ox, oy = origin
    width, height = image_size
    out = []
    for d in det_list:
        th, tw = d.segmentation.size
        if ox < 0 or oy < 0 or ox + tw > width or oy + th > height:
            raise ConfigError(
                f"tile frame {tw}x{th} at origin {origin} exceeds image {width}x{height}"
            )
        bitmap = d.segmentation.decode()
        ys, xs = np.nonzero(bitmap)
        linear = np.sort((xs.astype(np.int64) + ox) * height + (ys.astype(np.int64) + oy))
        mask = InstanceMask.from_indices((height, width), linear)
        out.append(
            Detection(
                image_id=d.image_id if image_id is None else image_id,
                category_id=d.category_id,
                segmentation=mask,
                score=d.score,
            )
        )
    return DetectionSet(detections=out)


def _intersection(a: np.ndarray, b: np.ndarray) -> int:
    total = 0
    i = j = 0
    while i < len(a) and j < len(b):
        s = max(a[i][0], b[j][0])
        e = min(a[i][1], b[j][1])
        if e > s:
            total += int(e - s)
        if a[i][1] <= b[j][1]:
            i += 1
        else:
            j += 1
    return total


def _merge_pass(det_list: list[Detection], threshold: float) -> list[Detection]:
    ivals = [ones_intervals(d.segmentation) for d in det_list]
    areas = [int((iv[:, 1] - iv[:, 0]).sum()) if iv.size else 0 for iv in ivals]
    # Score-descending greedy; among equal scores the largest mask seeds
    # first so that seam fragments cluster onto the whole object.
    order = sorted(range(len(det_list)), key=lambda i: (-det_list[i].score, -areas[i]))
    clusters: list[dict] = []
    for i in order:
        joined = False
        for cl in clusters:
            rep = cl["rep"]
            inter = _intersection(rep, ivals[i])
            union = cl["rep_area"] + areas[i] - inter
            if union > 0 and inter / union >= threshold:
                cl["members"].append(ivals[i])
                joined = True
                break
        if not joined:
            clusters.append(
                {
                    "rep": ivals[i],
                    "rep_area": areas[i],
                    "members": [ivals[i]],
                    "seed": det_list[i],
                }
            )
    frame = det_list[0].segmentation.size
    out = []
    for cl in clusters:
        merged = np.concatenate(cl["members"], axis=0)
        mask = InstanceMask.from_intervals(frame, merged)
        seed = cl["seed"]
        out.append(
            Detection(
                image_id=seed.image_id,
                category_id=seed.category_id,
                segmentation=mask,
                score=seed.score,
            )
        )
    return out


def merge_detections(
    dets: DetectionSet | Sequence[Detection], cfg: MergeConfig = MergeConfig()
) -> DetectionSet:
    """Deduplicate one image's detections at tile seams.

    Greedy agglomeration in score order: a detection joins the first cluster
    whose representative (seed) mask overlaps it with IoU >= threshold,
    otherwise it seeds a new cluster.  A cluster emits the pixel union of its
    members with the seed's score and category.  The pass repeats until
    nothing merges, which makes the operation idempotent.  Output comes back
    score-descending.
    """
    det_list = list(dets.detections if isinstance(dets, DetectionSet) else dets)
    if not det_list:
        return DetectionSet(detections=[])
    frames = {d.segmentation.size for d in det_list}
    if len(frames) != 1:
        raise ConfigError(f"detections span multiple frames: {sorted(frames)}")
    images = {d.image_id for d in det_list}
    if len(images) != 1:
        raise ConfigError(f"merge_detections expects one image, got ids {sorted(images)}")
    merged = _merge_pass(det_list, cfg.iou_merge_threshold)
    while len(merged) < len(det_list):
        det_list = merged
        merged = _merge_pass(det_list, cfg.iou_merge_threshold)
    return DetectionSet(detections=merged)


# ---------------------------------------------------------------------------
# Plan files
# ---------------------------------------------------------------------------

def write_tile_plan(plan: TilePlan, path) -> None:
    obj = {
        "image_width": plan.image_size[0],
        "image_height": plan.image_size[1],
        "tile": plan.tile,
        "overlap": plan.overlap,
        "origins": [[x, y] for x, y in plan.origins],
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(obj, separators=(",", ":")) + "\n")


def read_tile_plan(path) -> TilePlan:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
        return TilePlan(
            image_size=(int(obj["image_width"]), int(obj["image_height"])),
            tile=int(obj["tile"]),
            overlap=int(obj["overlap"]),
            origins=tuple((int(x), int(y)) for x, y in obj["origins"]),
        )
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"cannot read tile plan {path}: {exc}")
