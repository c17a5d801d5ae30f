"""COCO-style instance segmentation scoring.

IoU is pixel-set intersection over union.  AP follows the COCO reference
protocol: greedy highest-IoU matching per image in score order, a global
precision-recall staircase with the precision envelope made non-increasing
from the right, sampled at 101 recall points.  mAP averages AP over the IoU
thresholds 0.50:0.05:0.95; AP50 is the 0.50 column; AP_S/M/L re-run the
matching with out-of-bucket ground truths flagged ignore (they absorb
detections without producing TP or FP, and unmatched out-of-bucket
detections are discarded rather than counted as FP).

Detections are re-ordered internally by (-score, category, mask bytes), and
tie-breaking ids are assigned from that canonical order, so results are
invariant under any permutation of the input.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .dataset_io import Annotation, AnnotationSet, Detection, DetectionSet
from .errors import ConfigError, ManifestError
from .raster import InstanceMask, ones_intervals

__all__ = [
    "DEFAULT_IOU_THRESHOLDS",
    "EvalConfig",
    "EvalResult",
    "MatchRecord",
    "iou",
    "match_instances",
    "average_precision",
    "evaluate",
]

# Built from short decimal literals so that e.g. an IoU of exactly 6/10
# compares >= the 0.60 threshold.
DEFAULT_IOU_THRESHOLDS: tuple[float, ...] = tuple(
    round(0.50 + 0.05 * i, 2) for i in range(10)
)


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple[float, ...] = DEFAULT_IOU_THRESHOLDS
    # Areas below the first bound are small, above the second large, and the
    # closed interval between them medium (the bounds themselves are medium).
    size_buckets: tuple[int, int] = (32 ** 2, 96 ** 2)
    class_agnostic: bool = False
    max_detections_per_image: int = 100

    def __post_init__(self):
        ts = tuple(self.iou_thresholds)
        if not ts or any(not 0.0 < t <= 1.0 for t in ts):
            raise ConfigError(f"iou thresholds must lie in (0, 1], got {ts}")
        if any(b >= a for a, b in zip(ts[1:], ts)):
            raise ConfigError(f"iou thresholds must be strictly increasing, got {ts}")
        lo, hi = self.size_buckets
        if not 0 < lo <= hi:
            raise ConfigError(f"size buckets must satisfy 0 < small <= large, got {self.size_buckets}")
        if self.max_detections_per_image < 1:
            raise ConfigError("max_detections_per_image must be >= 1")


class MatchRecord(NamedTuple):
    image_id: int
    category_id: int
    det_id: int
    gt_id: int
    iou: float
    score: float


@dataclass
class EvalResult:
    map: float | None
    ap50: float | None
    ap_s: float | None
    ap_m: float | None
    ap_l: float | None
    per_threshold: dict[float, float | None]
    matches: list[MatchRecord] = field(default_factory=list)


# ---------------------------------------------------------------------------
# IoU on RLE intervals (no full decode)
# ---------------------------------------------------------------------------

def _interval_list(mask: InstanceMask) -> list[tuple[int, int]]:
    return [(int(s), int(e)) for s, e in ones_intervals(mask)]


def _intersection_area(a: list[tuple[int, int]], b: list[tuple[int, int]]) -> int:
    total = 0
    i = j = 0
    na, nb = len(a), len(b)
    while i < na and j < nb:
        s = a[i][0] if a[i][0] > b[j][0] else b[j][0]
        e = a[i][1] if a[i][1] < b[j][1] else b[j][1]
        if e > s:
            total += e - s
        if a[i][1] <= b[j][1]:
            i += 1
        else:
            j += 1
    return total


def iou(p: InstanceMask, g: InstanceMask) -> float:
    """Intersection over union of two masks sharing one frame; 0 when both
    are empty (empty instances are forbidden upstream)."""
    if p.size != g.size:
        raise ValueError(f"masks live in different frames: {p.size} vs {g.size}")
    pa = _interval_list(p)
    ga = _interval_list(g)
    ap = sum(e - s for s, e in pa)
    ag = sum(e - s for s, e in ga)
    inter = _intersection_area(pa, ga)
    union = ap + ag - inter
    if union == 0:
        return 0.0
    return inter / union


# ---------------------------------------------------------------------------
# Matching
# ---------------------------------------------------------------------------

def _in_range(area: int, area_range: tuple[int, int] | None) -> bool:
    if area_range is None:
        return True
    lo, hi = area_range
    return lo <= area <= hi


def _greedy_match(
    iou_matrix: Sequence[Sequence[float]],
    det_areas: Sequence[int],
    gt_areas: Sequence[int],
    tau: float,
    area_range: tuple[int, int] | None,
) -> tuple[list[int], list[bool], list[bool]]:
    """One image, one category pool.  Detections are assumed sorted by
    (-score, id).  Returns (det_to_gt indices with -1 for unmatched,
    det_ignore, gt_ignore)."""
    n_gt = len(gt_areas)
    gt_ignore = [not _in_range(a, area_range) for a in gt_areas]
    # active ground truths first, stable within each group
    gt_order = sorted(range(n_gt), key=lambda k: gt_ignore[k])
    gt_matched = [False] * n_gt
    det_to_gt: list[int] = []
    det_ignore: list[bool] = []
    floor = min(tau, 1.0 - 1e-10)
    for d, row in enumerate(iou_matrix):
        best = -1
        best_iou = floor
        for k in gt_order:
            if gt_matched[k]:
                continue
            # beyond this point only ignored gts remain; a real match stands
            if best > -1 and not gt_ignore[best] and gt_ignore[k]:
                break
            v = row[k]
            if v < best_iou:
                continue
            best_iou = v
            best = k
        if best > -1:
            gt_matched[best] = True
        det_to_gt.append(best)
        if best > -1:
            det_ignore.append(gt_ignore[best])
        else:
            det_ignore.append(not _in_range(det_areas[d], area_range))
    return det_to_gt, det_ignore, gt_ignore


def match_instances(
    dets: Sequence[Detection],
    gts: Sequence[Annotation],
    tau: float,
    cfg: EvalConfig = EvalConfig(),
    area_range: tuple[int, int] | None = None,
) -> tuple[list[int], list[bool], list[bool]]:
    """Greedy matching for the instances of one image.

    ``dets`` must already be sorted by score descending (ties by position).
    Each detection takes the unmatched ground truth with the highest IoU
    >= ``tau`` (same category unless ``cfg.class_agnostic``); each ground
    truth is matched at most once.
    """
    det_ivals = [_interval_list(d.segmentation) for d in dets]
    gt_ivals = [_interval_list(g.segmentation) for g in gts]
    det_areas = [sum(e - s for s, e in iv) for iv in det_ivals]
    matrix = []
    for d, det in enumerate(dets):
        row = []
        for g, gt in enumerate(gts):
            if not cfg.class_agnostic and det.category_id != gt.category_id:
                row.append(0.0)
                continue
            ga = sum(e - s for s, e in gt_ivals[g])
            inter = _intersection_area(det_ivals[d], gt_ivals[g])
            union = det_areas[d] + ga - inter
            row.append(inter / union if union else 0.0)
        matrix.append(row)
    return _greedy_match(matrix, det_areas, [g.area for g in gts], tau, area_range)


# ---------------------------------------------------------------------------
# Average precision
# ---------------------------------------------------------------------------

# Each point is the single-rounding float of i/100 so that rational recalls
# like 1/2 compare equal to their decimal grid point.
_RECALL_POINTS = np.array([i / 100.0 for i in range(101)])


def average_precision(
    scores: np.ndarray, det_ids: np.ndarray, is_tp: np.ndarray, n_gt: int
) -> float | None:
    """101-point interpolated AP over a pooled set of non-ignored detections.

    Returns None (absent) when there are no active ground truths.
    """
    if n_gt == 0:
        return None
    if scores.size == 0:
        return 0.0
    order = np.lexsort((det_ids, -scores))
    tp = is_tp[order]
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(~tp)
    recall = tp_cum / n_gt
    precision = tp_cum / (tp_cum + fp_cum)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    inds = np.searchsorted(recall, _RECALL_POINTS, side="left")
    q = np.zeros(_RECALL_POINTS.size)
    valid = inds < recall.size
    q[valid] = precision[inds[valid]]
    return float(q.mean())


# ---------------------------------------------------------------------------
# Full evaluation
# ---------------------------------------------------------------------------

class _Entry(NamedTuple):
    ident: int  # canonical detection id / annotation id
    score: float
    area: int
    intervals: list[tuple[int, int]]


def _canonical_detections(
    det_list: list[Detection], cfg: EvalConfig, image_ids: list[int]
) -> dict[int, list[tuple[Detection, int]]]:
    """Sort detections per image by (-score, category, mask) and assign
    canonical ids in that order; truncate to max_detections_per_image."""
    by_image: dict[int, list[Detection]] = {i: [] for i in image_ids}
    for d in det_list:
        by_image[d.image_id].append(d)
    out: dict[int, list[tuple[Detection, int]]] = {}
    next_id = 0
    for img_id in image_ids:
        ds = sorted(
            by_image[img_id],
            key=lambda d: (-d.score, d.category_id, d.segmentation.size, d.segmentation.rle),
        )
        ds = ds[: cfg.max_detections_per_image]
        numbered = []
        for d in ds:
            numbered.append((d, next_id))
            next_id += 1
        out[img_id] = numbered
    return out


def evaluate(
    dets: DetectionSet | Sequence[Detection],
    gts: AnnotationSet,
    cfg: EvalConfig = EvalConfig(),
) -> EvalResult:
    """Score a detection set against ground truth.

    Class-aware mode averages AP over the categories that have at least one
    ground truth before averaging over thresholds; class-agnostic mode
    collapses every category first.  AP_S/M/L and any per-category AP with no
    ground truths in scope come back absent (None) rather than zero.
    """
    det_list = list(dets.detections if isinstance(dets, DetectionSet) else dets)
    image_ids = sorted({im.id for im in gts.images})
    unknown = sorted({d.image_id for d in det_list} - set(image_ids))
    if unknown:
        raise ManifestError(f"detections reference unknown image ids: {unknown}")

    def cat_of(c: int) -> int:
        return 0 if cfg.class_agnostic else c

    if cfg.class_agnostic:
        det_list = [
            Detection(d.image_id, 0, d.segmentation, d.score) for d in det_list
        ]

    canonical = _canonical_detections(det_list, cfg, image_ids)

    gt_pool: dict[tuple[int, int], list[Annotation]] = {}
    for a in gts.annotations:
        gt_pool.setdefault((a.image_id, cat_of(a.category_id)), []).append(a)
    det_pool: dict[tuple[int, int], list[tuple[Detection, int]]] = {}
    for img_id in image_ids:
        for d, ident in canonical[img_id]:
            det_pool.setdefault((img_id, d.category_id), []).append((d, ident))

    categories = sorted({key[1] for key in gt_pool})
    groups = sorted(set(gt_pool) | set(det_pool))

    # Per-group entries and IoU matrices, computed once and reused across
    # thresholds and size buckets.
    det_entries: dict[tuple[int, int], list[_Entry]] = {}
    gt_entries: dict[tuple[int, int], list[_Entry]] = {}
    matrices: dict[tuple[int, int], list[list[float]]] = {}
    for key in groups:
        d_ent = []
        for d, ident in det_pool.get(key, []):
            iv = _interval_list(d.segmentation)
            d_ent.append(_Entry(ident, d.score, sum(e - s for s, e in iv), iv))
        g_ent = []
        for a in gt_pool.get(key, []):
            g_ent.append(_Entry(a.id, 1.0, a.area, _interval_list(a.segmentation)))
        det_entries[key] = d_ent
        gt_entries[key] = g_ent
        matrix = []
        for de in d_ent:
            row = []
            for ge in g_ent:
                ga = sum(e - s for s, e in ge.intervals)
                inter = _intersection_area(de.intervals, ge.intervals)
                union = de.area + ga - inter
                row.append(inter / union if union else 0.0)
            matrix.append(row)
        matrices[key] = matrix

    lo, hi = cfg.size_buckets
    buckets: dict[str, tuple[int, int] | None] = {
        "all": None,
        "small": (0, lo - 1),
        "medium": (lo, hi),
        "large": (hi + 1, np.iinfo(np.int64).max),
    }

    thresholds = tuple(cfg.iou_thresholds)
    matches: list[MatchRecord] = []

    def _ap_table(area_range, record_matches_at: float | None = None):
        """AP per (threshold, category); None where the category has no
        active ground truths."""
        table: dict[float, dict[int, float | None]] = {t: {} for t in thresholds}
        for cat in categories:
            pooled: dict[float, tuple[list, list, list]] = {
                t: ([], [], []) for t in thresholds
            }
            n_active = 0
            for key in groups:
                if key[1] != cat:
                    continue
                d_ent = det_entries[key]
                g_ent = gt_entries[key]
                matrix = matrices[key]
                gt_areas = [g.area for g in g_ent]
                det_areas = [d.area for d in d_ent]
                n_active += sum(1 for a in gt_areas if _in_range(a, area_range))
                for t in thresholds:
                    det_to_gt, det_ignore, gt_ignore = _greedy_match(
                        matrix, det_areas, gt_areas, t, area_range
                    )
                    scores, ids, tps = pooled[t]
                    for d, (g, ign) in enumerate(zip(det_to_gt, det_ignore)):
                        if ign:
                            continue
                        scores.append(d_ent[d].score)
                        ids.append(d_ent[d].ident)
                        tps.append(g > -1)
                    if record_matches_at is not None and t == record_matches_at:
                        for d, g in enumerate(det_to_gt):
                            if g > -1:
                                matches.append(
                                    MatchRecord(
                                        image_id=key[0],
                                        category_id=cat,
                                        det_id=d_ent[d].ident,
                                        gt_id=g_ent[g].ident,
                                        iou=matrix[d][g],
                                        score=d_ent[d].score,
                                    )
                                )
            for t in thresholds:
                scores, ids, tps = pooled[t]
                table[t][cat] = average_precision(
                    np.asarray(scores, dtype=np.float64),
                    np.asarray(ids, dtype=np.int64),
                    np.asarray(tps, dtype=bool),
                    n_active,
                )
        return table

    def _mean_over_cats(per_cat: dict[int, float | None]) -> float | None:
        vals = [v for v in per_cat.values() if v is not None]
        if not vals:
            return None
        return float(np.mean(vals))

    def _mean_over_thresholds(table) -> float | None:
        vals = [_mean_over_cats(table[t]) for t in thresholds]
        present = [v for v in vals if v is not None]
        if not present:
            return None
        return float(np.mean(present))

    all_table = _ap_table(buckets["all"], record_matches_at=thresholds[0])
    per_threshold = {t: _mean_over_cats(all_table[t]) for t in thresholds}
    result = EvalResult(
        map=_mean_over_thresholds(all_table),
        ap50=per_threshold.get(0.5),
        ap_s=_mean_over_thresholds(_ap_table(buckets["small"])),
        ap_m=_mean_over_thresholds(_ap_table(buckets["medium"])),
        ap_l=_mean_over_thresholds(_ap_table(buckets["large"])),
        per_threshold=per_threshold,
        matches=matches,
    )
    return result
