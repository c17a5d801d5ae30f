"""Brute-force differential oracle for the evaluator.

A deliberately naive re-implementation of the scoring protocol: every mask
is decoded to a full bitmap, every pairwise IoU is recomputed from pixel
counts, and the matching and 101-point precision integral are re-derived
from scratch in plain loops.  It shares the result container and config with
:mod:`planksynth.evaluator` but none of the computation, and it refuses
anything bigger than a test-sized scene.
"""

from __future__ import annotations

import numpy as np

from .dataset_io import AnnotationSet, Detection, DetectionSet
from .errors import ConfigError, ManifestError
from .evaluator import EvalConfig, EvalResult, MatchRecord

__all__ = ["oracle_evaluate", "ORACLE_MAX_INSTANCES"]

ORACLE_MAX_INSTANCES = 32


def _bitmap(mask) -> np.ndarray:
    return mask.decode()


def _pixel_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = int(np.logical_and(a, b).sum())
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 0.0
    return inter / union


def oracle_evaluate(
    dets: DetectionSet | list[Detection],
    gts: AnnotationSet,
    cfg: EvalConfig = EvalConfig(),
) -> EvalResult:
    det_list = list(dets.detections if isinstance(dets, DetectionSet) else dets)
    image_ids = sorted({im.id for im in gts.images})
    unknown = sorted({d.image_id for d in det_list} - set(image_ids))
    if unknown:
        raise ManifestError(f"detections reference unknown image ids: {unknown}")

    gts_per_image: dict[int, list] = {i: [] for i in image_ids}
    for a in gts.annotations:
        gts_per_image[a.image_id].append(a)
    dets_per_image: dict[int, list[Detection]] = {i: [] for i in image_ids}
    for d in det_list:
        dets_per_image[d.image_id].append(d)
    for i in image_ids:
        if len(gts_per_image[i]) > ORACLE_MAX_INSTANCES or len(dets_per_image[i]) > ORACLE_MAX_INSTANCES:
            raise ConfigError(
                f"oracle_evaluate is a test oracle: image {i} exceeds "
                f"{ORACLE_MAX_INSTANCES} instances"
            )

    def cat_of(c):
        return 0 if cfg.class_agnostic else c

    # canonical order and ids, independently rebuilt
    canon: dict[int, list[tuple[Detection, int, np.ndarray]]] = {}
    counter = 0
    for i in image_ids:
        ds = sorted(
            dets_per_image[i],
            key=lambda d: (-d.score, cat_of(d.category_id), d.segmentation.size, d.segmentation.rle),
        )[: cfg.max_detections_per_image]
        rows = []
        for d in ds:
            rows.append((d, counter, _bitmap(d.segmentation)))
            counter += 1
        canon[i] = rows

    gt_bitmaps: dict[int, list[np.ndarray]] = {
        i: [_bitmap(a.segmentation) for a in gts_per_image[i]] for i in image_ids
    }

    categories = sorted({cat_of(a.category_id) for a in gts.annotations})
    lo, hi = cfg.size_buckets

    def in_bucket(area, bucket):
        if bucket == "all":
            return True
        if bucket == "small":
            return area < lo
        if bucket == "medium":
            return lo <= area <= hi
        return area > hi

    thresholds = list(cfg.iou_thresholds)
    recall_points = [i / 100.0 for i in range(101)]

    def ap_for(cat, bucket, tau, collect=None):
        pooled = []  # (score, det_id, is_tp)
        n_active = 0
        for i in image_ids:
            img_gts = [a for a in gts_per_image[i] if cat_of(a.category_id) == cat]
            img_gt_maps = [
                m
                for a, m in zip(gts_per_image[i], gt_bitmaps[i])
                if cat_of(a.category_id) == cat
            ]
            img_dets = [
                (d, ident, m)
                for d, ident, m in canon[i]
                if cat_of(d.category_id) == cat
            ]
            gt_ignore = [not in_bucket(a.area, bucket) for a in img_gts]
            n_active += gt_ignore.count(False)
            order = [k for k in range(len(img_gts)) if not gt_ignore[k]] + [
                k for k in range(len(img_gts)) if gt_ignore[k]
            ]
            taken = set()
            for d, ident, dmap in img_dets:
                best = -1
                best_iou = min(tau, 1.0 - 1e-10)
                for k in order:
                    if k in taken:
                        continue
                    if best > -1 and not gt_ignore[best] and gt_ignore[k]:
                        break
                    v = _pixel_iou(dmap, img_gt_maps[k])
                    if v < best_iou:
                        continue
                    best_iou = v
                    best = k
                if best > -1:
                    taken.add(best)
                    if gt_ignore[best]:
                        continue  # absorbed, neither TP nor FP
                    pooled.append((d.score, ident, True))
                    if collect is not None:
                        collect.append(
                            MatchRecord(
                                image_id=i,
                                category_id=cat,
                                det_id=ident,
                                gt_id=img_gts[best].id,
                                iou=best_iou,
                                score=d.score,
                            )
                        )
                else:
                    det_area = int(dmap.sum())
                    if in_bucket(det_area, bucket):
                        pooled.append((d.score, ident, False))
        if n_active == 0:
            return None
        if not pooled:
            return 0.0
        pooled.sort(key=lambda row: (-row[0], row[1]))
        tp_cum = 0
        fp_cum = 0
        recalls = []
        precisions = []
        for score, ident, is_tp in pooled:
            if is_tp:
                tp_cum += 1
            else:
                fp_cum += 1
            recalls.append(tp_cum / n_active)
            precisions.append(tp_cum / (tp_cum + fp_cum))
        for k in range(len(precisions) - 2, -1, -1):
            if precisions[k] < precisions[k + 1]:
                precisions[k] = precisions[k + 1]
        total = 0.0
        for r in recall_points:
            # first pooled index whose recall reaches r
            pick = 0.0
            for k, rc in enumerate(recalls):
                if rc >= r:
                    pick = precisions[k]
                    break
            total += pick
        return total / len(recall_points)

    matches: list[MatchRecord] = []

    def averaged(bucket, tau=None, collect=None):
        taus = thresholds if tau is None else [tau]
        per_tau = []
        for t in taus:
            vals = []
            for cat in categories:
                ap = ap_for(cat, bucket, t, collect=collect if t == thresholds[0] else None)
                if ap is not None:
                    vals.append(ap)
            per_tau.append(sum(vals) / len(vals) if vals else None)
        present = [v for v in per_tau if v is not None]
        if tau is not None:
            return per_tau[0]
        if not present:
            return None
        return sum(present) / len(present)

    per_threshold = {}
    for t in thresholds:
        per_threshold[t] = averaged("all", tau=t, collect=matches if t == thresholds[0] else None)
    present = [v for v in per_threshold.values() if v is not None]
    return EvalResult(
        map=(sum(present) / len(present)) if present else None,
        ap50=per_threshold.get(0.5),
        ap_s=averaged("small"),
        ap_m=averaged("medium"),
        ap_l=averaged("large"),
        per_threshold=per_threshold,
        matches=matches,
    )
