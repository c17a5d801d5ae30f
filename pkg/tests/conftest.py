"""Shared fixtures: a 16-family taxonomy and synthetic source pools."""

import numpy as np
import pytest

from planksynth.pcigen import Individual, SourcePools
from planksynth.raster import rle_encode
from planksynth.taxonomy import Taxon, TaxonomyTable

# ids: classes 601..603, orders 501..506, families 1..16, genus 701, species 801
CLASS_IDS = (601, 602, 603)
ORDER_IDS = (501, 502, 503, 504, 505, 506)
FAMILY_IDS = tuple(range(1, 17))


def build_taxonomy16() -> TaxonomyTable:
    taxa = [Taxon(cid, f"Class{cid}", "Class") for cid in CLASS_IDS]
    for i, oid in enumerate(ORDER_IDS):
        taxa.append(Taxon(oid, f"Order{oid}", "Order", parent_id=CLASS_IDS[i // 2]))
    for i, fid in enumerate(FAMILY_IDS):
        taxa.append(Taxon(fid, f"Family{fid}", "Family", parent_id=ORDER_IDS[i % 6]))
    taxa.append(Taxon(701, "GenusX", "Genus", parent_id=1))
    taxa.append(Taxon(801, "SpeciesY", "Species", parent_id=701))
    return TaxonomyTable(taxa)


@pytest.fixture(scope="session")
def taxonomy16() -> TaxonomyTable:
    return build_taxonomy16()


def elliptical_cutout(rng, side_range=(24, 80), value_range=(110, 250)):
    """One bright elliptical blob on its own tight frame."""
    s = int(rng.integers(*side_range))
    img = rng.integers(value_range[0], value_range[1], (s, s)).astype(np.uint8)
    yy, xx = np.mgrid[0:s, 0:s]
    mask = (xx - s / 2) ** 2 / (s / 2) ** 2 + (yy - s / 2) ** 2 / (s / 2.8) ** 2 <= 1
    if not mask.any():
        mask[s // 2, s // 2] = True
    return img, mask


def smooth_background(shape, phase=0.0, base=25.0, amp=20.0):
    """Defocused-looking background: a smooth low-frequency field."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    field = base + amp * np.sin(xx / 400.0 + phase) * np.cos(yy / 300.0 - phase)
    return np.clip(field, 0, 255).astype(np.uint8)


def build_pools(
    taxonomy,
    canvas=(256, 256),
    n_backgrounds=3,
    n_individuals=12,
    side_range=(24, 80),
    seed=2024,
    family_ids=FAMILY_IDS,
) -> SourcePools:
    rng = np.random.default_rng(seed)
    cw, ch = canvas
    backgrounds = [smooth_background((ch, cw), phase=0.7 * b) for b in range(n_backgrounds)]
    individuals = []
    for k in range(n_individuals):
        img, mask = elliptical_cutout(rng, side_range=side_range)
        individuals.append(
            Individual(
                image=img,
                mask=rle_encode(mask),
                taxon_id=family_ids[k % len(family_ids)],
            )
        )
    return SourcePools(backgrounds=backgrounds, individuals=individuals, taxonomy=taxonomy)


@pytest.fixture(scope="session")
def pools_small(taxonomy16) -> SourcePools:
    return build_pools(taxonomy16, canvas=(256, 256), side_range=(18, 48))


def random_eval_scene(rng, frame=64, max_images=5, max_instances=8):
    """Random gt + detections over tiny frames for differential scoring runs."""
    from planksynth.dataset_io import (
        AnnotationSet,
        CategoryRecord,
        Detection,
        ImageRecord,
        annotation_for_mask,
    )

    n_img = int(rng.integers(1, max_images + 1))
    images = [ImageRecord(i, f"{i}.png", frame, frame) for i in range(n_img)]
    cats = list(range(1, int(rng.integers(1, 4)) + 1))
    categories = [CategoryRecord(c, f"c{c}", "Family", None) for c in cats]

    def rand_mask():
        kind = rng.integers(3)
        m = np.zeros((frame, frame), bool)
        if kind == 0:
            x0, y0 = rng.integers(0, frame - 2, 2)
            m[y0 : y0 + int(rng.integers(2, 40)), x0 : x0 + int(rng.integers(2, 40))] = True
        elif kind == 1:
            cx, cy, r = rng.integers(0, frame), rng.integers(0, frame), rng.integers(1, 20)
            yy, xx = np.mgrid[0:frame, 0:frame]
            m = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        else:
            m = rng.random((frame, frame)) < 0.02
        if not m.any():
            m[rng.integers(frame), rng.integers(frame)] = True
        return rle_encode(m)

    anns, dets = [], []
    ann_id = 1
    for i in range(n_img):
        for _ in range(int(rng.integers(0, max_instances + 1))):
            anns.append(annotation_for_mask(ann_id, i, int(rng.choice(cats)), rand_mask()))
            ann_id += 1
        for _ in range(int(rng.integers(0, max_instances + 1))):
            dets.append(
                Detection(i, int(rng.choice(cats)), rand_mask(), float(np.round(rng.random(), 2)))
            )
    return dets, AnnotationSet(images=images, categories=categories, annotations=anns)
