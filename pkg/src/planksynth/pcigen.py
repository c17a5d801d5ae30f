"""Seeded synthesis of pseudo community images with pixel-exact labels.

Each image index gets its own counter-based random stream keyed by
``(seed, image_index)``, so recipes can be sampled in any order, in
parallel, and replayed byte-for-byte.  A recipe records the background
choice, its flips, the blur sigma, and one placement (individual, flips,
rotation, scale, offset) per pasted individual.  Pasting happens in recipe
order with later individuals occluding earlier ones; emitted masks are
modal (visible pixels only), pairwise disjoint by construction.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from PIL import Image

from . import __version__
from .dataset_io import (
    AnnotationSet,
    CategoryRecord,
    ImageRecord,
    Provenance,
    annotation_for_mask,
    write_manifest,
)
from .errors import ConfigError, DegenerateTransformError, PlanksynthError
from .raster import (
    InstanceMask,
    affine_transform,
    composite,
    gaussian_blur,
    read_png,
    transformed_frame_size,
    write_png,
)
from .taxonomy import TaxonomyTable

__all__ = [
    "PciConfig",
    "Placement",
    "PciRecipe",
    "Individual",
    "SourcePools",
    "load_source_pools",
    "sample_recipe",
    "synthesize",
    "generate_dataset",
    "SynthLabel",
    "recipe_digest",
    "config_digest",
]

_MASK64 = (1 << 64) - 1
_MAX_REDRAWS = 20


@dataclass(frozen=True)
class PciConfig:
    canvas: tuple[int, int] = (1000, 1000)  # (width, height)
    count_range: tuple[int, int] = (6, 10)  # inclusive
    sigma_range: tuple[float, float] = (0.0, 2.0)  # half-open
    rotation_range: tuple[float, float] = (0.0, 360.0)  # half-open, degrees
    scale_range: tuple[float, float] = (0.5, 1.5)
    flip_prob: float = 0.5
    min_visible_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        cw, ch = self.canvas
        if cw < 1 or ch < 1:
            raise ConfigError(f"canvas must be at least 1x1, got {self.canvas}")
        lo, hi = self.count_range
        if lo < 1 or hi < lo:
            raise ConfigError(f"count_range must satisfy 1 <= low <= high, got {self.count_range}")
        if self.sigma_range[0] < 0 or self.sigma_range[1] < self.sigma_range[0]:
            raise ConfigError(f"bad sigma_range {self.sigma_range}")
        if self.scale_range[0] <= 0 or self.scale_range[1] < self.scale_range[0]:
            raise ConfigError(f"scale_range must be a positive interval, got {self.scale_range}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")
        if not 0.0 <= self.min_visible_fraction <= 1.0:
            raise ConfigError(
                f"min_visible_fraction must lie in [0, 1], got {self.min_visible_fraction}"
            )

    def to_dict(self) -> dict:
        return {
            "canvas": list(self.canvas),
            "count_range": list(self.count_range),
            "sigma_range": list(self.sigma_range),
            "rotation_range": list(self.rotation_range),
            "scale_range": list(self.scale_range),
            "flip_prob": self.flip_prob,
            "min_visible_fraction": self.min_visible_fraction,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "PciConfig":
        kwargs = {}
        pairs = {
            "canvas": tuple,
            "count_range": tuple,
            "sigma_range": tuple,
            "rotation_range": tuple,
            "scale_range": tuple,
        }
        for key, conv in pairs.items():
            if key in obj:
                kwargs[key] = conv(obj[key])
        for key in ("flip_prob", "min_visible_fraction"):
            if key in obj:
                kwargs[key] = float(obj[key])
        if "seed" in obj:
            kwargs["seed"] = int(obj["seed"])
        unknown = set(obj) - set(pairs) - {"flip_prob", "min_visible_fraction", "seed"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**kwargs)


@dataclass(frozen=True)
class Placement:
    individual_id: int
    flip_h: bool
    flip_v: bool
    angle: float
    scale: float
    offset: tuple[int, int]


@dataclass(frozen=True)
class PciRecipe:
    image_index: int
    background_id: int
    bg_flip_h: bool
    bg_flip_v: bool
    sigma: float
    placements: tuple[Placement, ...]


@dataclass(frozen=True)
class Individual:
    image: np.ndarray
    mask: InstanceMask
    taxon_id: int


@dataclass
class SourcePools:
    """Source imagery: backgrounds (real and generated, pre-rendered to
    files) and background-removed individual cutouts with their taxon ids.
    The taxonomy table resolves those ids when datasets are labeled."""

    backgrounds: list[np.ndarray] = field(default_factory=list)
    individuals: list[Individual] = field(default_factory=list)
    taxonomy: TaxonomyTable | None = None


class SynthLabel(NamedTuple):
    mask: InstanceMask
    taxon_id: int
    visible_fraction: float


def _rng_for_image(seed: int, image_index: int) -> np.random.Generator:
    key = np.array([seed & _MASK64, image_index & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _draw_placement(rng: np.random.Generator, cfg: PciConfig, pools: SourcePools) -> Placement:
    individual_id = int(rng.integers(len(pools.individuals)))
    flip_h = bool(rng.random() < cfg.flip_prob)
    flip_v = bool(rng.random() < cfg.flip_prob)
    angle = float(rng.uniform(cfg.rotation_range[0], cfg.rotation_range[1]))
    scale = float(rng.uniform(cfg.scale_range[0], cfg.scale_range[1]))
    ind = pools.individuals[individual_id]
    h, w = ind.image.shape[:2]
    tw, th = transformed_frame_size(w, h, angle, scale)
    cw, ch = cfg.canvas
    # any offset that keeps at least one pixel of the transformed frame on
    # the canvas; truncation at the borders is wanted
    ox = int(rng.integers(1 - tw, cw))
    oy = int(rng.integers(1 - th, ch))
    return Placement(individual_id, flip_h, flip_v, angle, scale, (ox, oy))


def _draw_recipe(
    rng: np.random.Generator, cfg: PciConfig, pools: SourcePools, image_index: int
) -> PciRecipe:
    background_id = int(rng.integers(len(pools.backgrounds)))
    bg_flip_h = bool(rng.random() < cfg.flip_prob)
    bg_flip_v = bool(rng.random() < cfg.flip_prob)
    sigma = float(rng.uniform(cfg.sigma_range[0], cfg.sigma_range[1]))
    count = int(rng.integers(cfg.count_range[0], cfg.count_range[1] + 1))
    placements = tuple(_draw_placement(rng, cfg, pools) for _ in range(count))
    return PciRecipe(image_index, background_id, bg_flip_h, bg_flip_v, sigma, placements)


def _check_pools(pools: SourcePools) -> None:
    if not pools.backgrounds or not pools.individuals:
        raise ConfigError("source pools must contain at least one background and one individual")


def sample_recipe(cfg: PciConfig, pools: SourcePools, image_index: int) -> PciRecipe:
    """Draw the full random recipe for one image from its own stream."""
    _check_pools(pools)
    rng = _rng_for_image(cfg.seed, image_index)
    return _draw_recipe(rng, cfg, pools, image_index)


def synthesize(
    recipe: PciRecipe, cfg: PciConfig, pools: SourcePools
) -> tuple[np.ndarray, list[SynthLabel]]:
    """Render one recipe into a community image plus its visible-mask labels.

    The background is flipped then blurred, individuals are transformed and
    pasted in order (later on top).  A degenerate transform (mask scaled
    away) re-draws that placement from the continuation of the image's
    random stream, up to 20 attempts.  Instances whose visible area is zero
    or whose visible fraction falls below the configured floor are dropped
    from the labels.
    """
    _check_pools(pools)
    cw, ch = cfg.canvas
    bg = pools.backgrounds[recipe.background_id]
    if bg.shape[:2] != (ch, cw):
        raise ConfigError(
            f"background {recipe.background_id} is {bg.shape[1]}x{bg.shape[0]}, "
            f"canvas wants {cw}x{ch}"
        )
    img = bg
    if recipe.bg_flip_h:
        img = img[:, ::-1]
    if recipe.bg_flip_v:
        img = img[::-1, :]
    img = gaussian_blur(np.ascontiguousarray(img), recipe.sigma)

    # Position a replay of this image's stream past the recipe draws, so
    # degenerate placements re-draw deterministically from where sampling
    # left off.
    rng = _rng_for_image(cfg.seed, recipe.image_index)
    _draw_recipe(rng, cfg, pools, recipe.image_index)

    owner = np.full((ch, cw), -1, dtype=np.int32)
    placed: list[tuple[Placement, InstanceMask]] = []
    for placement in recipe.placements:
        for _ in range(_MAX_REDRAWS):
            ind = pools.individuals[placement.individual_id]
            try:
                timg, tmask = affine_transform(
                    ind.image,
                    ind.mask,
                    flip_h=placement.flip_h,
                    flip_v=placement.flip_v,
                    angle=placement.angle,
                    scale=placement.scale,
                )
                break
            except DegenerateTransformError:
                placement = _draw_placement(rng, cfg, pools)
        else:
            raise DegenerateTransformError(
                f"image {recipe.image_index}: placement still degenerate "
                f"after {_MAX_REDRAWS} re-draws"
            )
        img, footprint, _ = composite(img, timg, tmask, placement.offset)
        owner[footprint] = len(placed)
        placed.append((placement, tmask))

    labels: list[SynthLabel] = []
    for idx, (placement, tmask) in enumerate(placed):
        ox, oy = placement.offset
        bx, by, bw_, bh_ = tmask.bbox
        x0, y0 = max(ox + bx, 0), max(oy + by, 0)
        x1, y1 = min(ox + bx + bw_, cw), min(oy + by + bh_, ch)
        if x0 >= x1 or y0 >= y1:
            continue
        ys, xs = np.nonzero(owner[y0:y1, x0:x1] == idx)
        visible_area = int(ys.size)
        if visible_area == 0:
            continue
        fraction = visible_area / tmask.area
        if fraction < cfg.min_visible_fraction:
            continue
        linear = np.sort((xs.astype(np.int64) + x0) * ch + (ys.astype(np.int64) + y0))
        mask = InstanceMask.from_indices((ch, cw), linear)
        taxon_id = pools.individuals[placement.individual_id].taxon_id
        labels.append(SynthLabel(mask=mask, taxon_id=taxon_id, visible_fraction=fraction))
    return img, labels


# ---------------------------------------------------------------------------
# Digests
# ---------------------------------------------------------------------------

def _sha256_of(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def config_digest(cfg: PciConfig) -> str:
    return _sha256_of(cfg.to_dict())


def recipe_digest(recipe: PciRecipe) -> str:
    return _sha256_of(
        {
            "image_index": recipe.image_index,
            "background_id": recipe.background_id,
            "bg_flip_h": recipe.bg_flip_h,
            "bg_flip_v": recipe.bg_flip_v,
            "sigma": recipe.sigma,
            "placements": [
                {
                    "individual_id": p.individual_id,
                    "flip_h": p.flip_h,
                    "flip_v": p.flip_v,
                    "angle": p.angle,
                    "scale": p.scale,
                    "offset": list(p.offset),
                }
                for p in recipe.placements
            ],
        }
    )


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------

def generate_dataset(
    cfg: PciConfig,
    pools: SourcePools,
    n_images: int,
    out_dir,
    label_rank: str = "Family",
    jobs: int = 1,
) -> AnnotationSet:
    """Write ``n_images`` PCIs plus one manifest under ``out_dir``.

    Category ids are the taxon ancestors at ``label_rank`` (Family unless an
    ablation overrides it).  The manifest embeds the config (seed included)
    and a digest of every recipe; regenerating with identical inputs yields
    a byte-identical manifest at any ``jobs`` value.
    """
    _check_pools(pools)
    if pools.taxonomy is None:
        raise ConfigError("generate_dataset needs pools.taxonomy to resolve label ranks")
    table = pools.taxonomy
    remap = {
        ind.taxon_id: table.ancestor_at(ind.taxon_id, label_rank)
        for ind in pools.individuals
    }
    categories = {
        anc.id: CategoryRecord(id=anc.id, name=anc.name, rank=anc.rank, parent_id=anc.parent_id)
        for anc in remap.values()
    }

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)

    def build_one(index: int):
        recipe = sample_recipe(cfg, pools, index)
        img, labels = synthesize(recipe, cfg, pools)
        file_name = f"images/{index:06d}.png"
        path = out_dir / file_name
        try:
            write_png(img, path)
        except OSError as exc:
            raise PlanksynthError(f"cannot write image {path}: {exc}")
        return index, file_name, img.shape, recipe_digest(recipe), labels

    indices = range(n_images)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(build_one, indices))
    else:
        results = [build_one(i) for i in indices]
    results.sort(key=lambda row: row[0])

    images = []
    annotations = []
    ann_id = 1
    for index, file_name, shape, digest, labels in results:
        images.append(
            ImageRecord(
                id=index,
                file_name=file_name,
                width=shape[1],
                height=shape[0],
                recipe_digest=digest,
            )
        )
        for label in labels:
            annotations.append(
                annotation_for_mask(
                    ann_id,
                    image_id=index,
                    category_id=remap[label.taxon_id].id,
                    mask=label.mask,
                    visible_fraction=label.visible_fraction,
                )
            )
            ann_id += 1

    aset = AnnotationSet(
        images=images,
        categories=[categories[i] for i in sorted(categories)],
        annotations=annotations,
        provenance=Provenance(
            seed=cfg.seed,
            config=cfg.to_dict(),
            config_digest=config_digest(cfg),
            tool_version=__version__,
        ),
    )
    write_manifest(aset, out_dir / "annotations.json")
    return aset


# ---------------------------------------------------------------------------
# Pool loading
# ---------------------------------------------------------------------------

def _to_mode(img: np.ndarray, mode: str) -> np.ndarray:
    if mode == "L" and img.ndim == 3:
        return np.asarray(Image.fromarray(img).convert("L"), dtype=np.uint8)
    if mode == "RGB" and img.ndim == 2:
        return np.stack([img] * 3, axis=-1)
    return img


def load_source_pools(
    backgrounds_dir,
    individuals_dir,
    taxonomy: TaxonomyTable | None = None,
    canvas: tuple[int, int] | None = None,
    mode: str | None = None,
) -> SourcePools:
    """Load pools from disk.

    Backgrounds are every ``*.png`` in ``backgrounds_dir`` (sorted by name),
    resized to ``canvas`` when given.  ``individuals_dir`` must hold an
    ``individuals.json`` array of ``{"file_name", "mask_file_name"?,
    "taxon_id"}`` records next to the PNGs; the mask defaults to
    ``<stem>_mask.png``.  Cutouts are cropped tight to their mask.  All
    imagery is normalized to one channel layout (``mode`` "L" or "RGB",
    auto-detected when omitted).
    """
    bg_dir = Path(backgrounds_dir)
    ind_dir = Path(individuals_dir)
    bg_paths = sorted(bg_dir.glob("*.png"))
    if not bg_paths:
        raise ConfigError(f"no background PNGs in {bg_dir}")
    backgrounds = [read_png(p) for p in bg_paths]

    listing = ind_dir / "individuals.json"
    try:
        with open(listing, "r", encoding="utf-8") as fh:
            records = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {listing}: {exc}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{listing} is not valid JSON: {exc}")
    if not isinstance(records, list) or not records:
        raise ConfigError(f"{listing} must be a non-empty JSON array")

    raw_individuals = []
    for rec in records:
        try:
            file_name = rec["file_name"]
            taxon_id = int(rec["taxon_id"])
        except (KeyError, TypeError, ValueError):
            raise ConfigError(f"{listing}: bad individual record {rec!r}")
        img = read_png(ind_dir / file_name)
        mask_name = rec.get("mask_file_name", f"{Path(file_name).stem}_mask.png")
        mask_img = read_png(ind_dir / mask_name)
        if mask_img.ndim == 3:
            mask_img = mask_img[..., 0]
        if mask_img.shape != img.shape[:2]:
            raise ConfigError(f"{mask_name}: mask size differs from {file_name}")
        bitmap = mask_img > 0
        if not bitmap.any():
            raise ConfigError(f"{file_name}: individual mask is empty")
        ys, xs = np.nonzero(bitmap)
        y0, y1 = ys.min(), ys.max() + 1
        x0, x1 = xs.min(), xs.max() + 1
        raw_individuals.append((img[y0:y1, x0:x1], bitmap[y0:y1, x0:x1], taxon_id))

    if mode is None:
        any_rgb = any(b.ndim == 3 for b in backgrounds) or any(
            im.ndim == 3 for im, _, _ in raw_individuals
        )
        mode = "RGB" if any_rgb else "L"

    if canvas is not None:
        cw, ch = canvas
        backgrounds = [
            b
            if b.shape[:2] == (ch, cw)
            else np.asarray(
                Image.fromarray(b).resize((cw, ch), Image.BILINEAR), dtype=np.uint8
            )
            for b in backgrounds
        ]
    backgrounds = [_to_mode(b, mode) for b in backgrounds]

    individuals = []
    for img, bitmap, taxon_id in raw_individuals:
        if taxonomy is not None and taxon_id not in taxonomy:
            raise ConfigError(f"individual taxon id {taxon_id} not in taxonomy table")
        individuals.append(
            Individual(
                image=_to_mode(img, mode),
                mask=InstanceMask.from_bitmap(bitmap),
                taxon_id=taxon_id,
            )
        )
    return SourcePools(backgrounds=backgrounds, individuals=individuals, taxonomy=taxonomy)
