"""Single entry point exposing the pipeline as subcommands.

Exit codes: 0 success, 1 usage error, 2 data error.  Every subcommand is
replay-deterministic given its config; all randomness flows from seeds, and
``generate --jobs N`` never changes output bytes.
"""

from __future__ import annotations

import argparse
import json
import sys
from collections import Counter
from pathlib import Path

from . import __version__
from .dataset_io import (
    DetectionSet,
    read_detections,
    read_manifest,
    write_detections,
)
from .encgeom import EncoderSpec, run_geometry_check
from .errors import ConfigError, ManifestError, PlanksynthError
from .evaluator import EvalConfig, evaluate
from .pcigen import PciConfig, generate_dataset, load_source_pools
from .raster import read_png, write_png
from .render import OverlayStyle, render_overlay
from .taxonomy import load_taxonomy
from .tiler import (
    MergeConfig,
    crop,
    lift_detections,
    merge_detections,
    plan_tiles,
    read_tile_plan,
    write_tile_plan,
)

__all__ = ["main"]


class _UsageError(Exception):
    def __init__(self, message: str, parser: argparse.ArgumentParser):
        super().__init__(message)
        self.parser = parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage errors instead of argparse's 2
        raise _UsageError(message, self)


def _fmt(value: float | None) -> str:
    return "---" if value is None else f"{value:.4f}"


def _parse_thresholds(text: str) -> tuple[float, ...]:
    try:
        start, step, stop = (float(v) for v in text.split(":"))
    except ValueError:
        raise ConfigError(f"thresholds must look like start:step:stop, got {text!r}")
    if step <= 0:
        raise ConfigError("threshold step must be positive")
    values = []
    k = 0
    while True:
        v = round(start + k * step, 12)
        if v > stop + 1e-9:
            break
        values.append(v)
        k += 1
    if not values:
        raise ConfigError(f"empty threshold range {text!r}")
    return tuple(values)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _cmd_generate(args) -> int:
    cfg_path = Path(args.config)
    try:
        with open(cfg_path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {cfg_path}: {exc}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{cfg_path} is not valid JSON: {exc}")
    base = cfg_path.parent
    for key in ("backgrounds_dir", "individuals_dir", "taxonomy"):
        if key not in raw:
            raise ConfigError(f"{cfg_path}: missing required key {key!r}")
    label_rank = args.label_rank or raw.pop("label_rank", None) or "Family"
    raw.pop("label_rank", None)
    mode = raw.pop("mode", None)
    bg_dir = base / raw.pop("backgrounds_dir")
    ind_dir = base / raw.pop("individuals_dir")
    taxonomy_path = base / raw.pop("taxonomy")
    if args.seed is not None:
        raw["seed"] = args.seed
    cfg = PciConfig.from_dict(raw)
    taxonomy = load_taxonomy(taxonomy_path)
    pools = load_source_pools(bg_dir, ind_dir, taxonomy, canvas=cfg.canvas, mode=mode)
    aset = generate_dataset(
        cfg, pools, args.count, args.out, label_rank=label_rank, jobs=args.jobs
    )
    print(
        f"wrote {len(aset.images)} images with {len(aset.annotations)} instances "
        f"to {Path(args.out) / 'annotations.json'}"
    )
    return 0


def _cmd_stats(args) -> int:
    aset = read_manifest(args.manifest)
    per_image = Counter(a.image_id for a in aset.annotations)
    histogram = Counter(per_image.get(im.id, 0) for im in aset.images)
    names = {c.id: c.name for c in aset.categories}
    per_category = Counter(names.get(a.category_id, str(a.category_id)) for a in aset.annotations)
    payload = {
        "images": len(aset.images),
        "instances": len(aset.annotations),
        "categories": len(aset.categories),
        "per_category": dict(sorted(per_category.items())),
        "per_image_count_histogram": {str(k): histogram[k] for k in sorted(histogram)},
        "seed": aset.provenance.seed,
    }
    if args.json:
        print(json.dumps(payload, indent=2, sort_keys=True))
        return 0
    print(f"images:     {payload['images']}")
    print(f"instances:  {payload['instances']}")
    print(f"categories: {payload['categories']}")
    print("per-category counts:")
    for name, n in sorted(per_category.items()):
        print(f"  {name}: {n}")
    print("instances-per-image histogram:")
    for k in sorted(histogram):
        print(f"  {k}: {histogram[k]}")
    return 0


def _cmd_tile(args) -> int:
    img = read_png(args.image)
    h, w = img.shape[:2]
    plan = plan_tiles(w, h, tile=args.tile, overlap=args.overlap)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tiles = list(crop(img, plan))

    def write_tile(i: int) -> None:
        write_png(tiles[i][1], out / f"tile_{i:06d}.png")

    if args.jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            list(pool.map(write_tile, range(len(tiles))))
    else:
        for i in range(len(tiles)):
            write_tile(i)
    write_tile_plan(plan, out / "tiles.json")
    print(f"wrote {len(plan.origins)} tiles and tiles.json to {out}")
    return 0


def _cmd_merge(args) -> int:
    plan = read_tile_plan(args.plan)
    dset = read_detections(args.detections)
    width, height = plan.image_size
    by_tile: dict[int, list] = {}
    for d in dset.detections:
        if not 0 <= d.image_id < len(plan.origins):
            raise ManifestError(
                f"detection references tile index {d.image_id}, plan has {len(plan.origins)} tiles"
            )
        by_tile.setdefault(d.image_id, []).append(d)
    lifted = []
    for tile_idx in sorted(by_tile):
        origin = plan.origins[tile_idx]
        lifted.extend(
            lift_detections(
                by_tile[tile_idx], origin, (width, height), image_id=args.image_id
            ).detections
        )
    if args.no_dedup:
        merged = DetectionSet(detections=lifted)
    else:
        merged = merge_detections(
            lifted, MergeConfig(iou_merge_threshold=args.iou_threshold)
        ) if lifted else DetectionSet()
    write_detections(merged, args.out)
    print(f"merged {len(lifted)} per-tile detections into {len(merged.detections)} -> {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    gts = read_manifest(args.gt)
    dets = read_detections(args.dt)
    cfg = EvalConfig(
        iou_thresholds=_parse_thresholds(args.thresholds),
        class_agnostic=args.class_agnostic,
    )
    result = evaluate(dets, gts, cfg)
    payload = {
        "map": result.map,
        "ap50": result.ap50,
        "ap_s": result.ap_s,
        "ap_m": result.ap_m,
        "ap_l": result.ap_l,
        "per_threshold": {f"{t:.2f}": v for t, v in result.per_threshold.items()},
    }
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    if args.json:
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        print(f"{'mAP':>8} {'AP50':>8} {'APS':>8} {'APM':>8} {'APL':>8}")
        print(
            f"{_fmt(result.map):>8} {_fmt(result.ap50):>8} "
            f"{_fmt(result.ap_s):>8} {_fmt(result.ap_m):>8} {_fmt(result.ap_l):>8}"
        )
    return 0


def _cmd_render(args) -> int:
    img = read_png(args.image)
    gts = read_manifest(args.gt)
    h, w = img.shape[:2]
    image_id = args.image_id
    if image_id is None:
        stem = Path(args.image).name
        matches = [im.id for im in gts.images if Path(im.file_name).name == stem]
        if len(matches) == 1:
            image_id = matches[0]
        elif len(gts.images) == 1:
            image_id = gts.images[0].id
        else:
            raise ConfigError(
                f"cannot infer which manifest image is {stem}; pass --image-id"
            )
    names = {c.id: c.name for c in gts.categories}
    if args.dt:
        dset = read_detections(args.dt)
        items = [d for d in dset.detections if d.image_id == image_id]
    else:
        items = [a for a in gts.annotations if a.image_id == image_id]
    style = OverlayStyle(
        alpha=args.alpha, draw_contours=not args.no_contours, draw_labels=args.labels
    )
    overlay = render_overlay(img, items, style, category_names=names)
    write_png(overlay, args.out)
    print(f"rendered {len(items)} instances -> {args.out}")
    return 0


def _cmd_encgeom(args) -> int:
    if not args.check:
        raise ConfigError("nothing to do; pass --check")
    spec = EncoderSpec(
        input_size=args.input_size,
        patch_size=args.patch_size,
        depth=args.depth,
        embed_dim=args.embed_dim,
    )
    ok, lines = run_geometry_check(spec, mask_ratio=args.ratio, seed=args.seed)
    if args.json:
        print(json.dumps({"passed": ok, "report": lines}, indent=2))
    else:
        for line in lines:
            print(line)
        print("all checks passed" if ok else "CHECK FAILED")
    return 0 if ok else 2


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _build_parser() -> _Parser:
    parser = _Parser(
        prog="planksynth",
        description="Pseudo community image synthesis, tiling, and segmentation scoring.",
    )
    parser.add_argument("--version", action="version", version=f"planksynth {__version__}")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("generate", help="synthesize a labeled PCI dataset")
    p.add_argument("--config", required=True, help="JSON config with pool paths and sampling ranges")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", required=True, type=int, help="number of images")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--jobs", type=int, default=1, help="parallel workers (outputs identical)")
    p.add_argument("--label-rank", default=None, choices=["Family", "Order", "Class"],
                   help="label granularity (default: config's label_rank, else Family)")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("stats", help="summarize a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_stats)

    p = sub.add_parser("tile", help="crop a large image into overlapping patches")
    p.add_argument("--image", required=True)
    p.add_argument("--tile", type=int, default=1000)
    p.add_argument("--overlap", type=int, default=200)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1, help="parallel tile writers (outputs identical)")
    p.set_defaults(func=_cmd_tile)

    p = sub.add_parser("merge", help="lift per-tile detections and merge duplicates")
    p.add_argument("--detections", required=True, help="per-tile detections (image_id = tile index)")
    p.add_argument("--plan", required=True, help="tiles.json from the tile step")
    p.add_argument("--out", required=True)
    p.add_argument("--iou-threshold", type=float, default=0.5)
    p.add_argument("--image-id", type=int, default=0, help="image id for the merged output")
    p.add_argument("--no-dedup", action="store_true", help="lift only; keep seam duplicates")
    p.set_defaults(func=_cmd_merge)

    p = sub.add_parser("evaluate", help="COCO-style scoring of detections against ground truth")
    p.add_argument("--gt", required=True)
    p.add_argument("--dt", required=True)
    p.add_argument("--class-agnostic", action="store_true")
    p.add_argument("--thresholds", default="0.5:0.05:0.95")
    p.add_argument("--out", default=None, help="also write the result JSON here")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("render", help="draw ground truth or detections over an image")
    p.add_argument("--image", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--dt", default=None)
    p.add_argument("--image-id", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, default=0.4)
    p.add_argument("--labels", action="store_true")
    p.add_argument("--no-contours", action="store_true")
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("encgeom", help="check the encoder token-geometry contract")
    p.add_argument("--check", action="store_true")
    p.add_argument("--input-size", type=int, default=384)
    p.add_argument("--patch-size", type=int, default=32)
    p.add_argument("--depth", type=int, default=24)
    p.add_argument("--embed-dim", type=int, default=1024)
    p.add_argument("--ratio", type=float, default=0.75)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_encgeom)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        exc.parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if getattr(args, "command", None) is None:
        parser.print_help(sys.stderr)
        return 1
    try:
        return args.func(args)
    except PlanksynthError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
