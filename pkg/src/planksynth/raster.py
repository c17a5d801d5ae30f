"""Pixel-level primitives: affine transforms, Gaussian blur, mask-aware
compositing, and an RLE codec for binary instance masks.

Images are plain numpy arrays of dtype uint8, either ``(h, w)`` grayscale or
``(h, w, 3)`` RGB.  Instance masks are kept run-length encoded in
column-major order with the first run counting zeros (the convention of the
dominant public annotation format), together with a tight bounding box and
pixel area so they can travel through manifests without decoding.

All functions are pure: inputs are never mutated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DegenerateTransformError, MalformedMaskError

__all__ = [
    "InstanceMask",
    "CompositeResult",
    "rle_encode",
    "rle_decode",
    "ones_intervals",
    "affine_transform",
    "transformed_frame_size",
    "gaussian_blur",
    "composite",
    "read_png",
    "write_png",
]


# ---------------------------------------------------------------------------
# Instance masks and the RLE codec
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InstanceMask:
    """Binary visible-pixel mask for one instance.

    ``size`` is the (height, width) of the frame the mask lives in.  ``rle``
    holds non-negative run counts over the column-major flattening of the
    frame; the first run counts zeros and may be 0 only in that position.
    ``bbox`` is (x, y, w, h) tight over the set pixels and ``area`` their
    count; both are redundant with ``rle`` and recomputable from it.
    """

    size: tuple[int, int]
    rle: tuple[int, ...]
    bbox: tuple[int, int, int, int]
    area: int

    @classmethod
    def from_bitmap(cls, bitmap: np.ndarray) -> "InstanceMask":
        """Encode a 2-D binary grid. Canonical: no interior zero-length runs."""
        arr = np.asarray(bitmap)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("bitmap must be a 2-D grid of size >= 1x1")
        arr = arr.astype(bool, copy=False)
        h, w = arr.shape
        flat = arr.ravel(order="F")
        change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
        bounds = np.concatenate(([0], change, [flat.size]))
        runs = np.diff(bounds)
        if flat[0]:
            runs = np.concatenate(([0], runs))
        idx = np.flatnonzero(flat)
        return cls(
            size=(h, w),
            rle=tuple(int(r) for r in runs),
            bbox=_bbox_from_indices(idx, h),
            area=int(idx.size),
        )

    @classmethod
    def from_indices(cls, size: tuple[int, int], indices: np.ndarray) -> "InstanceMask":
        """Build from sorted column-major linear indices of the set pixels."""
        h, w = size
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size == 0:
            return cls(size=(h, w), rle=(h * w,), bbox=(0, 0, 0, 0), area=0)
        gaps = np.flatnonzero(np.diff(idx) > 1)
        starts = np.concatenate(([idx[0]], idx[gaps + 1]))
        ends = np.concatenate((idx[gaps], [idx[-1]])) + 1
        return cls(
            size=(h, w),
            rle=_runs_from_intervals(starts, ends, h * w),
            bbox=_bbox_from_indices(idx, h),
            area=int(idx.size),
        )

    @classmethod
    def from_intervals(
        cls, size: tuple[int, int], intervals: np.ndarray
    ) -> "InstanceMask":
        """Build from sorted, disjoint half-open [start, end) ones-intervals
        in column-major linear coordinates."""
        h, w = size
        ivals = np.asarray(intervals, dtype=np.int64).reshape(-1, 2)
        if ivals.shape[0] == 0:
            return cls(size=(h, w), rle=(h * w,), bbox=(0, 0, 0, 0), area=0)
        starts, ends = _coalesce_intervals(ivals[:, 0], ivals[:, 1])
        area = int((ends - starts).sum())
        # Column span is exact; rows wrap to the full column height whenever
        # an interval crosses a column boundary.
        first_col = starts // h
        last_col = (ends - 1) // h
        xmin = int(first_col.min())
        xmax = int(last_col.max())
        wraps = last_col > first_col
        ymin = int(np.where(wraps, 0, starts % h).min())
        ymax = int(np.where(wraps, h - 1, (ends - 1) % h).max())
        return cls(
            size=(h, w),
            rle=_runs_from_intervals(starts, ends, h * w),
            bbox=(xmin, ymin, xmax - xmin + 1, ymax - ymin + 1),
            area=area,
        )

    def decode(self) -> np.ndarray:
        """Decode to a 2-D bool grid; rejects runs that do not tile the frame."""
        h, w = self.size
        runs = np.asarray(self.rle, dtype=np.int64)
        if runs.size == 0 or (runs < 0).any():
            raise MalformedMaskError(
                f"rle must be a non-empty sequence of non-negative runs, got {self.rle!r}"
            )
        total = int(runs.sum())
        if total != h * w:
            raise MalformedMaskError(
                f"rle runs sum to {total}, expected {h}x{w} = {h * w}"
            )
        values = np.zeros(runs.size, dtype=bool)
        values[1::2] = True
        flat = np.repeat(values, runs)
        return flat.reshape((h, w), order="F")


def rle_encode(bitmap: np.ndarray) -> InstanceMask:
    """Encode a binary grid into an :class:`InstanceMask`."""
    return InstanceMask.from_bitmap(bitmap)


def rle_decode(mask: InstanceMask) -> np.ndarray:
    """Decode an :class:`InstanceMask` back into a 2-D bool grid."""
    return mask.decode()


def ones_intervals(mask: InstanceMask) -> np.ndarray:
    """Return the set-pixel runs of ``mask`` as an (n, 2) array of half-open
    [start, end) intervals over the column-major flattening.

    The compact workhorse behind IoU and mask-union computations on large
    frames, where decoding the full bitmap would dominate.
    """
    runs = np.asarray(mask.rle, dtype=np.int64)
    c = np.concatenate(([0], np.cumsum(runs)))
    n_ones = runs.size // 2
    starts = c[1 : 1 + 2 * n_ones : 2]
    ends = c[2 : 2 + 2 * n_ones : 2]
    keep = ends > starts
    return np.stack([starts[keep], ends[keep]], axis=1)


def _bbox_from_indices(idx: np.ndarray, height: int) -> tuple[int, int, int, int]:
    if idx.size == 0:
        return (0, 0, 0, 0)
    xs = idx // height
    ys = idx % height
    x0, x1 = int(xs.min()), int(xs.max())
    y0, y1 = int(ys.min()), int(ys.max())
    return (x0, y0, x1 - x0 + 1, y1 - y0 + 1)


def _coalesce_intervals(
    starts: np.ndarray, ends: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Sort and merge touching or overlapping [start, end) intervals."""
    order = np.argsort(starts, kind="stable")
    starts, ends = starts[order], ends[order]
    if starts.size <= 1:
        return starts, ends
    out_s = [int(starts[0])]
    out_e = [int(ends[0])]
    for s, e in zip(starts[1:], ends[1:]):
        if s <= out_e[-1]:
            out_e[-1] = max(out_e[-1], int(e))
        else:
            out_s.append(int(s))
            out_e.append(int(e))
    return np.asarray(out_s, dtype=np.int64), np.asarray(out_e, dtype=np.int64)


def _runs_from_intervals(
    starts: np.ndarray, ends: np.ndarray, total: int
) -> tuple[int, ...]:
    runs: list[int] = []
    prev = 0
    for s, e in zip(starts, ends):
        runs.append(int(s - prev))
        runs.append(int(e - s))
        prev = int(e)
    runs.append(total - prev)
    if runs[-1] == 0:
        runs.pop()
    return tuple(runs)


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

def _exact_cos_sin(angle: float) -> tuple[float, float]:
    # Right angles are snapped so rotations by multiples of 90 degrees stay
    # exact pixel permutations.
    a = angle % 360.0
    if a == 0.0:
        return 1.0, 0.0
    if a == 90.0:
        return 0.0, 1.0
    if a == 180.0:
        return -1.0, 0.0
    if a == 270.0:
        return 0.0, -1.0
    rad = math.radians(a)
    return math.cos(rad), math.sin(rad)


def transformed_frame_size(
    width: int, height: int, angle: float, scale: float
) -> tuple[int, int]:
    """Size of the canvas that tightly holds a w x h frame after rotating by
    ``angle`` degrees and scaling by ``scale`` (flips never change size)."""
    c, s = _exact_cos_sin(angle)
    ew = scale * (abs(c) * width + abs(s) * height)
    eh = scale * (abs(s) * width + abs(c) * height)
    out_w = max(1, int(math.ceil(ew - 1e-7)))
    out_h = max(1, int(math.ceil(eh - 1e-7)))
    return out_w, out_h


def affine_transform(
    img: np.ndarray,
    mask: InstanceMask,
    flip_h: bool = False,
    flip_v: bool = False,
    angle: float = 0.0,
    scale: float = 1.0,
) -> tuple[np.ndarray, InstanceMask]:
    """Flip, rotate and scale an image together with its instance mask.

    The output canvas expands to hold the whole transformed frame (nothing is
    clipped).  The image is resampled bilinearly, the mask nearest-neighbour
    so it stays strictly binary.  Raises
    :class:`~planksynth.errors.DegenerateTransformError` when the transformed
    mask has no pixels left, so callers can re-draw the transform.
    """
    if scale <= 0:
        raise ValueError(f"scale must be > 0, got {scale}")
    h, w = img.shape[:2]
    if mask.size != (h, w):
        raise ValueError(f"mask frame {mask.size} does not match image {(h, w)}")

    c, s = _exact_cos_sin(angle)
    fx = -1.0 if flip_h else 1.0
    fy = -1.0 if flip_v else 1.0
    out_w, out_h = transformed_frame_size(w, h, angle, scale)

    # Inverse linear map (output -> input), built analytically so that flips
    # and right-angle rotations remain exact: A = s * R(angle) @ diag(fx, fy),
    # hence A^-1 = diag(fx, fy) @ R(-angle) / s.
    inv = np.array([[fx * c, fx * s], [-fy * s, fy * c]], dtype=np.float64) / scale
    cin = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    cout = np.array([(out_w - 1) / 2.0, (out_h - 1) / 2.0])
    t = cin - inv @ cout
    # scipy works in (row, col) coordinates
    matrix_rc = inv[::-1, ::-1]
    offset_rc = t[::-1]

    def _warp(plane: np.ndarray, order: int) -> np.ndarray:
        # grid-constant keeps samples within half a pixel of the frame edge
        # valid; plain constant would clip the domain to [0, n-1] and shave a
        # one-pixel ring off upscaled content
        return ndimage.affine_transform(
            plane,
            matrix_rc,
            offset=offset_rc,
            output_shape=(out_h, out_w),
            order=order,
            mode="grid-constant",
            cval=0.0,
            prefilter=False,
        )

    if img.ndim == 2:
        warped = _warp(img.astype(np.float32), order=1)
        out_img = np.clip(np.rint(warped), 0, 255).astype(np.uint8)
    else:
        planes = [_warp(img[..., ch].astype(np.float32), order=1) for ch in range(img.shape[2])]
        out_img = np.clip(np.rint(np.stack(planes, axis=-1)), 0, 255).astype(np.uint8)

    bitmap = mask.decode().astype(np.uint8)
    out_bitmap = _warp(bitmap, order=0).astype(bool)
    out_mask = InstanceMask.from_bitmap(out_bitmap)
    if out_mask.area == 0:
        raise DegenerateTransformError(
            f"transform (angle={angle}, scale={scale}) left no mask pixels"
        )
    return out_img, out_mask


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with kernel radius ceil(3*sigma) and mirrored
    edges; ``sigma == 0`` returns the input unchanged."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return img.copy()
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    kernel /= kernel.sum()
    out = img.astype(np.float32)
    out = ndimage.correlate1d(out, kernel, axis=0, mode="reflect")
    out = ndimage.correlate1d(out, kernel, axis=1, mode="reflect")
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


class CompositeResult(NamedTuple):
    image: np.ndarray
    footprint: np.ndarray  # bool, base frame: exactly the replaced pixels
    truncated: bool  # foreground frame fell entirely outside the base


def composite(
    base: np.ndarray,
    fg: np.ndarray,
    fg_mask: InstanceMask,
    offset: tuple[int, int],
) -> CompositeResult:
    """Paste ``fg`` pixels under ``fg_mask`` onto ``base`` at ``offset``.

    The offset may be negative or run past the base bounds; out-of-bounds
    foreground pixels are simply cut off.  When the foreground frame misses
    the base entirely the base comes back unchanged with ``truncated`` set,
    so a synthesizer can re-place.
    """
    bh, bw = base.shape[:2]
    fh, fw = fg.shape[:2]
    if base.ndim != fg.ndim:
        raise ValueError("base and fg must have the same channel layout")
    if fg_mask.size != (fh, fw):
        raise ValueError(f"mask frame {fg_mask.size} does not match fg {(fh, fw)}")
    ox, oy = offset
    out = base.copy()
    footprint = np.zeros((bh, bw), dtype=bool)
    x0, y0 = max(ox, 0), max(oy, 0)
    x1, y1 = min(ox + fw, bw), min(oy + fh, bh)
    if x0 >= x1 or y0 >= y1:
        return CompositeResult(out, footprint, True)
    sub = fg_mask.decode()[y0 - oy : y1 - oy, x0 - ox : x1 - ox]
    region = out[y0:y1, x0:x1]
    region[sub] = fg[y0 - oy : y1 - oy, x0 - ox : x1 - ox][sub]
    footprint[y0:y1, x0:x1] = sub
    return CompositeResult(out, footprint, False)


# ---------------------------------------------------------------------------
# PNG I/O
# ---------------------------------------------------------------------------

def read_png(path) -> np.ndarray:
    """Read a PNG as uint8, grayscale ``(h, w)`` or RGB ``(h, w, 3)``."""
    with Image.open(path) as im:
        if im.mode in ("1", "L", "I", "I;16", "LA"):
            im = im.convert("L")
        elif im.mode != "RGB":
            im = im.convert("RGB")
        return np.asarray(im, dtype=np.uint8).copy()


def write_png(img: np.ndarray, path) -> None:
    """Write a uint8 grayscale or RGB array as PNG (deterministic bytes)."""
    arr = np.asarray(img, dtype=np.uint8)
    if arr.ndim not in (2, 3):
        raise ValueError("expected (h, w) or (h, w, 3) array")
    Image.fromarray(arr).save(path, format="PNG", compress_level=1)
