"""Human-inspectable overlays: mask fills, contours, and text labels for
ground truth or detections.  Deterministic: a fixed 64-color palette indexed
by a hash of the category id, and byte-stable output for identical inputs.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

__all__ = ["OverlayStyle", "PALETTE", "color_for_category", "render_overlay"]


def _build_palette(n: int = 64) -> np.ndarray:
    colors = []
    for i in range(n):
        hue = (i * 0.6180339887498949) % 1.0  # golden-ratio walk
        sat = 0.65 if i % 2 == 0 else 0.85
        val = 0.95 if i % 3 else 0.75
        r, g, b = colorsys.hsv_to_rgb(hue, sat, val)
        colors.append((int(r * 255), int(g * 255), int(b * 255)))
    return np.asarray(colors, dtype=np.uint8)


PALETTE = _build_palette()


def color_for_category(category_id: int) -> tuple[int, int, int]:
    idx = (category_id * 2654435761) % len(PALETTE)  # Knuth multiplicative hash
    return tuple(int(v) for v in PALETTE[idx])


@dataclass(frozen=True)
class OverlayStyle:
    alpha: float = 0.4
    draw_contours: bool = True
    draw_labels: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")


def render_overlay(
    img: np.ndarray,
    items: Sequence,
    style: OverlayStyle = OverlayStyle(),
    category_names: dict[int, str] | None = None,
) -> np.ndarray:
    """Blend instance masks over an image; the source raster is not touched.

    ``items`` may be annotations or detections: anything with a
    ``segmentation`` mask and a ``category_id`` (a ``score`` attribute, when
    present, is printed into the label text).  Pixels outside every mask
    stay untouched when contours and labels are off.
    """
    if img.ndim == 2:
        base = np.stack([img] * 3, axis=-1)
    else:
        base = img.copy()
    h, w = base.shape[:2]
    out = base.astype(np.float32)
    alpha = style.alpha
    contours: list[tuple[np.ndarray, tuple[int, int, int]]] = []
    texts: list[tuple[tuple[int, int], str, tuple[int, int, int]]] = []
    for item in items:
        mask = item.segmentation
        if mask.size != (h, w):
            raise ValueError(f"item mask frame {mask.size} does not match image {(h, w)}")
        color = color_for_category(item.category_id)
        bitmap = mask.decode()
        if alpha > 0:
            sel = bitmap
            out[sel] = (1.0 - alpha) * out[sel] + alpha * np.asarray(color, dtype=np.float32)
        if style.draw_contours:
            eroded = ndimage.binary_erosion(bitmap, border_value=0)
            contours.append((bitmap & ~eroded, color))
        if style.draw_labels:
            name = None
            if category_names is not None:
                name = category_names.get(item.category_id)
            if name is None:
                name = f"cat {item.category_id}"
            score = getattr(item, "score", None)
            text = name if score is None else f"{name} {score:.2f}"
            x, y, _, _ = mask.bbox
            texts.append(((x, max(y - 11, 0)), text, color))
    for boundary, color in contours:
        out[boundary] = np.asarray(color, dtype=np.float32)
    result = np.clip(np.rint(out), 0, 255).astype(np.uint8)
    if texts:
        pil = Image.fromarray(result)
        draw = ImageDraw.Draw(pil)
        for xy, text, color in texts:
            draw.text(xy, text, fill=color)
        result = np.asarray(pil, dtype=np.uint8).copy()
    return result
