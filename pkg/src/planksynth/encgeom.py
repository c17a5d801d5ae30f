"""Encoder token geometry, weight-free and exactly testable.

Certifies the shape contract an external training stack must satisfy:
square inputs split into a row-major token grid, tokens rearranged into 2-D
feature maps, three intermediate taps upsampled into a 1/8 - 1/16 - 1/32
feature pyramid (shallowest tap feeds the finest level), and the
mask-most-patches / restore-by-index round trip used for masked-autoencoder
pretraining.  No attention, no weights, no gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, MalformedPartitionError

__all__ = [
    "EncoderSpec",
    "TokenGrid",
    "patchify",
    "unpatchify",
    "tokens_to_map",
    "map_to_tokens",
    "build_pyramid",
    "mae_mask",
    "mae_restore",
    "run_geometry_check",
]


@dataclass(frozen=True)
class EncoderSpec:
    input_size: int = 384
    patch_size: int = 32
    depth: int = 24  # ViT-Large encoder blocks
    tap_layers: tuple[int, ...] = (5, 8, 16)
    pyramid_scales: tuple[int, ...] = (8, 16, 32)  # output = input_size / scale
    embed_dim: int = 1024

    def __post_init__(self):
        if self.input_size < 1 or self.patch_size < 1:
            raise ConfigError("input_size and patch_size must be positive")
        if self.input_size % self.patch_size != 0:
            raise ConfigError(
                f"input_size {self.input_size} not divisible by patch_size {self.patch_size}"
            )
        if any(not 1 <= t <= self.depth for t in self.tap_layers):
            raise ConfigError(f"tap layers {self.tap_layers} outside [1, {self.depth}]")
        if len(self.tap_layers) != len(self.pyramid_scales):
            raise ConfigError("need exactly one tap layer per pyramid scale")
        if any(self.input_size % s != 0 for s in self.pyramid_scales):
            raise ConfigError(f"pyramid scales {self.pyramid_scales} must divide input_size")

    @property
    def grid_side(self) -> int:
        return self.input_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid_side ** 2


@dataclass(frozen=True)
class TokenGrid:
    tokens: np.ndarray  # (n, token_dim), row-major over the grid
    grid: tuple[int, int]  # (rows, cols)

    def __post_init__(self):
        rows, cols = self.grid
        if self.tokens.ndim != 2 or self.tokens.shape[0] != rows * cols:
            raise ConfigError(
                f"token count {self.tokens.shape[0]} does not fill a {rows}x{cols} grid"
            )


def patchify(img: np.ndarray, spec: EncoderSpec = EncoderSpec()) -> TokenGrid:
    """Split a square image into flattened patch tokens, row-major.

    Token i holds the raw pixels of grid cell i (no learned projection);
    the defaults give 144 tokens of a 12x12 grid for a 384 input.
    """
    s, p = spec.input_size, spec.patch_size
    if img.shape[:2] != (s, s):
        raise ConfigError(f"expected a {s}x{s} input, got {img.shape[0]}x{img.shape[1]}")
    g = spec.grid_side
    channels = 1 if img.ndim == 2 else img.shape[2]
    arr = img.reshape(g, p, g, p, channels) if img.ndim == 3 else img.reshape(g, p, g, p)
    if img.ndim == 2:
        tokens = arr.transpose(0, 2, 1, 3).reshape(g * g, p * p)
    else:
        tokens = arr.transpose(0, 2, 1, 3, 4).reshape(g * g, p * p * channels)
    return TokenGrid(tokens=tokens.copy(), grid=(g, g))


def unpatchify(tg: TokenGrid, spec: EncoderSpec = EncoderSpec(), channels: int | None = None) -> np.ndarray:
    """Exact inverse of :func:`patchify`."""
    g = spec.grid_side
    p = spec.patch_size
    if tg.grid != (g, g):
        raise ConfigError(f"token grid {tg.grid} does not match spec grid {(g, g)}")
    token_dim = tg.tokens.shape[1]
    if channels is None:
        channels = token_dim // (p * p)
    if channels * p * p != token_dim:
        raise ConfigError(f"token dim {token_dim} is not patch {p}x{p} times channels")
    if channels == 1:
        return tg.tokens.reshape(g, g, p, p).transpose(0, 2, 1, 3).reshape(g * p, g * p)
    return (
        tg.tokens.reshape(g, g, p, p, channels)
        .transpose(0, 2, 1, 3, 4)
        .reshape(g * p, g * p, channels)
    )


def tokens_to_map(tg: TokenGrid) -> np.ndarray:
    """Rearrange the token sequence into a (rows, cols, dim) feature map."""
    rows, cols = tg.grid
    return tg.tokens.reshape(rows, cols, tg.tokens.shape[1]).copy()


def map_to_tokens(fmap: np.ndarray) -> TokenGrid:
    """Inverse of :func:`tokens_to_map`."""
    if fmap.ndim != 3:
        raise ConfigError(f"feature map must be (rows, cols, dim), got shape {fmap.shape}")
    rows, cols, dim = fmap.shape
    return TokenGrid(tokens=fmap.reshape(rows * cols, dim).copy(), grid=(rows, cols))


def _upsample_nearest(fmap: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return fmap.copy()
    return np.repeat(np.repeat(fmap, factor, axis=0), factor, axis=1)


def build_pyramid(
    taps: dict[int, np.ndarray], spec: EncoderSpec = EncoderSpec()
) -> dict[int, np.ndarray]:
    """Upsample grid-resolution tap maps into the multi-scale pyramid.

    ``taps`` maps encoder layer -> (grid, grid, dim) feature map.  The
    shallowest tap is assigned the finest level; keys of the result are the
    scale divisors (8, 16, 32 by default), values the nearest-neighbour
    upsampled maps (48x48, 24x24, 12x12 for the defaults).
    """
    if sorted(taps) != sorted(spec.tap_layers):
        raise ConfigError(
            f"expected taps for layers {tuple(sorted(spec.tap_layers))}, got {tuple(sorted(taps))}"
        )
    g = spec.grid_side
    pyramid: dict[int, np.ndarray] = {}
    for layer, scale in zip(sorted(spec.tap_layers), sorted(spec.pyramid_scales)):
        fmap = taps[layer]
        if fmap.ndim != 3 or fmap.shape[:2] != (g, g):
            raise ConfigError(
                f"tap for layer {layer} must be ({g}, {g}, dim), got shape {fmap.shape}"
            )
        target = spec.input_size // scale
        pyramid[scale] = _upsample_nearest(fmap, target // g)
    return pyramid


def mae_mask(
    tg: TokenGrid, ratio: float, seed: int
) -> tuple[np.ndarray, list[int], list[int]]:
    """Mask ``round(ratio * n)`` tokens chosen by a seeded uniform shuffle.

    Returns (visible tokens in original relative order, visible indices,
    masked indices); the two index lists are disjoint and jointly cover the
    grid.
    """
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"mask ratio must lie in (0, 1), got {ratio}")
    n = tg.tokens.shape[0]
    n_masked = round(ratio * n)
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed & ((1 << 64) - 1))))
    perm = rng.permutation(n)
    masked = sorted(int(i) for i in perm[:n_masked])
    visible = sorted(int(i) for i in perm[n_masked:])
    return tg.tokens[visible].copy(), visible, masked


def mae_restore(
    visible_tokens: np.ndarray,
    visible_idx: list[int],
    masked_idx: list[int],
    fill_token: np.ndarray,
    grid: tuple[int, int],
) -> TokenGrid:
    """Rebuild the full sequence: visible tokens at their original indices,
    the fill token everywhere else."""
    n = grid[0] * grid[1]
    combined = sorted(list(visible_idx) + list(masked_idx))
    if combined != list(range(n)):
        raise MalformedPartitionError(
            f"visible and masked indices must partition [0, {n}); "
            f"got {len(visible_idx)} visible and {len(masked_idx)} masked"
        )
    if len(visible_idx) != visible_tokens.shape[0]:
        raise MalformedPartitionError(
            f"{visible_tokens.shape[0]} visible tokens for {len(visible_idx)} indices"
        )
    dim = visible_tokens.shape[1] if visible_tokens.ndim == 2 else np.size(fill_token)
    tokens = np.empty((n, dim), dtype=np.result_type(visible_tokens, fill_token))
    tokens[list(masked_idx)] = np.asarray(fill_token).reshape(1, dim)
    if len(visible_idx):
        tokens[list(visible_idx)] = visible_tokens
    return TokenGrid(tokens=tokens, grid=grid)


# ---------------------------------------------------------------------------
# Self-check (backs the `planksynth encgeom --check` command)
# ---------------------------------------------------------------------------

def run_geometry_check(
    spec: EncoderSpec = EncoderSpec(), mask_ratio: float = 0.75, seed: int = 0
) -> tuple[bool, list[str]]:
    """Run the shape and round-trip suite; returns (all_passed, report lines)."""
    lines: list[str] = []
    ok = True

    def check(name: str, passed: bool, detail: str = ""):
        nonlocal ok
        ok = ok and passed
        status = "PASS" if passed else "FAIL"
        lines.append(f"{status}  {name}" + (f"  ({detail})" if detail else ""))

    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    img = rng.integers(0, 256, size=(spec.input_size, spec.input_size), dtype=np.int64).astype(np.uint8)

    tg = patchify(img, spec)
    g = spec.grid_side
    check(
        f"patchify: {spec.input_size}/{spec.patch_size} -> {g * g} tokens on {g}x{g}",
        tg.tokens.shape[0] == g * g and tg.grid == (g, g),
        f"got {tg.tokens.shape[0]} tokens",
    )
    check("unpatchify(patchify(img)) == img", bool(np.array_equal(unpatchify(tg, spec), img)))

    fmap = tokens_to_map(tg)
    back = map_to_tokens(fmap)
    check(
        "tokens_to_map round trip",
        fmap.shape == (g, g, tg.tokens.shape[1]) and bool(np.array_equal(back.tokens, tg.tokens)),
    )

    dim = 7
    taps = {
        layer: rng.normal(size=(g, g, dim)) for layer in spec.tap_layers
    }
    pyramid = build_pyramid(taps, spec)
    want = {s: spec.input_size // s for s in spec.pyramid_scales}
    check(
        "pyramid shapes " + ", ".join(f"1/{s}->{want[s]}x{want[s]}" for s in sorted(want)),
        all(pyramid[s].shape == (want[s], want[s], dim) for s in want),
    )
    finest = min(spec.pyramid_scales)
    factor = (spec.input_size // finest) // g
    shallow = min(spec.tap_layers)
    check(
        f"shallowest tap (layer {shallow}) feeds the finest level (1/{finest})",
        bool(np.array_equal(pyramid[finest], _upsample_nearest(taps[shallow], factor))),
    )

    feat = TokenGrid(tokens=rng.normal(size=(g * g, dim)), grid=(g, g))
    visible, vis_idx, mask_idx = mae_mask(feat, mask_ratio, seed)
    n_masked = round(mask_ratio * g * g)
    check(
        f"mae_mask ratio {mask_ratio}: {n_masked} of {g * g} masked",
        len(mask_idx) == n_masked and len(vis_idx) == g * g - n_masked,
        f"got {len(mask_idx)} masked / {len(vis_idx)} visible",
    )
    check(
        "mae_mask partition disjoint and exhaustive",
        sorted(vis_idx + mask_idx) == list(range(g * g)),
    )
    restored = mae_restore(visible, vis_idx, mask_idx, np.zeros(dim), (g, g))
    check(
        "mae_restore puts visible tokens back exactly",
        bool(np.array_equal(restored.tokens[vis_idx], feat.tokens[vis_idx]))
        and bool((restored.tokens[mask_idx] == 0).all()),
    )
    refill = mae_restore(visible, vis_idx, mask_idx, np.zeros(dim), (g, g))
    refill.tokens[mask_idx] = feat.tokens[mask_idx]
    check(
        "restore with original tokens at masked slots reproduces the input",
        bool(np.array_equal(refill.tokens, feat.tokens)),
    )
    return ok, lines
