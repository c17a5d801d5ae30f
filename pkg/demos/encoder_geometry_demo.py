"""Tour of the encoder token geometry: patch grid, spatial feature maps,
the three-level pyramid, and masked-token round trips.

Run:  python demos/encoder_geometry_demo.py
"""

import numpy as np

from planksynth.encgeom import (
    EncoderSpec,
    TokenGrid,
    build_pyramid,
    mae_mask,
    mae_restore,
    patchify,
    tokens_to_map,
    unpatchify,
)


def main() -> None:
    spec = EncoderSpec()  # 384 input, patch 32, 24 blocks, taps 5/8/16
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (spec.input_size, spec.input_size)).astype(np.uint8)

    tg = patchify(img, spec)
    print(f"input {spec.input_size}x{spec.input_size}, patch {spec.patch_size}")
    print(f"  -> {tg.tokens.shape[0]} tokens of dim {tg.tokens.shape[1]} on a "
          f"{tg.grid[0]}x{tg.grid[1]} grid")
    print(f"  unpatchify inverts exactly: {np.array_equal(unpatchify(tg, spec), img)}")

    fmap = tokens_to_map(tg)
    print(f"  token sequence rearranged to a {fmap.shape[0]}x{fmap.shape[1]} spatial map "
          f"(1/{spec.input_size // fmap.shape[0]} of the input)")

    feat = {layer: rng.normal(size=(spec.grid_side, spec.grid_side, 16)) for layer in spec.tap_layers}
    pyramid = build_pyramid(feat, spec)
    print("\npyramid from taps", spec.tap_layers, "(shallowest tap -> finest level):")
    for scale in sorted(pyramid):
        fm = pyramid[scale]
        print(f"  1/{scale:<3} -> {fm.shape[0]}x{fm.shape[1]} x {fm.shape[2]}")

    tokens = TokenGrid(tokens=rng.normal(size=(spec.num_tokens, 16)), grid=(spec.grid_side,) * 2)
    visible, vis_idx, mask_idx = mae_mask(tokens, ratio=0.75, seed=1)
    print(f"\nmasking 75% of {spec.num_tokens} tokens: {len(mask_idx)} hidden, "
          f"{len(vis_idx)} visible")
    restored = mae_restore(visible, vis_idx, mask_idx, np.zeros(16), tokens.grid)
    same = np.array_equal(restored.tokens[vis_idx], tokens.tokens[vis_idx])
    print(f"  restore puts every visible token back in place: {same}")
    print(f"  masked slots hold the fill token: {(restored.tokens[mask_idx] == 0).all()}")


if __name__ == "__main__":
    main()
