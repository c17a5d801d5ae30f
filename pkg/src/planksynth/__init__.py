"""planksynth: labeled pseudo community image synthesis, large-image tiling,
and COCO-style instance segmentation scoring for plankton microscopy."""

__version__ = "0.1.0"
