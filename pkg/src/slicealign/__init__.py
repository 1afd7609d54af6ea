"""Self-supervised slice alignment pre-training for 2D medical segmentation."""

__version__ = "0.1.0"
