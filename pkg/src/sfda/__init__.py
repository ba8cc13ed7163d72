"""Source-free domain adaptation for semantic segmentation on a synthetic corpus."""

__version__ = "0.1.0"
