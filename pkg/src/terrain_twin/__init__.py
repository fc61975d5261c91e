"""Terrain segmentation twin: procedural worlds, pseudo-labels, a numpy U-Net,
metrics and tiled inference."""

from .labeler import CLASS_NAMES, N_CLASSES, TerrainClass

__version__ = "0.1.0"

__all__ = ["CLASS_NAMES", "N_CLASSES", "TerrainClass", "__version__"]
