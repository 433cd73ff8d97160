"""radiart: volumetric scene reconstruction and text-guided stylization."""

__version__ = "0.1.0"
