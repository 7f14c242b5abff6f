"""Two-stream superpixel-graph and atrous-CNN semantic segmentation for remote sensing imagery."""

__version__ = "0.1.0"
