"""Video panoptic segmentation evaluation and post-processing toolkit."""

__version__ = "0.1.0"
