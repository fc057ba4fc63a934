"""Progressive patch-size segmentation training for irrigation-type mapping."""

__version__ = "0.1.0a0"
