"""Category-level radiance fields from a single image, desk scale."""

__version__ = "0.1.0"
