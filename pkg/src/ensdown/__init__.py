"""Deep-ensemble statistical downscaling on synthetic pseudo-reality fields."""

__version__ = "0.1.0"
