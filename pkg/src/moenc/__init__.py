"""Instance-level mixture-of-encoders routing laboratory."""

__version__ = "0.1.0"
