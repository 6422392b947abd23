"""Evidence-aware multiple-instance learning on frozen tile features."""

__version__ = "0.1.0"
