"""Vision-text-layout document modeling pipeline."""

__version__ = "0.1.0"
