"""Scene-to-sequence toolkit for object-centric 3D vision-language data."""

__version__ = "0.1.0"
