"""Inner eye canthus localization on thermal face images via a projected 3D morphable model."""

__version__ = "0.1.0"
