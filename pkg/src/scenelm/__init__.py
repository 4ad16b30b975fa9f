"""Desk-scale scene-language modeling with 3D-aware reconstructive supervision."""

__version__ = "0.1.0"
