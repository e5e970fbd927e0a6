"""Plug-in feature-map protection for split (edge/cloud) image inference."""

__version__ = "0.1.0"
