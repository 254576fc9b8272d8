"""Semantic TSDF mapping with calibrated label fusion."""

__version__ = "0.1.0"
