"""Dual-sensor (optical + DEM) quantization-aware crater detector with an INT8 inference path."""

__version__ = "0.1.0"
