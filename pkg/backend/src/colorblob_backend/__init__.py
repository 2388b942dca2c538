"""Minimal external detector backend for the tsdet wire protocol.

Implements a per-class color-centroid matcher over the engine's raster image
format.  Deliberately weak but genuinely learnable: its job is to demonstrate
protocol conformance, not accuracy, and to serve as the template for hooking
up a real detector.
"""

__version__ = "0.1.0"
