"""Compositional generative flows on a planar synthon-assembly toy domain."""

__version__ = "0.1.0"
