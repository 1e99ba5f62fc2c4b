"""Tetrahedron-constrained Gaussian splatting: grids, extraction, embedding,
localized editing, splatting, and progressive texture painting."""

__version__ = "0.1.0"
