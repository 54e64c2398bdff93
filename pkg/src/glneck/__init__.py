"""Numerical laboratory for Ginzburg-Landau relaxed harmonic maps from surfaces into spheres."""

__version__ = "0.1.0"
