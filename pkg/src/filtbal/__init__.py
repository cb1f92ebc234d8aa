"""Balanced metrics and vortex equations for filtered bundles on the projective line.

The package computes balanced inner products on section spaces of twisted
filtered bundles over P^1 by fixed-point iteration of the Hilb/FS pair,
monitors the associated moment-map and Hermite-Einstein residuals, and
solves the dimensionally reduced coupled vortex systems.
"""

__version__ = "0.1.0"

from . import geometry, filtration, sections, metrics, stability, balanced, elliptic, vortex

__all__ = [
    "geometry",
    "filtration",
    "sections",
    "metrics",
    "stability",
    "balanced",
    "elliptic",
    "vortex",
    "__version__",
]
