"""Geodesic beams, non-looping tube covers and L^p growth of eigenfunctions on model manifolds."""

from __future__ import annotations

from .manifold import CotangentPoint, ModelManifold, flat_torus, product, sphere, surface_of_revolution
from .tolerances import DEFAULT, ConvergenceError, DomainError, Tolerances

__version__ = "0.1.0"

__all__ = [
    "CotangentPoint",
    "ModelManifold",
    "flat_torus",
    "product",
    "sphere",
    "surface_of_revolution",
    "DEFAULT",
    "ConvergenceError",
    "DomainError",
    "Tolerances",
    "__version__",
]
