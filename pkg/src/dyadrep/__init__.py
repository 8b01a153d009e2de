"""Dyadic representation of bilinear singular integrals and sparse bounds for their forms."""

from .grid import DyadicCube, DyadicGrid, GoodnessParams, gamma_of, sample_grid, standard_grid
from .kernels import QuadratureSpec, TruncationSpec, builtin_kernel, trilinear_pairing
from .mesh import MeshFunction

__version__ = "0.1.0"

__all__ = ["DyadicCube", "DyadicGrid", "GoodnessParams", "MeshFunction", "QuadratureSpec", "TruncationSpec",
           "builtin_kernel", "gamma_of", "sample_grid", "standard_grid", "trilinear_pairing"]
