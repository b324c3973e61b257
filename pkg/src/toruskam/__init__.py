"""Computation of quasi-periodic invariant tori of the planar three-body problem.

Translated tori are continued from the Kepler limit, refined to invariant
tori, cross-checked against direct integration, and the constants entering
a KAM theorem are estimated from the result.
"""

from . import cli, fourier, geometry, kamcheck, kepler, nbody, oracle, solver
from .errors import ToruskamError
from .fourier import FourierMap, GridSpec
from .geometry import TorusState, flat_state
from .nbody import ReducedPoint, SystemParams

__version__ = "0.1.0"

__all__ = [
    "FourierMap",
    "GridSpec",
    "ReducedPoint",
    "SystemParams",
    "TorusState",
    "ToruskamError",
    "cli",
    "flat_state",
    "fourier",
    "geometry",
    "kamcheck",
    "kepler",
    "nbody",
    "oracle",
    "solver",
]
