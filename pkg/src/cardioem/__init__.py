"""Desk-scale coupled heart electromechanics.

Subpackages cover the tetrahedral mesh layer, P1/P2 finite elements,
rule-based fiber generation, monodomain electrophysiology, sarcomere
activation, finite-strain mechanics, the closed-loop 0D circulation and
the segregated-staggered orchestrator that ties them together.
"""

__version__ = "0.1.0"

from cardioem.errors import (
    CardioemError,
    ConfigError,
    FormatError,
    GeometryError,
    SolverError,
    TopologyError,
)

__all__ = [
    "CardioemError",
    "ConfigError",
    "FormatError",
    "GeometryError",
    "SolverError",
    "TopologyError",
    "__version__",
]
