"""Exception hierarchy shared across modules.

CLI exit codes: ConfigError -> 2, SolverError -> 3, FormatError and other
I/O problems -> 4.
"""


class CardioemError(Exception):
    """Base class for all package errors."""


class ConfigError(CardioemError):
    """Invalid or inconsistent configuration input."""


class FormatError(CardioemError):
    """A file did not parse under the declared format."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        loc = ""
        if path is not None:
            loc += f" in {path}"
        if line is not None:
            loc += f" at line {line}"
        super().__init__(message + loc)


class GeometryError(CardioemError):
    """Degenerate or inverted geometry (zero/negative cell volumes, bad specs)."""


class TopologyError(CardioemError):
    """Mesh connectivity violated an assumption (e.g. open chamber surface)."""


class SolverError(CardioemError):
    """A linear or nonlinear solver failed to converge.

    Carries the residual history when available so failures are diagnosable.
    """

    def __init__(self, message, residuals=None):
        self.residuals = list(residuals) if residuals is not None else []
        super().__init__(message)
