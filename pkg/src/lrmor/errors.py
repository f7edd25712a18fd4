"""Exception hierarchy shared by all pipeline stages."""


class LrmorError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(LrmorError, ValueError):
    """Invalid geometry, material, spectrum or run configuration."""


class MeshError(LrmorError, ValueError):
    """Degenerate mesh (e.g. singular element Jacobian)."""


class InterfaceError(LrmorError, ValueError):
    """Plate grid and cavity face grid do not coincide."""


class ContractError(LrmorError, ValueError):
    """A caller violated a documented pre-condition (shape, range, count)."""


class SolverError(LrmorError, RuntimeError):
    """A linear solve failed or its residual check was breached."""

    def __init__(self, message, frequency=None):
        super().__init__(message)
        self.frequency = frequency


class ExpansionPointError(SolverError):
    """The dynamic stiffness is singular at a Krylov expansion point."""


class DegenerateInputError(LrmorError, ValueError):
    """Every candidate basis column was deflated."""
