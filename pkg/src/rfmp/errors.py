"""
Exception hierarchy for rfmp.

Every error derives from a builtin exception type as well as from
RfmpError, so code written against plain ValueError / ArithmeticError /
RuntimeError keeps working. The command-line front end maps these classes
onto its exit-code contract.
"""


class RfmpError(Exception):
    """Base class for all rfmp errors."""


# ============================================================================
# Geometry
# ============================================================================

class ManifoldError(RfmpError, ValueError):
    """Manifold spec mismatch, malformed spec string or wrong array shape."""


class PreconditionError(ManifoldError):
    """A point or tangent vector violates the manifold invariants."""


class CutLocusError(ManifoldError):
    """The logarithmic map is undefined (antipodal sphere points)."""


class DegenerateInputError(ManifoldError):
    """Input cannot be projected onto the manifold (e.g. zero vector on a sphere)."""


# ============================================================================
# Configuration
# ============================================================================

class ConfigError(RfmpError, ValueError):
    """
    Invalid configuration value.

    Attributes:
        field: Dotted name of the offending configuration field
    """

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


# ============================================================================
# Files
# ============================================================================

class FileFormatError(RfmpError, ValueError):
    """A dataset or checkpoint file is malformed, truncated or of the wrong version."""


# ============================================================================
# Numerics
# ============================================================================

class DivergenceError(RfmpError, ArithmeticError):
    """Non-finite values appeared in a numerical procedure."""


class IntegrationDivergedError(DivergenceError):
    """The ODE integrator produced a non-finite iterate or field value."""


class TrainingDivergedError(DivergenceError):
    """A training loss became non-finite."""


# ============================================================================
# Environments and policies
# ============================================================================

class ProtocolError(RfmpError, RuntimeError):
    """An environment or policy was used out of protocol order."""
