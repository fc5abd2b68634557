"""Exception types raised across the package."""


class OrganLocError(Exception):
    """Base class for all package errors."""


class ZeroVariance(OrganLocError, ValueError):
    pass


class MagicMismatch(OrganLocError, ValueError):
    pass


class TruncatedFile(OrganLocError, ValueError):
    pass


class DimOverflow(OrganLocError, ValueError):
    pass


class SpecInfeasible(OrganLocError, ValueError):
    pass


class UnknownOrgan(OrganLocError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown organ"


class EpisodeFinished(OrganLocError, RuntimeError):
    pass


class ShapeMismatch(OrganLocError, ValueError):
    pass


class NonFiniteGradient(OrganLocError, FloatingPointError):
    pass


class BufferTooSmall(OrganLocError, RuntimeError):
    pass


class Divergence(OrganLocError, FloatingPointError):
    """Training produced a non-finite loss."""
