"""Exception types shared across the package."""


class TacoError(Exception):
    """Base class for all package errors."""


class ZeroMass(TacoError):
    """Total weight is zero, negative, or non-finite."""


class ShapeMismatch(TacoError):
    """Two measures/couplings do not share the same support."""


class SupportMismatch(TacoError):
    """Two plans are not defined over the same support grid."""


class ZeroEntries(TacoError):
    """An operation requires strictly positive entries."""


class NoConvergence(TacoError):
    """Iteration budget exhausted before reaching tolerance.

    Carries the final residual so callers can decide whether the
    partial result is usable.
    """

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class NumericalOverflow(TacoError):
    """An exponent or update left the representable range."""


class UnknownTask(TacoError):
    """Task name not in the closed task set."""


class NoGroundTruth(TacoError):
    """Task has no analytic transport map."""


class AlreadyPerturbed(TacoError):
    """perturb() applied twice to the same task."""


class BadPairing(TacoError):
    """Pairing is not a bijection on sample indices."""


class OutOfFamily(TacoError):
    """Operation not defined for this path family."""


class EmptyConditional(TacoError):
    """A conditional slice carries zero mass."""


class DegenerateDenominator(TacoError):
    """All bridge densities vanished at the query point."""


class SlotCountMismatch(TacoError):
    """Particle-slot count does not match the coupling's slot block."""


class DimensionMismatch(TacoError):
    """Sample sets live in different ambient dimensions."""


class ConfigError(TacoError):
    """Invalid or unknown configuration key/value."""
