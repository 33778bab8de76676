"""Exception taxonomy.

Every error carries a stable machine-readable ``name`` (the class name)
so the CLI can surface it without string matching on messages.
"""

from __future__ import annotations


class LfaError(Exception):
    """Base class for all structured errors raised by this package."""

    @property
    def name(self) -> str:
        return type(self).__name__


class ZeroRow(LfaError):
    """A row with (near-)zero norm cannot be normalized."""

    def __init__(self, row: int):
        super().__init__(f"row {row} has zero norm")
        self.row = row


class ConvergenceFailure(LfaError):
    """An iterative numerical kernel (SVD) failed to converge."""


class ShapeMismatch(LfaError):
    """Array shapes are inconsistent with each other or with metadata."""


class DegenerateCross(LfaError):
    """Cross-covariance is numerically zero; the orthogonal fit is non-unique."""


class UnsupportedVariant(LfaError):
    """Unknown loss variant tag."""


class NonFiniteGradient(LfaError):
    """Gradient contains NaN or infinity."""


class NumericalUnderflow(LfaError):
    """All transport kernel entries underflowed (epsilon too small)."""


class BadMagic(LfaError):
    """Array file does not start with the expected magic bytes."""


class HeaderParse(LfaError):
    """Array header or manifest is malformed."""


class LabelOutOfRange(LfaError):
    """A label does not index a valid class."""


class IoFailure(LfaError):
    """Filesystem write failed."""


class ArchiveNotFound(LfaError):
    """Archive file pair does not exist on disk."""


class InsufficientSamples(LfaError):
    """A class has fewer samples than requested."""

    def __init__(self, cls: int, message: str = ""):
        super().__init__(message or f"class {cls} has too few samples")
        self.cls = cls


class MissingGroups(LfaError):
    """Group ids are required for the requested aggregation."""


class MissingLabels(LfaError):
    """The operation needs a labeled archive."""


class LengthMismatch(LfaError):
    """Two sequences that must be parallel differ in length."""


class DimensionMismatch(LfaError):
    """Mapping and feature dimensionalities disagree."""


class RejectionOverflow(LfaError):
    """Prototype rejection sampling could not satisfy the separation bound."""
