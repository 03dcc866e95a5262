"""Exception types shared across the package.

Every error carries a short machine-readable ``kind`` used by the CLI to
emit ``error[<kind>]:`` lines and pick exit codes.
"""

from __future__ import annotations


class PastaError(Exception):
    """Base class for all package errors."""

    kind = "error"


class DataError(PastaError):
    """Problems with input data, files, or checkpoint compatibility (CLI exit 2)."""

    kind = "data"


class HeaderError(DataError):
    kind = "header"


class RaggedRowError(DataError):
    kind = "ragged-row"


class NegativeValueError(DataError):
    kind = "negative-value"


class NonMonotonicError(DataError):
    kind = "non-monotonic"


class ScalerError(DataError):
    kind = "scaler"


class CheckpointError(DataError):
    kind = "checkpoint"


class HistoryError(DataError):
    """Not enough history to build the requested sample or baseline."""

    kind = "history"


class EmptySegmentError(DataError):
    """An evaluation selected zero cells."""

    kind = "empty-segment"


class ShapeError(PastaError):
    """Tensor shape or kernel contract violation (CLI exit 3)."""

    kind = "shape"


class NonFiniteError(PastaError):
    """A NaN or Inf appeared where only finite values are allowed."""

    kind = "non-finite"


class DivergenceError(PastaError):
    """Training produced a non-finite loss or gradient (CLI exit 3)."""

    kind = "divergence"
