"""Shared exception types."""


class PointClipped(Exception):
    """A point fell outside the usable viewing volume (behind or at the near plane)."""


class DegenerateGeometry(Exception):
    """Input geometry does not determine a unique solution (collinear, coincident, ...)."""


class NumericsError(Exception):
    """A numeric invariant was violated (singular matrix, NaN gradient, ...)."""


class TrainingDiverged(NumericsError):
    """Total loss exceeded the divergence threshold; carries diagnostics in args."""


class DataFormatError(Exception):
    """A file failed validation (bad magic number, wrong endianness, malformed record)."""
