"""Exception hierarchy shared across the package."""


class MoicaError(Exception):
    """Base class for all package-specific errors."""


class DataError(MoicaError):
    """Malformed or unusable input data (files, shapes, empty datasets)."""


class NumericalError(MoicaError):
    """A computation left the numerically valid regime (singular matrix,
    non-finite objective, degenerate step)."""
