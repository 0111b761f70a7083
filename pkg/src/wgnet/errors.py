"""Exception types shared across the package."""


class WgnetError(Exception):
    """Base class for all package errors."""


class InvalidLayoutError(WgnetError, ValueError):
    """Transducer layout cannot support the requested operation."""


class CatalogError(WgnetError, KeyError):
    """A referenced damage label is missing from the catalog."""


class ConfigError(WgnetError, ValueError):
    """A configuration value is out of range or inconsistent."""


class DataError(WgnetError, ValueError):
    """Sample data violates a shape or content contract."""


class InsufficientDataError(DataError):
    """An operation received an empty or too-small sample collection."""


class NumericError(WgnetError, ArithmeticError):
    """A numeric computation produced or received non-finite values."""


class MetricError(WgnetError, ValueError):
    """A metric was requested on an empty or inconsistent input."""


class IngestionError(WgnetError, RuntimeError):
    """Source data could not be ingested into the canonical store."""


class ReportError(WgnetError, RuntimeError):
    """Report emission failed because run artifacts are missing or broken."""


class TrainingAbort(WgnetError, RuntimeError):
    """Training hit a non-recoverable condition (e.g. non-finite loss)."""
