"""Exception taxonomy shared across the package.

Every error raised by protoeeg code derives from ProtoeegError so callers
(and the CLI exit-code mapping) can distinguish our failures from genuine
bugs surfacing as bare ValueError/KeyError.
"""


class ProtoeegError(Exception):
    """Base class for all package errors."""


class ContractError(ProtoeegError):
    """An API contract was violated (non-scalar backward, invalid distribution, ...)."""


class DimensionError(ProtoeegError):
    """Array shapes are incompatible with the requested operation."""


class NumericError(ProtoeegError):
    """A computation produced or received non-finite values."""


class ConfigurationError(ProtoeegError):
    """A config value is out of range or internally inconsistent."""


class DegenerateInputError(ProtoeegError):
    """Input is degenerate for the operation (e.g. near-zero norm before normalization)."""


class DataFormatError(ProtoeegError):
    """A serialized file failed validation (magic, version, truncation, checksum)."""


class MissingSampleError(ProtoeegError):
    """A referenced sample id is absent from the dataset."""


class ProvenanceError(ProtoeegError):
    """Prototype provenance is required but absent (model was never pushed)."""


class UndefinedMetricError(ProtoeegError):
    """The requested metric is undefined for the given inputs (e.g. single-class AUROC)."""


class UsageError(ProtoeegError):
    """Bad command-line usage."""
