"""Shared exception types.

The CLI maps these onto exit codes: ConfigError -> 2, DataError (and
subclasses) -> 3. Everything else is a plain bug and escapes.
"""


class FsodlabError(Exception):
    """Base class for all package errors."""


class ConfigError(FsodlabError):
    """Invalid or inconsistent configuration."""


class ContractError(FsodlabError):
    """A documented precondition of an operation was violated."""


class ShapeError(ContractError):
    """Tensor/array dimensions do not agree; message names the offenders."""


class DataError(FsodlabError):
    """Base class for dataset/file problems."""


class SchemaError(DataError):
    """Malformed annotation file (bad JSON or missing/ill-typed fields)."""


class DanglingReferenceError(DataError):
    """An annotation references a missing image or category id."""


class BoxBoundsError(DataError):
    """An annotation box lies outside its image or is degenerate."""
