"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: UsageError -> 1,
DataError -> 2, NumericError -> 3.
"""


class VtmError(Exception):
    """Base class for package errors."""


class UsageError(VtmError):
    """Bad invocation: unknown keys, malformed flags, missing config files."""


class DataError(VtmError):
    """Dataset problems: missing files, malformed manifests, range violations."""


class NumericError(VtmError):
    """Numeric contract violations: non-finite values, failed gradient checks."""


class ShapeError(VtmError):
    """Dimension mismatches between tensors, pyramids or label maps."""
