"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Raised when tensor dimensions are incompatible with an operation."""


class ConfigError(ValueError):
    """Raised for invalid hyperparameters, options or dataset/config mismatches."""


class ContractError(ValueError):
    """Raised when an input violates a documented precondition."""


class FormatError(ValueError):
    """Raised when a checkpoint file is corrupt or truncated.

    ``offset`` is the byte position at which decoding failed.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ManifestError(ValueError):
    """Raised when a manifest CSV cannot be parsed or validated."""

    def __init__(self, message, row=None, column=None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.row = row
        self.column = column
