"""Error taxonomy shared by the library and the command line interface."""


class SparseFusionError(Exception):
    """Base class of every error raised on purpose by sparse-fusion."""

    exit_code: int = 1


class MalformedInputError(SparseFusionError, ValueError):
    """Input that cannot be read: missing files, bad JSON, schema mismatches, missing fields."""

    exit_code: int = 2


class ConstraintViolationError(SparseFusionError, ValueError):
    """A value that is readable but violates a documented constraint."""

    exit_code: int = 3
