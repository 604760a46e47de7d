"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: data problems exit 2, numeric problems
exit 3.
"""


class SlapError(Exception):
    pass


class InputError(SlapError, ValueError):
    """Caller passed something outside an operation's preconditions."""


class InvariantError(SlapError):
    """An internal structure (boundaries, mask plan, ...) is inconsistent."""


class ConfigError(SlapError, ValueError):
    pass


class NumericError(SlapError, ArithmeticError):
    pass


class DataError(SlapError):
    """Base for problems with files on disk."""


class WavFormatError(DataError):
    pass


class UnsupportedFormatError(DataError):
    pass


class ManifestError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class CheckpointError(DataError):
    pass


class IntegrityError(CheckpointError):
    pass


class DigestError(CheckpointError):
    pass
