"""Exception hierarchy shared across the package.

Everything derives from ``AmMobileNetError`` so the CLI can map library
failures to exit codes in one place. ``ValidationError`` subclasses cover bad
user input (exit 1); the rest are runtime failures (exit 2).
"""


class AmMobileNetError(Exception):
    pass


class ValidationError(AmMobileNetError, ValueError):
    """Bad arguments, configs, or inputs."""


class DimensionError(ValidationError):
    pass


class ParameterError(ValidationError):
    pass


class ConfigurationError(ValidationError):
    pass


class LabelError(ValidationError):
    pass


class ContractError(AmMobileNetError):
    """A caller broke an API precondition (e.g. backward on a non-scalar)."""


class OptimizerError(ContractError):
    pass


class UnsupportedFormatError(ValidationError):
    pass


class WavParseError(ValidationError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ManifestError(ValidationError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CoverageError(ValidationError):
    pass


class CheckpointFormatError(AmMobileNetError):
    pass


class CheckpointIntegrityError(CheckpointFormatError):
    pass


class NonFiniteLossError(AmMobileNetError):
    def __init__(self, epoch, batch, value):
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
