"""Exception hierarchy shared by every dfinger module.

Each class carries an ``exit_code`` so the CLI can map failures onto its
stable exit-code contract (2 config, 3 data, 4 numeric).
"""


class DfingerError(Exception):
    exit_code = 1


class ConfigError(DfingerError):
    """Invalid configuration, incompatible checkpoint or variant."""

    exit_code = 2


class InvalidShape(ConfigError):
    pass


class DataError(DfingerError):
    exit_code = 3


class SkipSample(DataError):
    """A sample cannot be built; callers report it and move on."""


class EmptyFingerprint(DataError):
    pass


class CorruptCheckpoint(DataError):
    pass


class UndefinedReference(DataError):
    pass


class InvalidLength(DataError):
    pass


class NumericError(DfingerError):
    exit_code = 4


class ServiceError(DfingerError):
    exit_code = 3


class ConnectionFailed(ServiceError):
    pass


class HashMismatch(ServiceError):
    pass


class RemoteError(ServiceError):
    def __init__(self, code, message):
        super().__init__(f"remote error {code}: {message}")
        self.code = code
        self.remote_message = message
