"""Exception hierarchy. Each class maps to a CLI exit code."""


class ReadError(Exception):
    exit_code = 1


class ConfigError(ReadError):
    exit_code = 1


class DataError(ReadError):
    exit_code = 2


class ArtifactError(ReadError):
    """Missing, corrupt, stale or digest-mismatched artifact."""

    exit_code = 3


class TrainingDivergedError(ReadError):
    exit_code = 2
