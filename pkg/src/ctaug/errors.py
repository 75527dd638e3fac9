"""Exception types; each maps to a CLI exit code."""


class CtaugError(Exception):
    exit_code = 1


class ConfigError(CtaugError, ValueError):
    exit_code = 1


class DataError(CtaugError, ValueError):
    exit_code = 2


class TrainingError(CtaugError, RuntimeError):
    exit_code = 3
