"""Exception types; each maps to a CLI exit code."""


class AsdGatError(Exception):
    exit_code = 1


class ConfigError(AsdGatError, ValueError):
    exit_code = 2


class DataError(AsdGatError, ValueError):
    exit_code = 3


class NumericError(AsdGatError, FloatingPointError):
    exit_code = 4


class VerificationError(AsdGatError):
    exit_code = 5
