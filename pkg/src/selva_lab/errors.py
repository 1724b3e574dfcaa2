"""Exception hierarchy shared across the package."""


class SelvaError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ShapeError(SelvaError, ValueError):
    exit_code = 2


class ConfigError(SelvaError, ValueError):
    exit_code = 2


class NumericError(SelvaError, ArithmeticError):
    exit_code = 4


class DomainError(SelvaError, ValueError):
    exit_code = 2


class InputError(SelvaError, ValueError):
    exit_code = 2


class WorldError(SelvaError, RuntimeError):
    exit_code = 4


class BenchmarkError(SelvaError, RuntimeError):
    exit_code = 2


class VocabularyError(SelvaError, KeyError):
    exit_code = 2

    def __str__(self):
        return Exception.__str__(self)


class UsageError(SelvaError, RuntimeError):
    exit_code = 2


class DivergenceError(NumericError):
    pass
