"""Exception hierarchy shared across the engine.

``UserError`` subclasses map to CLI exit code 1; anything else escaping a
subcommand is treated as an internal error (exit code 2).
"""


class AixelError(Exception):
    """Base class for all engine errors."""


class UserError(AixelError):
    """Caller supplied invalid input or referenced something that does not exist."""


class SchemaError(UserError):
    pass


class DuplicateError(UserError):
    pass


class UnknownIdError(UserError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return Exception.__str__(self)


class CorruptionError(AixelError):
    pass


class PlanningError(UserError):
    pass


class BudgetExhausted(UserError):
    pass
