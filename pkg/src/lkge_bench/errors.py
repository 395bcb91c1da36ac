"""Exception types raised across the package."""


class LkgeError(Exception):
    """Base class for all package errors."""


class TripleParseError(LkgeError):
    def __init__(self, path, line_no, message):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class ConfigurationError(LkgeError):
    """Invalid configuration, or a dataset/config mismatch detected before work starts."""


class BuilderDeadlockError(LkgeError):
    """The growth builder ran out of admissible facts before meeting a quota."""

    def __init__(self, message, remaining_facts=0, remaining_entities=0):
        self.remaining_facts = remaining_facts
        self.remaining_entities = remaining_entities
        super().__init__(message)


class NumericError(LkgeError):
    pass


class UndefinedQuantityError(LkgeError):
    """A reconstruction or regularization weight whose denominator is zero."""


class AggregationError(LkgeError):
    pass
