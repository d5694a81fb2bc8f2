"""Exception hierarchy.

Two families: ``InputError`` for bad files, schemas and configurations
(CLI exit code 2) and ``DesignError`` for designs on which an estimator is
not computable (CLI exit code 3).
"""


class LeniencyError(Exception):
    pass


class InputError(LeniencyError, ValueError):
    pass


class SchemaError(InputError):
    pass


class DataParseError(InputError):
    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class EmptyDataError(InputError):
    pass


class ConfigError(InputError):
    pass


class UnsupportedOperationError(InputError):
    pass


class DesignError(LeniencyError):
    pass


class DegenerateDesignError(DesignError):
    pass


class DegenerateLeverageError(DegenerateDesignError):
    def __init__(self, message, observation=None):
        super().__init__(message)
        self.observation = observation


class InsufficientDFError(DegenerateDesignError):
    pass


class FEJIVUnavailableError(DegenerateDesignError):
    def __init__(self, message, condition_number=None):
        super().__init__(message)
        self.condition_number = condition_number


class CapacityError(DesignError):
    pass
