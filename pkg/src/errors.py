class CSFLError(Exception):
    """Base class for every error the simulator raises on purpose"""

    exit_code = 3


class ConfigError(CSFLError, ValueError):
    exit_code = 2


class SchemaError(ConfigError):
    pass


class DataError(ConfigError):
    pass


class DimensionError(CSFLError, ValueError):
    pass


class ContractError(CSFLError, ValueError):
    pass


class NumericError(CSFLError, ArithmeticError):
    pass


class RoundError(NumericError):
    """Numeric failure inside a training round, attributed to one user"""

    def __init__(self, user_id, message):
        self.user_id = user_id
        self.detail = message
        super().__init__(f"user {user_id}: {message}")

    def __reduce__(self):
        return type(self), (self.user_id, self.detail)


class OutputError(CSFLError, OSError):
    exit_code = 4
