"""Exception hierarchy.

Every error raised on purpose by the library derives from ``SimcseLabError``
and carries a short ``kind`` tag that the CLI prints as a stable prefix.
"""


class SimcseLabError(Exception):
    kind = "error"


class DimensionError(SimcseLabError, ValueError):
    kind = "dimension"


class ParameterError(SimcseLabError, ValueError):
    kind = "parameter"


class ContractError(SimcseLabError, ValueError):
    kind = "contract"


class InputError(SimcseLabError, ValueError):
    kind = "input"


class ParseError(InputError):
    kind = "parse"

    def __init__(self, message, line=None, path=None):
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"line {line}: "
        elif where:
            where += " "
        super().__init__(where + message)
        self.line = line
        self.path = path


class ConfigError(SimcseLabError, ValueError):
    kind = "config"


class UndefinedCorrelationError(SimcseLabError, ArithmeticError):
    kind = "undefined-correlation"


class NonFiniteError(SimcseLabError, FloatingPointError):
    """A loss or gradient went NaN/Inf during training."""

    kind = "non-finite"
