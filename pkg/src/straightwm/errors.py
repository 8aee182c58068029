"""Exception types raised across the package.

Every class carries a short ``code`` used by the CLI as the machine-parsable
error class on stderr.
"""


class StraightWMError(Exception):
    code = "error"


class DimensionError(StraightWMError, ValueError):
    code = "dimension"


class DegenerateVelocity(StraightWMError, ArithmeticError):
    code = "degenerate_velocity"


class ContractError(StraightWMError, ValueError):
    code = "contract"


class NonFiniteError(StraightWMError, FloatingPointError):
    code = "non_finite"


class ConfigError(StraightWMError, ValueError):
    code = "config"

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class MissingInputError(StraightWMError, FileNotFoundError):
    code = "missing_input"


class FormatError(StraightWMError, ValueError):
    code = "format"
