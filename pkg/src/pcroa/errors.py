"""Exception hierarchy.

Every error carries the module and operation that raised it plus a short
machine-readable code; the CLI maps the class to a process exit status.
"""


class PcroaError(Exception):
    exit_code = 1

    def __init__(self, message, *, module="", operation="", code="error"):
        super().__init__(message)
        self.module = module
        self.operation = operation
        self.code = code

    def to_dict(self):
        return {
            "module": self.module,
            "operation": self.operation,
            "code": self.code,
            "message": str(self),
        }


class ConfigError(PcroaError):
    exit_code = 2


class ParseError(ConfigError):
    """Malformed polynomial expression; ``position`` is the character offset."""

    def __init__(self, message, *, position=None, **kw):
        kw.setdefault("module", "mvpoly")
        kw.setdefault("operation", "parse")
        kw.setdefault("code", "parse_error")
        super().__init__(message, **kw)
        self.position = position


class DimensionError(PcroaError, ValueError):
    pass


class EquilibriumError(PcroaError):
    exit_code = 3


class SosInfeasibleError(PcroaError):
    exit_code = 4


class SolverNumericalError(PcroaError):
    exit_code = 5


class ValidationFailure(PcroaError):
    exit_code = 6


class NotPositiveDefiniteError(PcroaError, ValueError):
    def __init__(self, message, *, pivot=None, **kw):
        kw.setdefault("module", "linalg")
        kw.setdefault("operation", "cholesky")
        kw.setdefault("code", "not_pd")
        super().__init__(message, **kw)
        self.pivot = pivot
