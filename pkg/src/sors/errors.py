"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called outside its preconditions."""


class UnsupportedError(ValueError):
    """The requested operation is not defined for this input (e.g. stochastic dynamics)."""


class CapacityError(RuntimeError):
    """An enumeration would exceed its configured size cap."""


class NoRankablePairs(RuntimeError):
    """Every stored trajectory has the same sparse return, so no pair carries a label."""


class ConvergenceError(RuntimeError):
    """An iterative solver hit its iteration cap."""


class ConfigError(ValueError):
    """A configuration file could not be parsed or validated."""

    def __init__(self, message, key=None, line=None):
        self.key = key
        self.line = line
        where = []
        if key is not None:
            where.append(f"key '{key}'")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
