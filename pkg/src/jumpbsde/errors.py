"""Exception types shared across the package."""


class LatticeError(ValueError):
    """A lattice could not be built: a step-size bound or structural condition failed."""

    def __init__(self, message, node=None, bound=None):
        super().__init__(message)
        self.node = node
        self.bound = bound


class ValidationError(AssertionError):
    """A built model (or measure) violates one of its invariants.

    ``issues`` is a list of ``(check, node, detail)`` tuples.
    """

    def __init__(self, issues, report=None):
        self.issues = list(issues)
        self.report = report
        head = "; ".join(f"{c} at {n}: {d}" for c, n, d in self.issues[:5])
        more = f" (+{len(self.issues) - 5} more)" if len(self.issues) > 5 else ""
        super().__init__(head + more)


class ConfigError(ValueError):
    """Malformed configuration document. ``key`` names the offending entry."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class NumericalError(ArithmeticError):
    """Non-convergence, overflow, or a violated a-priori bound."""

    def __init__(self, message, node=None, detail=None):
        super().__init__(message)
        self.node = node
        self.detail = detail


class BudgetError(ValueError):
    """The requested lattice or grid exceeds the configured size budget."""
