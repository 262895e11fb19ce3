"""Shared exception types."""


class ContractViolation(ValueError):
    """An argument breaks a documented precondition (arity, token range, ...)."""


class SizeBudgetError(RuntimeError):
    """A table or elimination frontier would exceed the configured memory budget."""


class InfeasibleModelError(RuntimeError):
    """A constraint system admits no solution."""
