"""Exception types raised across the package."""

from __future__ import annotations


class FedLfdError(Exception):
    pass


class ShapeError(FedLfdError, ValueError):
    """Input or target dimensions do not match the model."""


class UsageError(FedLfdError, ValueError):
    """A caller violated an operation's precondition."""


class NumericError(FedLfdError, ArithmeticError):
    def __init__(self, message: str, layer: str | None = None):
        super().__init__(message if layer is None else f"{message} (at {layer})")
        self.layer = layer


class ConflictError(FedLfdError):
    pass


class NotFoundError(FedLfdError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class ConfigError(FedLfdError):
    """Configuration failed validation; ``problems`` lists every issue found."""

    def __init__(self, problems: list[str] | str):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in self.problems))


class SkipRoundWarning(UserWarning):
    """Aggregation had nothing to combine; the global model was left unchanged."""
