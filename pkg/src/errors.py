class FusionError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(FusionError, ValueError):
    pass


class DomainError(FusionError, ValueError):
    pass


class LabelError(FusionError, IndexError):
    pass


class ContractError(FusionError, ValueError):
    pass


class EmptyDistributionError(ContractError):
    pass


class FormatError(FusionError, ValueError):
    pass


class LengthError(FormatError):
    pass


class ConsistencyError(FormatError):
    pass


class DivergenceError(FusionError, ArithmeticError):
    """Non-finite loss. `context` says where (step, epoch, task...)."""

    def __init__(self, message, **context):
        self.message = message
        self.context = context
        if context:
            where = ', '.join(f"{k}={v}" for k, v in context.items())
            message = f"{message} ({where})"
        super().__init__(message)

    def at(self, **context):
        """Same error with extra outer context, for re-raising."""
        return DivergenceError(self.message, **{**context, **self.context})


class ConfigError(FusionError, ValueError):
    """Invalid experiment config; `fields` is a list of (key, message)."""

    def __init__(self, fields):
        self.fields = list(fields)
        lines = [f"{key}: {msg}" for key, msg in self.fields]
        super().__init__("invalid config:\n  " + "\n  ".join(lines))
