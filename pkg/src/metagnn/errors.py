"""Exception hierarchy shared by every module."""


class MetaGNNError(Exception):
    """Base class for all library errors."""


class ContractError(MetaGNNError, ValueError):
    """A precondition of an operation was violated."""


class DimensionError(ContractError):
    """Tensor shapes do not conform to the primitive."""


class DomainError(MetaGNNError, ArithmeticError):
    """A numeric primitive was evaluated outside its domain."""


class SchemaError(ContractError):
    """A dataset or parameter document violates its schema."""


class ParseError(ContractError):
    """A record could not be parsed; ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DegenerateDataError(ContractError):
    """Data has no spread where a spread is required (e.g. zero std)."""


class DivergenceError(MetaGNNError):
    """Training loss became non-finite or exceeded the divergence bound."""

    def __init__(self, message, iteration=None):
        self.detail = message
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)
        self.iteration = iteration
