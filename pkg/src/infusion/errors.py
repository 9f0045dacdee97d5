"""Exception types shared across the package."""


class ContractError(ValueError):
    """A precondition on an operation's inputs was violated."""


class ShapeError(ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class NumericError(ArithmeticError):
    """A computation produced NaN or infinite values."""


class TrainingError(NumericError):
    def __init__(self, step: int, message: str = "non-finite loss"):
        super().__init__(f"training diverged at step {step}: {message}")
        self.step = step


class IntegrityError(Exception):
    """A persisted artifact failed its content-hash or structural check."""


class MigrationError(Exception):
    """A persisted artifact carries an unsupported format version."""
