"""Exception types shared across the package."""


class CPGCError(Exception):
    """Base class for all package errors."""


class ShapeError(CPGCError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(CPGCError, ValueError):
    """An argument lies outside the operation's domain (log of non-positive, OOV token...)."""


class DegenerateNormError(DomainError):
    """A vector that must be normalized has (near) zero length."""


class ContractError(CPGCError, ValueError):
    """A documented precondition was violated by the caller."""


class TrainingFailure(CPGCError, RuntimeError):
    """Optimization diverged (non-finite loss)."""

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message if iteration is None else f"{message} (iteration {iteration})")
        self.iteration = iteration


class UndefinedASRError(CPGCError, ValueError):
    """No initially-correct pairs, so attack success rate is undefined."""
