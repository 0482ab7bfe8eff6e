"""Exception hierarchy shared by every module.

The CLI maps ``ConfigError`` (and its subclasses) to exit status 1 and
``NumericalError`` (and its subclasses) to exit status 2.
"""

from __future__ import annotations


class QBoundsError(Exception):
    """Base class for all package errors."""


class ConfigError(QBoundsError, ValueError):
    """Invalid configuration, hyperparameters or command-line input."""


class StructuralError(ConfigError):
    """Array shapes, arities or layouts do not line up."""


class ParseError(ConfigError):
    """Malformed grid text or transfer-function expression."""


class ClassificationError(QBoundsError, ValueError):
    """A transfer function lacks the classification an operation requires."""


class PreconditionError(QBoundsError, ValueError):
    """A sampled precondition (e.g. monotonicity) does not hold."""


class DomainError(QBoundsError, ValueError):
    """A quantity is undefined on its inputs (e.g. KL with zero support)."""


class NumericalError(QBoundsError, ArithmeticError):
    """Non-finite intermediates or a broken internal consistency check."""


class ConvergenceError(NumericalError):
    """An iterative solver hit its iteration cap."""
