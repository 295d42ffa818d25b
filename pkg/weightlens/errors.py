from typing import List, Optional


class WeightLensError(Exception):
    """Base class for every error raised by weightlens."""


class ParseError(WeightLensError, ValueError):
    """Archive header is missing, truncated or not valid metadata."""


class IntegrityError(WeightLensError):
    """A declared payload range does not fit inside the archive file."""


class NotFound(WeightLensError, KeyError):
    """Requested layer is not present in the archive index."""

    def __str__(self) -> str:
        # KeyError quotes its argument; keep the plain message.
        return str(self.args[0]) if self.args else ""


class UnsupportedDtype(WeightLensError, TypeError):
    pass


class DomainError(WeightLensError, ValueError):
    """Input lies outside the domain of a numeric operation."""


class ShapeError(WeightLensError, ValueError):
    pass


class DtypeError(WeightLensError, TypeError):
    pass


class SchemaError(WeightLensError, ValueError):
    """Two checkpoints do not expose the same layers or shapes."""


class ArityError(WeightLensError, ValueError):
    pass


class NumericsError(WeightLensError, ArithmeticError):
    """Non-finite input or a failed residual certificate."""


class GapError(WeightLensError, ArithmeticError):
    """Singular value gap is zero, so the subspace is not well defined."""


class ClipViolation(WeightLensError, ValueError):
    pass


class ConfigError(WeightLensError, ValueError):
    def __init__(self, message: str, problems: Optional[List[str]] = None):
        """
        :param message: Summary of the failure
        :param problems: Every individual problem found during validation
        """
        self.problems = list(problems) if problems else [message]
        super().__init__(message)

    def __str__(self) -> str:
        if len(self.problems) <= 1:
            return super().__str__()
        lines = "\n".join(f"  - {p}" for p in self.problems)
        return f"{super().__str__()}\n{lines}"
