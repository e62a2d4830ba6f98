"""Exception hierarchy shared across the package."""


class DuetError(Exception):
    """Base class for every error raised by this package."""


class InvalidNodeError(DuetError):
    """A node id is outside the graph's node range."""


class SamplingError(DuetError):
    """A sampling request cannot be satisfied (empty candidate pool)."""


class ShapeError(DuetError):
    """Tensor operands have incompatible shapes."""


class DomainError(DuetError):
    """An operation was applied outside its numeric domain (e.g. log of x <= 0)."""


class NonFiniteError(DuetError):
    """An operation produced NaN or Inf while finite checks were enabled."""


class ContractError(DuetError):
    """A caller violated an API precondition."""


class StaleIndexError(DuetError):
    """The semantic neighbor index is older than the refresh window allows."""


class VocabularyError(DuetError):
    """An entity or relation id is outside the known vocabulary."""


class ParseError(DuetError):
    """A data file is malformed. Carries the offending line number."""

    def __init__(self, message: str, line_no: int | None = None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class IntegrityError(DuetError):
    """A dataset references ids that do not resolve, or splits overlap."""


class ModeError(DuetError):
    """The model mode does not support the requested operation."""


class DivergenceError(DuetError):
    """Training produced a non-finite loss."""


class CheckpointError(DuetError):
    """A checkpoint file is corrupt or does not match the expected manifest."""
