"""Exception types shared across the pipeline stages."""

from __future__ import annotations


class ArtContextError(Exception):
    """Base class for all artcontext errors."""


class ValidationError(ArtContextError):
    """Input data violates a documented contract."""


# --- vectors and embeddings ---------------------------------------------

class ZeroVector(ArtContextError):
    """A vector with norm below 1e-12 where a direction is required."""


class DimMismatch(ArtContextError):
    """Operands disagree on vector/matrix dimensions."""


class EmptyCandidates(ArtContextError):
    """A similarity search was given no candidate rows."""


class AllDegenerate(ArtContextError):
    """Every candidate row was a zero vector."""


class FormatError(ArtContextError):
    """A binary file does not match its declared layout."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class UnsupportedVersion(ArtContextError):
    """The file's format version is not supported by this build."""


class ProviderError(ArtContextError):
    """An embedding provider failed; carries the failing batch range."""

    def __init__(self, message: str, batch_start: int, batch_end: int):
        super().__init__(f"{message} (batch rows {batch_start}..{batch_end})")
        self.batch_start = batch_start
        self.batch_end = batch_end


# --- discovery -----------------------------------------------------------

class NetworkError(ArtContextError):
    """Transient transport failure; harvest retries with backoff."""


class RateLimited(ArtContextError):
    """Server asked us to slow down; carries the advised delay."""

    def __init__(self, retry_after: float):
        super().__init__(f"rate limited, retry after {retry_after}s")
        self.retry_after = retry_after


class MalformedResponse(ArtContextError):
    """A response page could not be parsed; the page is skipped."""


# --- alignment -----------------------------------------------------------

class NoContexts(ArtContextError):
    """A painting's creator has no harvested contexts to align against."""


# --- adapter training ----------------------------------------------------

class RankTooLarge(ArtContextError):
    """Requested rank exceeds min(d_in, d_out)."""


class BatchTooSmall(ArtContextError):
    """Contrastive loss needs at least two pairs per batch."""


class InsufficientData(ArtContextError):
    """Not enough pairs to run training at the configured batch size."""


# --- evaluation ----------------------------------------------------------

class NoPositives(ArtContextError):
    """A query has no positive labels; its PR curve is undefined."""


class EmptyInput(ArtContextError):
    """An aggregate operation received an empty collection."""


class GridMismatch(ArtContextError):
    """Curves to be averaged are not on the shared recall grid."""


# --- pipeline ------------------------------------------------------------

class StaleInput(ArtContextError):
    """Upstream stage outputs are missing or changed since their manifest."""


class StageFailure(ArtContextError):
    """A stage body failed; wraps the causing module error."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


class UnknownPainting(ArtContextError):
    """A qid was requested that is not present in the paintings file."""
