"""Exception taxonomy shared across the toolkit.

Every failure mode that callers are expected to branch on gets its own
class so the service layer and the CLI can map errors to exit codes
without string matching.
"""


class ConceptSwapError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(ConceptSwapError):
    """Bad config file, unknown key, or malformed override."""


class ParamError(ConceptSwapError):
    """A parameter is outside its documented domain."""


class ShapeError(ConceptSwapError):
    """Array shapes or grids do not line up."""


class TimestepError(ConceptSwapError):
    """Timestep outside the schedule's valid range."""


class TokenLimitExceeded(ConceptSwapError):
    """Prompt tokenizes to more tokens than the backend allows."""


class PromptError(ConceptSwapError):
    """Concept word missing from the prompt it must appear in."""


class UnsupportedBackend(ConceptSwapError):
    """Operation requires a backend capability that is not available."""


class ContractError(ConceptSwapError):
    """Caller violated an internal protocol (mismatched branches, cold cache)."""


class NumericalError(ConceptSwapError):
    """NaN or Inf appeared in an optimization quantity."""


class EmptyMask(ConceptSwapError):
    """Thresholded saliency selected no foreground cells."""


class DegenerateAttention(ConceptSwapError):
    """Saliency map is constant; no threshold can localize anything."""


class LayoutError(ConceptSwapError):
    """Benchmark directory does not match the expected layout."""


class ScorerUnavailable(ConceptSwapError):
    """A metric needs an embedding client that was not supplied."""


class MultiSwapError(ConceptSwapError):
    """A stage of a sequential multi-concept swap failed.

    Carries the zero-based stage index and the underlying error.
    """

    def __init__(self, stage: int, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage} failed: {cause}")
