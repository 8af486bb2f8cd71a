"""Exception hierarchy shared across the package.

The CLI maps these to exit codes: ConfigError -> 1, BackendError -> 2,
DataError -> 3.
"""


class DialoscopeError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(DialoscopeError):
    """Invalid or inconsistent experiment configuration."""


class DataError(DialoscopeError):
    """Malformed dataset, artifact, or metric input."""


class UndefinedCorrelationError(DataError):
    """Correlation requested on constant input; reported instead of NaN."""


class PromptBudgetError(DataError):
    """Prompt budget smaller than the untruncatable zero-shot rendering."""


class BackendError(DialoscopeError):
    """Base class for completion-backend failures."""


class TransportError(BackendError):
    """Connection or timeout failure that persisted through retries."""


class ProtocolError(BackendError):
    """Non-2xx HTTP response or a malformed response payload."""

    def __init__(self, message: str, status_code: int | None = None, body: str = ""):
        super().__init__(message)
        self.status_code = status_code
        self.body = body


class CapabilityError(BackendError):
    """The backend cannot satisfy the request (missing logprobs, fixture key, ...)."""
