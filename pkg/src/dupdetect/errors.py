"""Exception hierarchy shared by every stage of the pipeline."""


class DupDetectError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(DupDetectError):
    """Inconsistent configuration: mismatched dims, provider tags, credentials."""


class DomainError(DupDetectError, ValueError):
    """A numerical precondition failed (zero-norm vector, empty batch, ...)."""


class FormatError(DupDetectError):
    """A binary or text file does not match its declared layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class IngestError(DupDetectError):
    """Input data is too broken to build a corpus from."""


class NotFoundError(DupDetectError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "not found"


class EmptyTextError(DupDetectError, ValueError):
    """A post or query has no text left after cleaning."""


class RemoteEmbeddingError(DupDetectError):
    """The embeddings endpoint failed with a non-retryable status."""
