"""Exception hierarchy for the engine.

Every raised condition a caller can reasonably branch on gets its own
class; generic invariant breakage goes through ValidationError.
"""


class EngineError(Exception):
    """Base class for all engine errors."""


class ValidationError(EngineError):
    """An input violated a precondition or a type invariant."""


class FormatError(EngineError):
    """A binary file had wrong magic, wrong version, or a truncated payload."""


class WriteError(EngineError):
    """An I/O failure while persisting an artifact."""


class ManifestError(EngineError):
    """A task manifest is malformed or references inconsistent files."""


class DegenerateEmbeddingError(EngineError):
    """A prompt modulation produced a zero-norm embedding."""


class DegenerateGraphError(EngineError):
    """A hypergraph has a zero node or zero hyperedge degree."""


class UndefinedMetricError(EngineError):
    """A metric was requested on inputs where it is undefined."""


class DeterminismError(EngineError):
    """A function that must be deterministic returned differing values."""
