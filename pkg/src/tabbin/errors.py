"""Exception types shared across the package."""


class TabbinError(Exception):
    """Base class for all package-specific errors."""


class SchemaError(TabbinError):
    """Input document violates the canonical table JSON schema."""


class ShapeError(TabbinError):
    """Structurally inconsistent table (ragged grid, leaf-count mismatch)."""


class ConfigError(TabbinError):
    """Invalid configuration (dictionary sizes, LSH parameters, ...)."""


class NonFiniteError(TabbinError):
    """A NaN or Inf appeared where only finite values are allowed."""


class CellTooLargeError(TabbinError):
    """A single cell plus its delimiters exceeds the sequence budget."""


class NoSequencesError(TabbinError):
    """A corpus yields no token sequences for the requested segment."""


class TooFewCellsError(TabbinError):
    """Sequence does not cover enough cells for the requested cloze."""


class ZeroVectorError(TabbinError):
    """Cosine similarity is undefined for a zero vector."""


class EmptyUnitError(TabbinError):
    """Pooling over an empty token index set."""


class EmptyExemplarError(TabbinError):
    """Centroid of an empty exemplar list."""


class NoRelevantError(TabbinError):
    """A ranked query has no relevant items anywhere in the pool."""


class MissingModelError(TabbinError):
    """A composite recipe needs a segment model that was never trained."""


class RangeOrderError(TabbinError):
    """Range endpoints out of order (lo > hi)."""


class FormatError(TabbinError):
    """Unrecognized or unsupported persisted-container format."""


class ChecksumError(TabbinError):
    """Persisted tensor data fails its integrity check."""
