"""Exception types shared across the toolkit."""


class DhimError(Exception):
    """Base class for all toolkit errors."""


class FormatError(DhimError):
    """A binary file is malformed: bad magic/version, or payload disagrees with its header."""


class ManifestError(DhimError):
    """A corpus manifest is missing a split or names an unreadable file."""


class ConsistencyError(DhimError):
    """Loaded data violates a cross-document invariant (duplicate ids, mixed dimensions)."""


class ConfigError(DhimError):
    """Incompatible configuration, e.g. a checkpoint applied to a corpus of another dimension."""


class ShapeError(DhimError, ValueError):
    """Operands disagree with declared parameter or code shapes."""


class NumericError(DhimError):
    """Non-finite values encountered where finite ones are required."""


class EvaluationError(DhimError):
    """Retrieval evaluation touched a document without a usable label."""
