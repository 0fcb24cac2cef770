"""Exception types shared across the package."""


class SkelAlignError(Exception):
    """Base class for all skelalign errors."""


class InvalidGraphError(SkelAlignError):
    """Skeleton graph violates a structural requirement."""


class UnsupportedPartitionError(SkelAlignError):
    """No shipped partition table for the requested (name, skeleton) pair."""


class PartitionError(SkelAlignError):
    """Partition groups are unusable (empty group, bad joint index)."""


class ShapeError(SkelAlignError):
    """Array shapes inconsistent with the operation's contract."""


class ConfigError(SkelAlignError):
    """Invalid configuration or precondition violation."""


class CorpusError(SkelAlignError):
    """Description corpus is missing required entries."""


class BankLookupError(SkelAlignError):
    """Requested (class, slot) entry not present in a text feature bank."""


class DegenerateFeatureError(SkelAlignError):
    """A feature row has (near-)zero norm where cosine similarity is needed."""


class DataFormatError(SkelAlignError):
    """On-disk artifact is corrupt or inconsistent with its metadata."""


class DivergenceError(SkelAlignError):
    """Training produced a non-finite loss or gradient."""
