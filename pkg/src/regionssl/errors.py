"""Exception types shared across the package."""


class RegionSSLError(Exception):
    """Base class for all package-specific errors."""


class DegenerateBox(RegionSSLError):
    """A box collapsed to zero or negative extent."""


class EmptyProposalSet(RegionSSLError):
    """An operation that needs at least one proposal received none."""


class NoSurvivingProposals(RegionSSLError):
    """Every proposal was dropped while remapping into a view."""


class ShapeMismatch(RegionSSLError):
    """Array operands do not share the required shape."""


class ShapeError(RegionSSLError):
    """An array has the wrong rank or an unusable size."""


class EmptyFeature(RegionSSLError):
    """A feature vector has zero length."""


class NonUnitNorm(RegionSSLError):
    """A feature that must be unit-normalized is not."""


class EmptyBank(RegionSSLError):
    """A feature bank that must hold entries is empty."""


class ZeroSimilarity(RegionSSLError):
    """A cosine-similarity denominator is numerically zero."""


class InsufficientFixtures(RegionSSLError):
    """Not enough probe fixtures to aggregate a report."""


class EmptyDataset(RegionSSLError):
    """A dataset that must hold images is empty."""


class SceneSpecError(RegionSSLError):
    """A synthetic-scene specification is inconsistent."""


class ParseError(RegionSSLError):
    """A data file failed validation; carries the offending line."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MissingImage(RegionSSLError):
    """A record references an image id or file that cannot be resolved."""


class ConfigError(RegionSSLError):
    """A configuration value is missing, unparsable, or out of range."""


class DataError(RegionSSLError):
    """A dataset or proposal source could not be used for training."""


class UnknownCommand(RegionSSLError):
    """The CLI was invoked with a subcommand it does not provide."""
