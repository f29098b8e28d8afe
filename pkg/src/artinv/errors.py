"""Exception types shared across the package."""


class ArtinvError(Exception):
    """Base class for every package-specific error."""


class ShapeMismatch(ArtinvError, ValueError):
    """An array does not have the channel/frame layout the operation expects."""


class ConstantChannel(ArtinvError, ValueError):
    """A channel has zero dynamic range, so min-max statistics are undefined."""


class WindowTooLarge(ArtinvError, ValueError):
    """A smoothing window exceeds the signal length."""


class EmptyAudio(ArtinvError, ValueError):
    """An audio buffer is empty."""


class AudioTooShort(ArtinvError, ValueError):
    """An audio buffer is shorter than one analysis window."""


class DurationMismatch(ArtinvError, ValueError):
    """Audio and articulatory streams disagree about utterance duration."""


class UnknownSpeaker(ArtinvError, ValueError):
    """A speaker id is not present in the manifest."""


class MissingCache(ArtinvError, FileNotFoundError):
    """A required feature-cache entry does not exist."""


class DimMismatch(ArtinvError, ValueError):
    """A feature matrix has the wrong dimensionality for the layer."""


class SpanTooLong(ArtinvError, ValueError):
    """A masking span does not fit inside the sequence."""


class ConstantInput(ArtinvError, ValueError):
    """A correlation was requested for a zero-variance signal."""


class NonFiniteLoss(ArtinvError, RuntimeError):
    """A training objective produced NaN or Inf."""


class ManifestError(ArtinvError, ValueError):
    """A corpus manifest is malformed or references missing files."""


class ConfigError(ArtinvError, ValueError):
    """A configuration file or override contains unknown or invalid keys."""
