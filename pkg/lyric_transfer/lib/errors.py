"""
Exception hierarchy of the lyric transcription pipeline.

Every error a pipeline operation raises derives from `LyricTransferError`, so the command line can
catch one base class, print a machine-readable record and exit with a nonzero code. Errors caused by
an invalid value also derive from `ValueError` so library callers can catch them the usual way.

Conditions that are reported but not raised (infeasible CTC targets, empty WER references,
unfinished decodes, dropped text lines, removed annotations) are flagged on the returned objects
instead.
"""
from typing import Optional


class LyricTransferError(Exception):
    """
    Base class for every error raised by the pipeline.

    Args:
        message (str): Human-readable description.
        key (Optional[str]): Configuration key or record field the error relates to, if any.
    """

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.message = message
        self.key = key

    def to_record(self) -> dict:
        """
        Returns the machine-readable error record printed by the CLI.
        """
        return {"error": type(self).__name__, "message": self.message, "key": self.key}


class ShapeMismatchError(LyricTransferError, ValueError):
    """Operand shapes do not conform for an array operation."""

    def __init__(self, op: str, *shapes):
        rendered = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {rendered}")
        self.op = op
        self.shapes = shapes


class NonScalarRootError(LyricTransferError, ValueError):
    """`backward` was called on a node whose value is not a scalar."""


class UnknownSymbolError(LyricTransferError, ValueError):
    """A character has no entry in the token inventory."""


class InvalidIdError(LyricTransferError, ValueError):
    """A token id is out of range or is a control token where text was expected."""


class InputTooShortError(LyricTransferError, ValueError):
    """The encoder input is shorter than the receptive field of the convolution stack."""


class LengthMismatchError(LyricTransferError, ValueError):
    """A per-frame array does not have the expected number of frames."""


class DimensionMismatchError(LyricTransferError, ValueError):
    """Vector dimensions of frames and codewords differ."""


class ZeroNormVectorError(LyricTransferError, ValueError):
    """Cosine similarity requested for a zero vector."""


class NotEnoughFramesError(LyricTransferError, ValueError):
    """Fewer than two masked frames are available to draw distractors from."""


class InvalidExtensionError(LyricTransferError, ValueError):
    """A CTC prefix was extended with the blank token."""


class StateMismatchError(LyricTransferError, ValueError):
    """A decoder state was built for encoder features of another length or size."""


class EmptyTargetError(LyricTransferError, ValueError):
    """A sequence-to-sequence loss was requested for an empty target."""


class InvalidTokenError(LyricTransferError, ValueError):
    """The language model was fed a token it does not model (blank or out of range)."""


class EmptyCorpusError(LyricTransferError, ValueError):
    """A training corpus holds no usable line."""


class AllUtterancesFilteredError(LyricTransferError):
    """Every training utterance was removed by the duration filter."""


class CheckpointMismatchError(LyricTransferError):
    """A checkpoint was built for another architecture or token inventory."""


class TargetTooLargeError(LyricTransferError, ValueError):
    """A subset target duration exceeds the manifest total."""


class ConfigError(LyricTransferError, ValueError):
    """A configuration value violates its constraint."""
