"""Exception hierarchy.

Validation errors map to CLI exit code 2, everything else to exit code 3.
"""


class ConvStyleError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(ConvStyleError):
    """Input failed a contract check before any work was done."""


# frontend
class UnknownTag(ValidationError):
    pass


class MalformedMarkup(ValidationError):
    pass


class NonWordEmphasis(ValidationError):
    pass


class OovWord(ValidationError):
    pass


class VocabularyMismatch(ValidationError):
    pass


# features
class EmptyAudio(ValidationError):
    pass


class DurationMismatch(ValidationError):
    pass


class NoVoicedFrames(ConvStyleError):
    pass


# models
class HpcShapeMismatch(ValidationError):
    pass


class EmptyOutput(ConvStyleError):
    pass


class StageMismatch(ValidationError):
    pass


class MissingBaseCheckpoint(ValidationError):
    pass


class UntrainedModel(ValidationError):
    pass


class SpeakerOutOfRange(ValidationError):
    pass


class MissingEncoder(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


# augmentation / experiments
class ConversionFailure(ConvStyleError):
    pass


class IncompleteCorpus(ValidationError):
    pass


class ValidationFailure(ValidationError):
    pass


# checkpoint selection
class DegenerateInterval(ConvStyleError):
    pass


class TooFewWords(ValidationError):
    pass


class SynthesisFailure(ConvStyleError):
    pass
