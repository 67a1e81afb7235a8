"""Exception types shared across the toolkit.

Each class carries a ``subsystem`` tag so the CLI can surface
module-qualified error names (e.g. ``audio_frontend.TooShort``).
"""


class PatchVCError(Exception):
    """Base class for all domain errors raised by this package."""

    subsystem = "patchvc"


# audio frontend

class UnreadableFile(PatchVCError):
    subsystem = "audio_frontend"


class EmptyAudio(PatchVCError):
    subsystem = "audio_frontend"


class TooShort(PatchVCError):
    subsystem = "audio_frontend"


class AllFramesRemoved(PatchVCError):
    subsystem = "audio_frontend"


# model core

class ShapeMismatch(PatchVCError):
    subsystem = "model_core"


class InvalidLayerIndex(PatchVCError):
    subsystem = "model_core"


class NotEnoughSpatialPositions(PatchVCError):
    subsystem = "model_core"


# losses

class DimensionMismatch(PatchVCError):
    subsystem = "losses"


class NonPositiveTemperature(PatchVCError):
    subsystem = "losses"


class LayerSetMismatch(PatchVCError):
    subsystem = "losses"


# training engine

class EmptyCorpus(PatchVCError):
    subsystem = "training_engine"


class DivergedLoss(PatchVCError):
    subsystem = "training_engine"


# conversion pipeline

class VocoderUnavailable(PatchVCError):
    subsystem = "conversion_pipeline"


class MelConfigMismatch(PatchVCError):
    subsystem = "conversion_pipeline"


# evaluation

class EmbedderUnavailable(PatchVCError):
    subsystem = "evaluation"


class MissingReference(PatchVCError):
    subsystem = "evaluation"


# configuration / CLI

class UnknownConfigKey(PatchVCError):
    """Raised for config keys outside the documented schema; maps to a usage error."""

    subsystem = "cli"
