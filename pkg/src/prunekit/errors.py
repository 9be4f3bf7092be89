"""Exception types shared across the package."""


class PrunekitError(Exception):
    """Base class for all package errors."""


# --- model container / mask / checkpoint I/O ---

class ModelLoadError(PrunekitError):
    """A model container could not be loaded."""


class MissingModelFileError(ModelLoadError):
    """Manifest or a referenced tensor file does not exist."""


class ManifestError(ModelLoadError):
    """Manifest is malformed or references an unsupported layout."""


class ShapeMismatchError(ModelLoadError):
    """Declared tensor shape disagrees with the stored byte length."""


class NonFiniteWeightsError(ModelLoadError):
    """A stored tensor contains NaN or infinite values."""


class MaskFileError(PrunekitError):
    """A mask file is malformed or inconsistent with the model."""


class CheckpointError(PrunekitError):
    """A checkpoint could not be read or written."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version is newer than this build supports."""


class CheckpointCorruptError(CheckpointError):
    """Checkpoint file exists but cannot be parsed."""


# --- contract violations inside operations ---

class ContractViolationError(PrunekitError):
    """Caller passed arrays whose lengths or shapes disagree."""


class UnknownLayerError(PrunekitError):
    """Named layer does not exist in the model."""


class UnsupportedKindError(PrunekitError):
    """Operation applied to a layer kind it does not support."""


class ChannelRemovalRefusedError(PrunekitError):
    """Channel removal would disconnect the layer entirely."""


class InsufficientLayersError(PrunekitError):
    """Not enough eligible layers to sample from."""


# --- evaluators / trainers ---

class EvaluatorError(PrunekitError):
    """An evaluator or trainer call failed."""


class CapabilityError(EvaluatorError):
    """Requested operation is not supported by the evaluator."""


class ProtocolError(EvaluatorError):
    """External evaluator sent a malformed or unexpected message."""


class HandshakeError(ProtocolError):
    """External evaluator failed the initial describe exchange."""


class DivergenceError(EvaluatorError):
    """Training produced a non-finite loss."""


# --- configuration / fixtures ---

class ConfigError(PrunekitError):
    """Run configuration is invalid or contains unknown keys."""


class FixtureBoundsError(PrunekitError):
    """Fixture generation request exceeds desk-scale bounds."""
