"""Exception types raised across the pipeline."""


class ATFLRecError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(ATFLRecError, ValueError):
    """Operand shapes are incompatible."""


class RankError(ATFLRecError, ValueError):
    """A tensor has the wrong rank for the operation (e.g. non-scalar loss)."""


class EmptyStackError(ATFLRecError, ValueError):
    """A pooling operation received nothing to pool."""


class DegenerateBatchError(ATFLRecError, ValueError):
    """Batch statistics requested on a batch of one."""


class WavParseError(ATFLRecError, ValueError):
    """Malformed RIFF/WAVE container."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class CodecError(ATFLRecError, ValueError):
    """WAV payload uses an encoding we do not decode."""


class SignalTooShortError(ATFLRecError, ValueError):
    """Signal is shorter than a single analysis frame."""


class FFTSizeError(ATFLRecError, ValueError):
    """FFT length is not a power of two."""


class ResolutionError(ATFLRecError, ValueError):
    """Too many mel filters for the FFT frequency resolution."""


class ConfigError(ATFLRecError, ValueError):
    """Invalid or inconsistent configuration."""


class MissingModalityError(ATFLRecError, ValueError):
    """A variant needs audio but the sample has none."""


class EmptyInputError(ATFLRecError, ValueError):
    """Attention mask selects no tokens."""


class IntegrityError(ATFLRecError, ValueError):
    """Dataset references items that do not exist, or violates record invariants."""


class SampleSizeError(ATFLRecError, ValueError):
    """Requested more samples than the split holds."""


class TrainingContractError(ATFLRecError, RuntimeError):
    """The training loop's preconditions do not hold."""


class DivergenceError(ATFLRecError, FloatingPointError):
    """Loss became non-finite."""

    def __init__(self, iteration: int, value: float):
        super().__init__(f"non-finite loss {value!r} at optimizer iteration {iteration}")
        self.iteration = iteration


class UndefinedMetricError(ATFLRecError, ValueError):
    """Metric is undefined for the given labels (e.g. AUC with one class)."""


class ScheduleRangeError(ATFLRecError, ValueError):
    """Iteration outside the learning-rate schedule."""


class FeatureExtractionError(ATFLRecError):
    """Audio for an item could not be turned into features; carries the path."""

    def __init__(self, path, cause: Exception):
        super().__init__(f"{path}: {cause}")
        self.path = str(path)
