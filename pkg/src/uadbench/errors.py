"""Exception types shared across the benchmark."""


class UadBenchError(Exception):
    """Base class for all benchmark errors."""


class ConfigError(UadBenchError):
    """Invalid or inconsistent configuration values."""


class VolumeDecodeError(UadBenchError):
    """A volume file could not be parsed; the message names the offending field."""


class VolumeIntegrityError(UadBenchError):
    """Header and payload disagree (shape or byte count mismatch)."""


class PlacementError(UadBenchError):
    """A synthetic lesion could not be placed after bounded retries."""

    def __init__(self, attempts: int):
        self.attempts = attempts
        super().__init__(f"could not place lesion inside brain after {attempts} attempts")


class TrainingDivergedError(UadBenchError):
    """Loss became non-finite during training."""

    def __init__(self, step: int, last_finite_loss: float):
        self.step = step
        self.last_finite_loss = last_finite_loss
        super().__init__(
            f"non-finite loss at step {step} (last finite loss {last_finite_loss:.6g})"
        )


class ThresholdLeakError(UadBenchError):
    """Attempted to fit an estimated threshold on test-split data."""


class DegenerateRangeWarning(UserWarning):
    """Normalization hit a constant-intensity volume."""


class ZeroVarianceWarning(UserWarning):
    """A computation fell back to a degenerate-variance path."""
