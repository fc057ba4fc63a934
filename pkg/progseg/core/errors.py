"""
Exception hierarchy for progseg.

Each family carries the exit code the cli reports for it; `to_record()` gives the
machine-readable error record written on failure.
"""

from . import config


class ProgSegError(Exception):
    exit_code = config.EXIT_DATA_ERROR

    def __init__(self, message: str = "", **details):
        super().__init__(message)
        self.details = details

    def to_record(self) -> dict:
        return {
            "error": type(self).__name__,
            "message": str(self),
            "exit_code": self.exit_code,
            "details": {k: _jsonable(v) for k, v in self.details.items()},
        }


def _jsonable(value):
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    if isinstance(value, (list, tuple, set)):
        return [_jsonable(v) for v in value]
    return str(value)


# --- Families ---

class ConfigError(ProgSegError):
    exit_code = config.EXIT_CONFIG_ERROR


class DataError(ProgSegError):
    exit_code = config.EXIT_DATA_ERROR


class TrainingError(ProgSegError):
    exit_code = config.EXIT_TRAINING_ERROR


# --- Config ---

class InvalidConfig(ConfigError, ValueError):
    pass


class RunExists(ConfigError):
    pass


# --- Raster / data ---

class MissingBand(DataError, ValueError):
    pass


class CorruptFile(DataError):
    pass


class DimensionMismatch(DataError, ValueError):
    pass


class IoError(DataError):
    pass


class WrongValueDomain(DataError, ValueError):
    pass


class InvalidLabel(DataError, ValueError):
    pass


class ImageSmallerThanGrid(DataError, ValueError):
    pass


class IndivisibleDimensions(DataError, ValueError):
    pass


class TooFewTiles(DataError, ValueError):
    pass


class OverfullScene(DataError, ValueError):
    pass


class MissingPatchSet(DataError):
    pass


class NoRunsFound(DataError):
    pass


class EmptyDataset(DataError, ValueError):
    pass


class SizeMismatch(DataError, ValueError):
    pass


# --- Model / training ---

class UnsupportedBackbone(TrainingError, ValueError):
    pass


class BandSubsetViolation(TrainingError, ValueError):
    pass


class ShapeMismatch(TrainingError, ValueError):
    pass


class ChannelMismatch(TrainingError, ValueError):
    pass


class NonDivisibleSize(TrainingError, ValueError):
    pass


class SpecMismatch(TrainingError, ValueError):
    pass


class MissingWeight(TrainingError):
    pass


class OutOfRangeClass(TrainingError, ValueError):
    pass


class NoClassesPresent(TrainingError, ValueError):
    pass
