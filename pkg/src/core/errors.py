"""
Exception hierarchy for the alignment lab
"""


class LabError(Exception):
    """Base class for every error the lab raises on purpose"""


class InvalidInputError(LabError, ValueError):
    """An argument value is outside what the operation accepts"""


class ConfigError(LabError, ValueError):
    """A configuration value is unusable; `key` is the dotted path"""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")


class UnknownConfigKeyError(ConfigError):
    def __init__(self, key):
        super().__init__(key, "unknown configuration key")


class ConfigTypeError(ConfigError):
    def __init__(self, key, expected, value):
        super().__init__(key, f"expected {expected}, got {type(value).__name__} ({value!r})")


class ConfigConstraintError(ConfigError):
    pass


class DatasetLoadError(LabError):
    """A persisted dataset could not be read back"""


class DatasetSchemaError(DatasetLoadError):
    pass


class MissingArtifactError(DatasetLoadError):
    pass


class ChecksumMismatchError(DatasetLoadError):
    pass


class CheckpointError(LabError):
    """A model container is unreadable or does not match the requested model"""


class TrainingDivergedError(LabError, RuntimeError):
    """A training loss became non-finite"""


class EvaluationError(LabError):
    pass


class DependencyError(LabError):
    """A stage was asked to run before the artifacts it consumes exist"""

    def __init__(self, stage, missing_paths):
        self.stage = stage
        self.missing_paths = [str(p) for p in missing_paths]
        super().__init__(f"{stage} needs missing artifacts: {', '.join(self.missing_paths)}")
