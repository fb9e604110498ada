"""Exceptions raised by s4ecg"""


class S4EcgError(ValueError):
    """Base class for all domain errors of s4ecg"""


class ShapeError(S4EcgError):
    """Raised when tensor or array shapes are incompatible"""


class DiscretizationError(S4EcgError):
    """Raised when a continuous-time system cannot be discretized"""


class HorizonError(S4EcgError):
    """Raised when a sequence is too short for the forecast horizon"""


class SamplingError(S4EcgError):
    """Raised when not enough negative candidates can be drawn"""


class CheckpointError(S4EcgError):
    """Raised when a checkpoint cannot be read or does not match a model"""


class ManifestError(S4EcgError):
    """Raised when a manifest row or signal file is invalid"""

    def __init__(self, record_id: str, message: str) -> None:
        super().__init__(f"record {record_id}: {message}")
        self.record_id = record_id


class ConfigError(S4EcgError):
    """Raised when a configuration is invalid or unreadable"""


class LabelError(S4EcgError):
    """Raised for invalid targets or label vocabularies"""


class MetadataError(S4EcgError):
    """Raised when patient metadata is missing or cannot be imputed"""


class OptimizerError(S4EcgError):
    """Raised when an optimizer update cannot be applied"""


class StatisticsError(S4EcgError):
    """Raised for invalid inputs to the evaluation statistics"""
