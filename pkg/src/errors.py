"""Error categories raised across the package."""

from typing import Optional


class Bort2Error(Exception):
    """Base class for every error raised by this package"""


class ConfigurationError(Bort2Error, ValueError):
    """Invalid configuration value or combination of values"""


class IngestionError(Bort2Error):
    """A dataset on disk could not be read into a MultiDomainDataset"""


class DomainError(Bort2Error, ValueError):
    """An argument lies outside the mathematical domain of an operation"""


class ContractError(Bort2Error):
    """A caller broke the pre-conditions of an operation"""


class DivergenceError(Bort2Error):
    """A loss or an intermediate quantity became non-finite"""

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class CheckpointError(Bort2Error):
    """A checkpoint could not be loaded (version, hash or content mismatch)"""


class MissingMetricError(Bort2Error):
    """A run directory lacks a metric required for plotting or summarizing"""
