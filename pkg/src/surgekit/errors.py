"""Exception hierarchy shared across surgekit."""


class SurgekitError(Exception):
    """Base class for all surgekit errors."""


class DimensionError(SurgekitError, ValueError):
    """Tensor shapes are incompatible for an operation."""


class ContractError(SurgekitError, RuntimeError):
    """An API precondition was violated (e.g. non-scalar loss passed to backward)."""


class ConfigError(SurgekitError, ValueError):
    """Invalid configuration or hyperparameters."""


class DataError(SurgekitError, ValueError):
    """Input data is empty, non-finite or otherwise unusable."""


class IngestionError(DataError):
    """A file could not be parsed; ``offset`` is the byte offset when known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class AlignmentError(DataError):
    """Two series that must share timestamps do not."""


class MetricError(SurgekitError, ValueError):
    """A metric is undefined for the given inputs (e.g. constant truth series)."""


class TrainingDiverged(SurgekitError, RuntimeError):
    """Loss or gradients became non-finite during training."""

    def __init__(self, message, epoch=None, parameter=None):
        super().__init__(message)
        self.epoch = epoch
        self.parameter = parameter


class TransportError(SurgekitError, RuntimeError):
    """A remote request failed after all retries."""


class ParseError(IngestionError):
    """A remote payload could not be decoded; the message names the offending record."""


class NoDataError(DataError):
    """A remote query returned no records."""
