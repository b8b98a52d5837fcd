"""Surrogate storm-surge models on gridded winds and tide-gauge levels."""

from .errors import (
    AlignmentError, ConfigError, ContractError, DataError, DimensionError, IngestionError,
    MetricError, SurgekitError, TrainingDiverged,
)
from .models import ArchitectureKind, ModelGraph, build_model, load_model
from .tensor import GradTape, Parameter, Tensor
from .training import (
    MetricsReport, TrainConfig, adam_step, correlation_coefficient, evaluate, fit, holdout_repeat,
    mse_loss, r_squared,
)

__version__ = "0.1.0"
