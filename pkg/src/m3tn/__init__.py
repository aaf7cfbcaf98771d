"""Multi-gate mixture-of-experts uplift modeling for multi-valued treatments."""

from .data import Dataset, DatasetSchema, SyntheticSpec, generate_synthetic, load_csv, split
from .errors import ConfigError, DataError, MetricError, StateError, TrainingError, UpliftError
from .metrics import ArmSlice, EvaluationReport, evaluate, kendall_uplift, qini_curve
from .models import ModelConfig, ModelKind, UpliftPrediction, build_model, predict_uplift

__version__ = "0.1.0"

__all__ = [
    "ArmSlice", "ConfigError", "DataError", "Dataset", "DatasetSchema", "EvaluationReport",
    "MetricError", "ModelConfig", "ModelKind", "StateError", "SyntheticSpec", "TrainingError",
    "UpliftError", "UpliftPrediction", "build_model", "evaluate", "generate_synthetic",
    "kendall_uplift", "load_csv", "predict_uplift", "qini_curve", "split",
]
