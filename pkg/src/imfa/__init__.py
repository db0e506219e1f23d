"""Staged Transformer detection with sparse multi-scale feature sampling."""

from .errors import (ConfigError, ContractError, DataError, DatasetIOError,
                     DimensionError, ImfaError, NumericError)
from .params import Binding, Params
from .stage import (PipelineResult, SampledTokenSet, StageConfig, StageState,
                    init_pipeline_params, run_baseline, run_iterative_encoding,
                    run_model, run_pipeline, run_stage)
from .tensor import GradCheckReport, GradMap, Tape, Tensor, check_gradient
from .transformer import QuerySet

__version__ = "0.1.0"

__all__ = [
    "Binding", "ConfigError", "ContractError", "DataError", "DatasetIOError",
    "DimensionError", "GradCheckReport", "GradMap", "ImfaError",
    "NumericError", "Params", "PipelineResult", "QuerySet", "SampledTokenSet",
    "StageConfig", "StageState", "Tape", "Tensor", "check_gradient",
    "init_pipeline_params", "run_baseline", "run_iterative_encoding",
    "run_model", "run_pipeline", "run_stage",
]
