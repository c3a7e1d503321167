"""Reptile meta-learning for few-shot graph regression with GCN, GAT, MPNN and EGNN models."""

__version__ = "0.1.0"

from .ensemble import Ensemble, ensemble_adapt, ensemble_init, ensemble_predict
from .errors import (ContractError, DegenerateDataError, DimensionError, DivergenceError, DomainError,
                     MetaGNNError, ParseError, SchemaError)
from .evaluation import EvalReport, TrialCurve, aggregate_across_tasks, baseline_random, evaluate, kshot_trial
from .graphs import (Dataset, Graph, Normalizer, SupportBatch, SynthSpec, Task, load_dataset, make_batch,
                     sample_support, save_dataset, split_dataset, synth_generate, zscore_apply, zscore_fit,
                     zscore_invert)
from .layers import Architecture, GraphBatch, ModelParams, model_forward, model_init
from .meta import MetaConfig, TrainLog, inner_adapt, reptile_meta_update, reptile_train
from .tensor import ParamSet, Tape, Tensor, apply_primitive, backward, finite_diff_check, sgd_step

__all__ = [
    "Architecture", "ContractError", "Dataset", "DegenerateDataError", "DimensionError", "DivergenceError",
    "DomainError", "Ensemble", "EvalReport", "Graph", "GraphBatch", "MetaConfig", "MetaGNNError",
    "ModelParams", "Normalizer", "ParamSet", "ParseError", "SchemaError", "SupportBatch", "SynthSpec",
    "Tape", "Task", "Tensor", "TrainLog", "TrialCurve", "aggregate_across_tasks", "apply_primitive",
    "backward", "baseline_random", "ensemble_adapt", "ensemble_init", "ensemble_predict", "evaluate",
    "finite_diff_check", "inner_adapt", "kshot_trial", "load_dataset", "make_batch", "model_forward",
    "model_init", "reptile_meta_update", "reptile_train", "sample_support", "save_dataset", "sgd_step",
    "split_dataset", "synth_generate", "zscore_apply", "zscore_fit", "zscore_invert",
]
