"""Accelerated approximate unlearning with blend condensation, at desk scale."""

__version__ = "0.1.0"

from .data import Dataset, LabeledSet, Splits, build_splits, gen_gaussian_classes, load_dataset, save_dataset
from .errors import ConsistencyError, DimensionError, FormatError, InputError, LabelError, NumericError, UlabError
from .evaluation import MetricsReport, accuracy, mia_score, report
from .gaussianize import gaussianize, gaussianize_losses, mmd, probit, soft_cdf
from .nn import ModelParams, TrainConfig, forward, grad, init_model, predict, train
from .partition import Partition, kmeans, partition_dataset, sample_F
from .blend import BlendConfig, CondensedSet, blend_loss, build_reduced_retain, condense_free, optimize_blend
from .unlearn import UnlearnConfig, UnlearnResult, a_amu_objective, run_rounds, run_unlearning

__all__ = [
    "BlendConfig", "CondensedSet", "ConsistencyError", "Dataset", "DimensionError", "FormatError",
    "InputError", "LabelError", "LabeledSet", "MetricsReport", "ModelParams", "NumericError", "Partition",
    "Splits", "TrainConfig", "UlabError", "UnlearnConfig", "UnlearnResult", "a_amu_objective", "accuracy",
    "blend_loss", "build_reduced_retain", "build_splits", "condense_free", "forward", "gaussianize",
    "gaussianize_losses", "gen_gaussian_classes", "grad", "init_model", "kmeans", "load_dataset",
    "mia_score", "mmd", "optimize_blend", "partition_dataset", "predict", "probit", "report", "run_rounds",
    "run_unlearning", "sample_F", "save_dataset", "soft_cdf", "train",
]
