"""Small-area estimation under a log-scale Fay-Herriot model whose covariate
is observed with known measurement error."""
from .estimation import FitResult, InfoMatrix, ScoreVector, fit, information_matrix, unbiased_scores
from .model import AreaArrays, AreaObservation, DerivedQuantities, LogScaleOverflow, ModelParams, derive
from .predictors import PredictionSet, predict_all, predictor_a, predictor_b, predictor_fheblup, predictor_no_me
from .uncertainty import BootstrapInterval, MseEstimates, bootstrap_interval, jackknife_mse, r1_hat

__version__ = "0.1.0"

__all__ = [
    "AreaArrays",
    "AreaObservation",
    "BootstrapInterval",
    "DerivedQuantities",
    "FitResult",
    "InfoMatrix",
    "LogScaleOverflow",
    "ModelParams",
    "MseEstimates",
    "PredictionSet",
    "ScoreVector",
    "bootstrap_interval",
    "derive",
    "fit",
    "information_matrix",
    "jackknife_mse",
    "predict_all",
    "predictor_a",
    "predictor_b",
    "predictor_fheblup",
    "predictor_no_me",
    "r1_hat",
    "unbiased_scores",
]
