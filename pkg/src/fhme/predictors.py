"""Point predictors of theta_i = exp(phi_i) on the original scale.

All predictors are formed on the log scale and exponentiated last, since
log-scale values in the applications reach the high 30s.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .model import (
    AreaArrays,
    AreaLike,
    AreaObservation,
    LogScaleOverflow,
    ModelParams,
    as_arrays,
    derive,
)

__all__ = [
    "PredictionSet",
    "MultivariateArea",
    "MultiParams",
    "log_predictor_a",
    "log_predictor_b",
    "predictor_a",
    "predictor_b",
    "predictor_no_me",
    "predictor_fheblup",
    "predictor_a_multi",
    "predictor_b_multi",
    "predict_all",
    "log_predictors_arrays",
]


def _exp(log_value: float, what: str) -> float:
    try:
        return math.exp(log_value)
    except OverflowError:
        raise LogScaleOverflow(what, log_value) from None


def log_predictor_a(params: ModelParams, area: AreaObservation) -> float:
    dq = derive(params, area)
    g = dq.gamma_tilde
    return g * area.z + (1.0 - g) * (params.beta0 + params.beta1 * area.w) + 0.5 * g * area.psi


def log_predictor_b(params: ModelParams, area: AreaObservation) -> float:
    return log_predictor_a(params, area) - 0.5 * derive(params, area).d


def predictor_a(params: ModelParams, area: AreaObservation) -> float:
    """Conditional mean of exp(phi_i) given (z_i, W_i); biased when beta1^2 C_i > 0."""
    return _exp(log_predictor_a(params, area), "predictor A")


def predictor_b(params: ModelParams, area: AreaObservation) -> float:
    """Predictor A scaled by exp(-d_i / 2), which removes its bias."""
    return _exp(log_predictor_b(params, area), "predictor B")


def _log_fh(params: ModelParams, z: float, psi: float, covariate: float) -> float:
    gs = params.sigma2v / (params.sigma2v + psi)
    return gs * z + (1.0 - gs) * (params.beta0 + params.beta1 * covariate) + 0.5 * gs * psi


def predictor_no_me(params: ModelParams, area: AreaObservation) -> float:
    """Predictor that ignores the measurement error: C_i treated as 0 at W_i."""
    return _exp(_log_fh(params, area.z, area.psi, area.w), "no-ME predictor")


def predictor_fheblup(params: ModelParams, area: AreaObservation, x: float) -> float:
    """Transformed Fay-Herriot predictor with an error-free covariate ``x``."""
    if not math.isfinite(x):
        raise ValueError("x must be finite")
    return _exp(_log_fh(params, area.z, area.psi, x), "FHeblup")


@dataclass(frozen=True)
class MultiParams:
    beta0: float
    beta: tuple
    sigma2v: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        if self.sigma2v < 0:
            raise ValueError("sigma2v must be >= 0")


@dataclass(frozen=True)
class MultivariateArea:
    z: float
    psi: float
    w_vec: tuple
    c_diag: tuple

    def __post_init__(self) -> None:
        object.__setattr__(self, "w_vec", tuple(float(v) for v in self.w_vec))
        object.__setattr__(self, "c_diag", tuple(float(v) for v in self.c_diag))
        if len(self.w_vec) != len(self.c_diag):
            raise ValueError("w_vec and c_diag must have the same length")
        if self.psi <= 0:
            raise ValueError("psi must be > 0")
        if any(v < 0 for v in self.c_diag):
            raise ValueError("c_diag entries must be >= 0")


def _log_multi(params: MultiParams, area: MultivariateArea) -> tuple[float, float]:
    if len(params.beta) != len(area.w_vec):
        raise ValueError(f"beta has length {len(params.beta)} but the area has {len(area.w_vec)} covariates")
    quad = sum(b * b * c for b, c in zip(params.beta, area.c_diag))
    s = quad + params.sigma2v + area.psi
    g = (quad + params.sigma2v) / s
    lin = params.beta0 + sum(b * w for b, w in zip(params.beta, area.w_vec))
    log_a = g * area.z + (1.0 - g) * lin + 0.5 * g * area.psi
    d = 2.0 * area.psi * quad / s
    return log_a, d


def predictor_a_multi(params: MultiParams, area: MultivariateArea) -> float:
    log_a, _ = _log_multi(params, area)
    return _exp(log_a, "predictor A")


def predictor_b_multi(params: MultiParams, area: MultivariateArea) -> float:
    log_a, d = _log_multi(params, area)
    return _exp(log_a - 0.5 * d, "predictor B")


@dataclass(frozen=True)
class PredictionSet:
    """All predictors for one area, stored on the log scale."""

    area_id: str
    log_direct: float
    log_no_me: float
    log_a: float
    log_b: float
    log_fheblup: Optional[float] = None

    @property
    def direct(self) -> float:
        return _exp(self.log_direct, "direct estimate")

    @property
    def pred_no_me(self) -> float:
        return _exp(self.log_no_me, "no-ME predictor")

    @property
    def pred_a(self) -> float:
        return _exp(self.log_a, "predictor A")

    @property
    def pred_b(self) -> float:
        return _exp(self.log_b, "predictor B")

    @property
    def pred_fheblup(self) -> Optional[float]:
        return None if self.log_fheblup is None else _exp(self.log_fheblup, "FHeblup")


def log_predictors_arrays(params: ModelParams, arr: AreaArrays) -> dict[str, np.ndarray]:
    """Vectorised log-scale predictors A, B and no-ME for every area."""
    b0, b1, s2v = params.beta0, params.beta1, params.sigma2v
    b1sq_c = b1 * b1 * arr.c
    s = b1sq_c + s2v + arr.psi
    g = (b1sq_c + s2v) / s
    log_a = g * arr.z + (1.0 - g) * (b0 + b1 * arr.w) + 0.5 * g * arr.psi
    d = 2.0 * arr.psi * b1sq_c / s
    gs = s2v / (s2v + arr.psi)
    log_no_me = gs * arr.z + (1.0 - gs) * (b0 + b1 * arr.w) + 0.5 * gs * arr.psi
    return {"a": log_a, "b": log_a - 0.5 * d, "no_me": log_no_me, "d": d, "gamma_tilde": g}


def predict_all(
    params: ModelParams,
    areas: AreaLike,
    params_no_me: Optional[ModelParams] = None,
    x_exact: Optional[Sequence[float]] = None,
    params_fheblup: Optional[ModelParams] = None,
) -> list[PredictionSet]:
    """Every applicable predictor for every area.

    The no-ME predictor uses ``params`` with C_i set to 0 unless a separate
    no-ME fit is passed in ``params_no_me``.  FHeblup is filled only when
    error-free covariates ``x_exact`` are supplied; it uses
    ``params_fheblup`` (a fit on those covariates) or ``params``.
    """
    arr = as_arrays(areas)
    if arr.m == 0:
        return []
    logs = log_predictors_arrays(params, arr)
    log_no_me = logs["no_me"]
    if params_no_me is not None:
        log_no_me = log_predictors_arrays(params_no_me, arr)["no_me"]
    log_fh = None
    if x_exact is not None:
        x = np.asarray(x_exact, dtype=float)
        if x.shape != arr.z.shape:
            raise ValueError("x_exact must have one value per area")
        fh_params = params_fheblup if params_fheblup is not None else params
        log_fh = log_predictors_arrays(fh_params, arr.with_w(x).with_c(0.0))["no_me"]
    out = []
    for i in range(arr.m):
        out.append(
            PredictionSet(
                area_id=arr.area_id[i],
                log_direct=float(arr.z[i]),
                log_no_me=float(log_no_me[i]),
                log_a=float(logs["a"][i]),
                log_b=float(logs["b"][i]),
                log_fheblup=None if log_fh is None else float(log_fh[i]),
            )
        )
    return out
