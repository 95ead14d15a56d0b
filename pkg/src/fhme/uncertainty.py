"""Uncertainty for predictor B: analytical R1 estimate, jackknife MSE and
nonparametric bootstrap prediction intervals."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import partial
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.stats import norm

from . import rng as rngmod
from .estimation import FitResult, fit
from .model import AreaArrays, AreaLike, AreaObservation, LogScaleOverflow, ModelParams, as_arrays
from .parallel import ordered_map
from .predictors import log_predictors_arrays

logger = logging.getLogger(__name__)

__all__ = [
    "MseEstimates",
    "BootstrapInterval",
    "ReplicateBudgetExceeded",
    "r1_hat",
    "log_r1_hat",
    "log_r1_hat_arrays",
    "jackknife_all",
    "jackknife_mse",
    "bootstrap_log_replicates",
    "bootstrap_intervals",
    "bootstrap_interval",
    "empirical_cdf_inverse",
    "normal_interval",
    "direct_interval",
]

FitFn = Callable[[AreaArrays], Union[FitResult, ModelParams, None]]

RESAMPLED = "resampled"
ORIGINAL = "original"


class ReplicateBudgetExceeded(RuntimeError):
    """Too many jackknife or bootstrap refits failed to converge."""


@dataclass(frozen=True)
class MseEstimates:
    r1_hat: float
    mse_j: float
    r1_j: float
    r2_j: float
    negative_flag: bool
    failed_replicates: int = 0


@dataclass(frozen=True)
class BootstrapInterval:
    lower: float
    upper: float
    alpha: float
    bt: int
    replicate_failures: int = 0

    @property
    def log_length(self) -> float:
        width = self.upper - self.lower
        return math.log(width) if width > 0 else -math.inf


# --- analytical R1 -----------------------------------------------------------

def _log_abs_m2(d, gpsi):
    """log |1 - 2 exp(1.5 d - g psi) + exp(d - g psi)| without overflow."""
    a = 1.5 * d - gpsi
    with np.errstate(over="ignore", divide="ignore"):
        direct = np.abs(1.0 - 2.0 * np.exp(a) + np.exp(d - gpsi))
        # for large a factor out exp(a): M2 = exp(a) (exp(-a) - 2 + exp(-d/2))
        factored = a + np.log(np.abs(np.exp(-np.maximum(a, 0.0)) - 2.0 + np.exp(-0.5 * d)))
        return np.where(a > 30.0, factored, np.log(direct))


def log_r1_hat_arrays(params: ModelParams, arr: AreaArrays) -> np.ndarray:
    """log of M2^2 * Lambda per area; -inf where M2 vanishes."""
    b1sq_c = params.beta1 * params.beta1 * arr.c
    s = b1sq_c + params.sigma2v + arr.psi
    g = (b1sq_c + params.sigma2v) / s
    d = 2.0 * arr.psi * b1sq_c / s
    log_m2sq = 2.0 * _log_abs_m2(d, g * arr.psi)
    with np.errstate(divide="ignore"):
        log_lambda = 4.0 * arr.z - 4.0 * arr.psi + np.log(-np.expm1(-4.0 * params.sigma2v - 4.0 * arr.psi))
    return log_m2sq + log_lambda


def log_r1_hat(params: ModelParams, area: AreaObservation) -> float:
    return float(log_r1_hat_arrays(params, as_arrays([area]))[0])


def r1_hat(params: ModelParams, area: AreaObservation) -> float:
    """Plug-in estimate of the leading MSE term of predictor B.

    Raises :class:`LogScaleOverflow` (carrying the log value) when the
    estimate is not representable.
    """
    log_value = log_r1_hat(params, area)
    try:
        return math.exp(log_value)
    except OverflowError:
        raise LogScaleOverflow("R1 estimate", log_value) from None


def _r1_values(params: ModelParams, arr: AreaArrays) -> np.ndarray:
    with np.errstate(over="ignore"):
        return np.exp(log_r1_hat_arrays(params, arr))


# --- refit plumbing ----------------------------------------------------------

def default_refit(arr: AreaArrays, init: Optional[ModelParams] = None, tol: float = 1e-8, max_iter: int = 200) -> FitResult:
    return fit(arr, init=init, tol=tol, max_iter=max_iter)


def _params_of(result) -> Optional[ModelParams]:
    if result is None:
        return None
    if isinstance(result, ModelParams):
        return result
    return result.params if result.converged else None


# --- jackknife ---------------------------------------------------------------

def jackknife_all(
    areas: AreaLike,
    fit_fn: Optional[FitFn] = None,
    full_params: Optional[ModelParams] = None,
    targets: Optional[Sequence[int]] = None,
    max_failure_rate: float = 0.2,
) -> list[MseEstimates]:
    """Leave-one-area-out MSE estimates of predictor B.

    One refit per deleted area is shared by every target area.  Failed
    refits are dropped and the (m-1)/m weight is rescaled to (m-1)/n_ok.
    """
    arr = as_arrays(areas)
    m = arr.m
    if m < 4:
        raise ValueError(f"jackknife needs at least 4 areas, got {m}")
    if full_params is None:
        full = fit_fn(arr) if fit_fn is not None else fit(arr)
        full_params = _params_of(full)
        if full_params is None:
            raise ReplicateBudgetExceeded("full-sample fit did not converge")
    if fit_fn is None:
        fit_fn = partial(default_refit, init=full_params)
    idx = np.arange(m) if targets is None else np.asarray(targets, dtype=int)
    sub = arr.take(idx)

    r1_full = _r1_values(full_params, sub)
    log_b_full = log_predictors_arrays(full_params, sub)["b"]
    b_full = np.exp(log_b_full)

    r1_rows = []
    b_rows = []
    failures = 0
    for j in range(m):
        params_j = _params_of(fit_fn(arr.drop(j)))
        if params_j is None:
            failures += 1
            continue
        r1_rows.append(_r1_values(params_j, sub))
        b_rows.append(np.exp(log_predictors_arrays(params_j, sub)["b"]))
    if failures > max_failure_rate * m:
        raise ReplicateBudgetExceeded(f"{failures} of {m} jackknife refits failed")
    n_ok = m - failures
    weight = (m - 1) / n_ok
    r1_del = np.array(r1_rows)
    b_del = np.array(b_rows)
    r1_j = r1_full - weight * np.sum(r1_del - r1_full, axis=0)
    r2_j = weight * np.sum((b_del - b_full) ** 2, axis=0)
    mse_j = r1_j + r2_j
    out = []
    for k in range(len(idx)):
        negative = bool(mse_j[k] < 0)
        out.append(MseEstimates(
            r1_hat=float(r1_full[k]),
            mse_j=float(mse_j[k]),
            r1_j=float(r1_j[k]),
            r2_j=float(r2_j[k]),
            negative_flag=negative,
            failed_replicates=failures,
        ))
    n_negative = sum(e.negative_flag for e in out)
    if n_negative:
        logger.warning("jackknife MSE is negative for %d of %d areas", n_negative, len(out))
    return out


def jackknife_mse(areas: AreaLike, i: int, fit_fn: Optional[FitFn] = None, full_params: Optional[ModelParams] = None) -> MseEstimates:
    return jackknife_all(areas, fit_fn=fit_fn, full_params=full_params, targets=[i])[0]


# --- bootstrap ---------------------------------------------------------------

def empirical_cdf_inverse(samples, p: float) -> float:
    """Smallest sample t with G(t) >= p for the empirical CDF G."""
    values = np.sort(np.asarray(samples, dtype=float))
    n = len(values)
    if n == 0:
        raise ValueError("samples must be non-empty")
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    # round away representation noise such as 0.975 * 2000 = 1950.0000000000002
    k = math.ceil(round(p * n, 9))
    return float(values[min(max(k, 1), n) - 1])


def _bootstrap_one(b: int, arr: AreaArrays, seed: int, evaluation: str, fit_fn: FitFn) -> Optional[np.ndarray]:
    gen = rngmod.stream(seed, rngmod.BOOTSTRAP, b)
    idx = gen.integers(0, arr.m, size=arr.m)
    resample = arr.take(idx)
    params = _params_of(fit_fn(resample))
    if params is None:
        return None
    target = resample if evaluation == RESAMPLED else arr
    return log_predictors_arrays(params, target)["b"]


def bootstrap_log_replicates(
    areas: AreaLike,
    bt: int = 2000,
    seed: int = 0,
    fit_fn: Optional[FitFn] = None,
    evaluation: str = RESAMPLED,
    workers: int = 1,
    init: Optional[ModelParams] = None,
) -> tuple[np.ndarray, int]:
    """Log-scale bootstrap replicates of predictor B, shape (n_ok, m).

    Each replicate resamples the m area tuples (z, W, psi, C) with
    replacement and refits omega.  With ``evaluation="resampled"`` the i-th
    replicate value is predictor B of the i-th resampled tuple; with
    ``"original"`` it is predictor B of area i's own data under the refit.
    Replicate b uses the random stream (seed, b), so output does not depend
    on ``workers``.
    """
    arr = as_arrays(areas)
    if bt < 1:
        raise ValueError("bt must be positive")
    if evaluation not in (RESAMPLED, ORIGINAL):
        raise ValueError(f"evaluation must be {RESAMPLED!r} or {ORIGINAL!r}")
    if fit_fn is None:
        fit_fn = partial(default_refit, init=init)
    task = partial(_bootstrap_one, arr=arr, seed=seed, evaluation=evaluation, fit_fn=fit_fn)
    results = ordered_map(task, range(bt), workers=workers)
    rows = [r for r in results if r is not None]
    failures = bt - len(rows)
    if len(rows) < bt / 2:
        raise ReplicateBudgetExceeded(f"{failures} of {bt} bootstrap refits failed")
    return (np.array(rows) if rows else np.zeros((0, arr.m))), failures


def _interval_from_logs(log_samples: np.ndarray, alpha: float, bt: int, failures: int) -> BootstrapInterval:
    lo = empirical_cdf_inverse(log_samples, alpha / 2.0)
    hi = empirical_cdf_inverse(log_samples, 1.0 - alpha / 2.0)
    return BootstrapInterval(math.exp(lo), math.exp(hi), alpha, bt, failures)


def bootstrap_intervals(
    areas: AreaLike,
    alphas: Sequence[float] = (0.05,),
    bt: int = 2000,
    seed: int = 0,
    fit_fn: Optional[FitFn] = None,
    evaluation: str = RESAMPLED,
    workers: int = 1,
    init: Optional[ModelParams] = None,
) -> list[dict[float, BootstrapInterval]]:
    """Percentile intervals for every area from one shared replicate set."""
    if bt < 100:
        raise ValueError("bt must be at least 100")
    for a in alphas:
        if not 0.0 < a < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {a}")
    logs, failures = bootstrap_log_replicates(areas, bt, seed, fit_fn, evaluation, workers, init)
    # exp is increasing, so quantiles of the log replicates map straight across
    return [
        {a: _interval_from_logs(logs[:, i], a, bt, failures) for a in alphas}
        for i in range(logs.shape[1])
    ]


def bootstrap_interval(
    areas: AreaLike,
    i: int,
    alpha: float = 0.05,
    bt: int = 2000,
    seed: int = 0,
    fit_fn: Optional[FitFn] = None,
    evaluation: str = RESAMPLED,
) -> BootstrapInterval:
    return bootstrap_intervals(areas, (alpha,), bt, seed, fit_fn, evaluation)[i][alpha]


# --- normal-theory intervals -------------------------------------------------

def normal_interval(centre: np.ndarray, mse: np.ndarray, alpha: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """centre -/+ z_{1-alpha/2} sqrt(max(mse, 0)); also returns log length."""
    q = norm.ppf(1.0 - alpha / 2.0)
    mse = np.asarray(mse, dtype=float)
    if np.any(mse < 0):
        logger.warning("%d negative MSE values floored at 0 for interval construction", int(np.sum(mse < 0)))
    half = q * np.sqrt(np.maximum(mse, 0.0))
    with np.errstate(divide="ignore"):
        log_len = np.log(2.0 * half)
    return centre - half, centre + half, log_len


def direct_interval(arr: AreaArrays, alpha: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """y_i -/+ z sqrt(psi_i) y_i: the delta-method original-scale interval."""
    q = norm.ppf(1.0 - alpha / 2.0)
    y = np.exp(arr.z)
    half = q * y * np.sqrt(arr.psi)
    log_len = math.log(2.0 * q) + arr.z + 0.5 * np.log(arr.psi)
    return y - half, y + half, log_len
