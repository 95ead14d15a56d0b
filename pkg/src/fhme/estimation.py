"""Parameter estimation by bias-corrected (unbiased) score equations.

The marginal likelihood of omega = (beta0, beta1, sigma2v) has scores whose
beta1 component is biased under covariate measurement error because
E[W_i tau_i] = -beta1 C_i.  We solve the recentred equations with the
alternating iteratively-reweighted scheme: closed-form beta0 and beta1
updates followed by a one-dimensional root search for sigma2v.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from scipy.optimize import brentq

from .model import AreaArrays, AreaLike, ModelParams, as_arrays

logger = logging.getLogger(__name__)

__all__ = [
    "ScoreVector",
    "InfoMatrix",
    "FitResult",
    "Sigma2vStep",
    "raw_scores",
    "unbiased_scores",
    "solve_sigma2v_step",
    "information_matrix",
    "initial_params",
    "fit",
]


class ScoreVector(NamedTuple):
    u1: float
    u2: float
    u3: float

    def max_abs(self) -> float:
        return max(abs(self.u1), abs(self.u2), abs(self.u3))


class Sigma2vStep(NamedTuple):
    value: float
    truncated: bool


@dataclass(frozen=True)
class InfoMatrix:
    """3x3 asymptotic information matrix for (beta0, beta1, sigma2v)."""

    matrix: np.ndarray
    singular: bool

    def inverse(self) -> np.ndarray:
        if self.singular:
            raise np.linalg.LinAlgError("information matrix is singular")
        return np.linalg.inv(self.matrix)

    def standard_errors(self) -> np.ndarray:
        """sqrt(diag(I^-1)); NaN when the matrix is singular."""
        if self.singular:
            return np.full(3, np.nan)
        return np.sqrt(np.diag(self.inverse()))


@dataclass(frozen=True)
class FitResult:
    params: ModelParams
    iterations: int
    converged: bool
    score_at_solution: ScoreVector
    info_matrix: InfoMatrix
    sigma2v_truncated: bool = False
    singular: bool = False
    warnings: tuple = field(default_factory=tuple)


def _s_inv(arr: AreaArrays, beta1: float, sigma2v: float) -> np.ndarray:
    return 1.0 / (beta1 * beta1 * arr.c + sigma2v + arr.psi)


def _require_finite(*values: float) -> None:
    if not np.all(np.isfinite(values)):
        raise FloatingPointError("score accumulation produced a non-finite value")


def raw_scores(params: ModelParams, areas: AreaLike) -> ScoreVector:
    """Partial derivatives of the marginal log-likelihood."""
    arr = as_arrays(areas)
    b0, b1, s2v = params.beta0, params.beta1, params.sigma2v
    inv = _s_inv(arr, b1, s2v)
    tau = arr.z - b0 - b1 * arr.w
    inv2_tau2 = inv * inv * tau * tau
    u1 = float(np.sum(inv * tau))
    u2 = float(-np.sum(inv * b1 * arr.c) + np.sum(inv * arr.w * tau) + np.sum(inv2_tau2 * b1 * arr.c))
    u3 = float(-0.5 * np.sum(inv) + 0.5 * np.sum(inv2_tau2))
    _require_finite(u1, u2, u3)
    return ScoreVector(u1, u2, u3)


def unbiased_scores(params: ModelParams, areas: AreaLike) -> ScoreVector:
    """Scores minus their expectation at omega; only the beta1 term shifts."""
    arr = as_arrays(areas)
    raw = raw_scores(params, arr)
    shift = float(np.sum(_s_inv(arr, params.beta1, params.sigma2v) * params.beta1 * arr.c))
    return ScoreVector(raw.u1, raw.u2 + shift, raw.u3)


def _sigma2v_root(a: np.ndarray, tau2: np.ndarray) -> Sigma2vStep:
    # g(s) = sum(tau^2 / S^2) - sum(1 / S), S = a + s
    def g(s: float) -> float:
        inv = 1.0 / (a + s)
        return float(np.dot(inv, inv * tau2) - inv.sum())

    g0 = g(0.0)
    if g0 <= 0.0:
        return Sigma2vStep(0.0, g0 < 0.0)
    upper = float(tau2.max() + a.max())
    # every S_i exceeds tau_i^2 at `upper`, so g(upper) < 0
    root = brentq(g, 0.0, upper, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)
    return Sigma2vStep(float(root), False)


def solve_sigma2v_step(beta0: float, beta1: float, areas: AreaLike) -> Sigma2vStep:
    """Solve sum S^-2 tau^2 = sum S^-1 for sigma2v >= 0 at fixed betas.

    Returns ``truncated=True`` when g(0) < 0, in which case no nonnegative
    root exists in the bracketing sense and 0 is returned.
    """
    arr = as_arrays(areas)
    tau = arr.z - beta0 - beta1 * arr.w
    return _sigma2v_root(beta1 * beta1 * arr.c + arr.psi, tau * tau)


def information_matrix(params: ModelParams, areas: AreaLike, x: Optional[np.ndarray] = None) -> InfoMatrix:
    """Information matrix of the unbiased scores.

    With ``x`` given (simulation), the true covariates are used.  Otherwise
    x_i is replaced by W_i and x_i^2 by max(W_i^2 - C_i, 0).
    """
    arr = as_arrays(areas)
    inv = _s_inv(arr, params.beta1, params.sigma2v)
    if x is not None:
        x1 = np.asarray(x, dtype=float)
        x2 = x1 * x1
    else:
        x1 = arr.w
        x2 = np.maximum(arr.w * arr.w - arr.c, 0.0)
    sigma2_c = arr.c * (params.sigma2v + arr.psi) * inv
    mat = np.zeros((3, 3))
    mat[0, 0] = inv.sum()
    mat[0, 1] = mat[1, 0] = np.sum(inv * x1)
    mat[1, 1] = np.sum(inv * (x2 + sigma2_c))
    mat[2, 2] = 0.5 * np.sum(inv * inv)
    if not np.all(np.isfinite(mat)):
        return InfoMatrix(mat, True)
    eig = np.linalg.eigvalsh(mat)
    singular = bool(eig[0] <= 1e-12 * max(eig[-1], np.finfo(float).tiny))
    return InfoMatrix(mat, singular)


def initial_params(areas: AreaLike) -> ModelParams:
    """OLS of z on W, with a moment-style start for sigma2v."""
    arr = as_arrays(areas)
    design = np.column_stack([np.ones(arr.m), arr.w])
    coef, *_ = np.linalg.lstsq(design, arr.z, rcond=None)
    resid = arr.z - design @ coef
    ddof = 1 if arr.m > 1 else 0
    s2 = float(np.var(resid, ddof=ddof)) - float(arr.psi.mean()) - coef[1] ** 2 * float(arr.c.mean())
    return ModelParams(float(coef[0]), float(coef[1]), max(0.0, s2))


def _scores_arrays(b0, b1, s2v, z, w, psi, c) -> tuple[float, float, float]:
    inv = 1.0 / (b1 * b1 * c + s2v + psi)
    tau = z - b0 - b1 * w
    inv_tau = inv * tau
    inv2_tau2 = inv_tau * inv_tau
    return (
        float(inv_tau.sum()),
        float(np.dot(inv_tau, w) + b1 * np.dot(inv2_tau2, c)),
        float(0.5 * (inv2_tau2.sum() - inv.sum())),
    )


def fit(
    areas: AreaLike,
    init: Optional[ModelParams] = None,
    tol: float = 1e-8,
    max_iter: int = 200,
    fix_sigma2v: Optional[float] = None,
) -> FitResult:
    """Solve the unbiased estimating equations by alternating updates.

    Each sweep updates beta0 in closed form, then beta1 in closed form (an
    iteratively reweighted least-squares step with the measurement-error
    correction in its denominator), then sigma2v by bracketed root search.
    Iteration stops when the max-norm change of omega and every unbiased
    score component are both below ``tol``.

    The covariate is centred internally; the estimating equations are
    invariant under that shift, so the solution is unchanged but the
    beta0/beta1 coupling that slows the alternation disappears.

    A run that does not meet the tolerance within ``max_iter`` sweeps comes
    back with ``converged=False`` rather than raising.
    """
    arr = as_arrays(areas)
    if arr.m < 3:
        raise ValueError(f"need at least 3 areas to fit three parameters, got {arr.m}")
    if not tol > 0:
        raise ValueError("tol must be positive")
    z, w, psi, c = arr.z, arr.w, arr.psi, arr.c
    notes: list[str] = []

    if np.ptp(w) == 0.0:
        # slope not identified; report the (beta1 = 0) weighted-mean solution
        s2v = 0.0 if fix_sigma2v is None else float(fix_sigma2v)
        inv = 1.0 / (s2v + psi)
        b0 = float(np.sum(inv * z) / inv.sum())
        params = ModelParams(b0, 0.0, s2v)
        info = information_matrix(params, arr)
        notes.append("covariate has no variation; beta1 is not identified")
        logger.warning(notes[-1])
        return FitResult(params, 0, False, unbiased_scores(params, arr), info, False, True, tuple(notes))

    start = initial_params(arr) if init is None else init
    w_shift = float(w.mean())
    wc = w - w_shift
    b1 = start.beta1
    b0c = start.beta0 + b1 * w_shift
    s2v = start.sigma2v if fix_sigma2v is None else float(fix_sigma2v)
    truncated = False
    converged = False
    fallback_used = False
    iterations = 0
    prev = np.array([b0c - b1 * w_shift, b1, s2v])

    for iterations in range(1, max_iter + 1):
        inv = 1.0 / (b1 * b1 * c + s2v + psi)
        b0c = float(np.dot(inv, z - b1 * wc) / inv.sum())
        tau = z - b0c - b1 * wc
        inv_wc = inv * wc
        num = float(np.dot(inv_wc, z - b0c))
        den = float(np.dot(inv_wc, wc) - np.dot(inv * inv * tau * tau, c))
        if den > 0.0:
            b1 = num / den
        else:
            naive = num / float(np.dot(inv_wc, wc))
            b1 = 0.5 * (b1 + naive)
            if not fallback_used:
                notes.append("beta1 update denominator was not positive; used damped fallback")
                logger.warning(notes[-1])
            fallback_used = True
        if fix_sigma2v is None:
            tau = z - b0c - b1 * wc
            step = _sigma2v_root(b1 * b1 * c + psi, tau * tau)
            s2v, truncated = step.value, step.truncated
        if not np.isfinite(b0c) or not np.isfinite(b1):
            notes.append("iteration diverged")
            break

        cur = np.array([b0c - b1 * w_shift, b1, s2v])
        change = float(np.max(np.abs(cur - prev)))
        prev = cur
        if change < tol:
            u = _scores_arrays(cur[0], cur[1], cur[2], z, w, psi, c)
            resid = max(abs(u[0]), abs(u[1]))
            if fix_sigma2v is None:
                # on the sigma2v = 0 boundary the third equation becomes u3 <= 0
                resid = max(resid, max(u[2], 0.0) if truncated else abs(u[2]))
            if resid <= tol:
                converged = True
                break

    if not np.all(np.isfinite(prev)):
        params = start
        converged = False
    else:
        params = ModelParams(float(prev[0]), float(prev[1]), max(0.0, float(prev[2])))
    if truncated:
        notes.append("sigma2v truncated at 0")
    scores = unbiased_scores(params, arr)
    info = information_matrix(params, arr)
    return FitResult(
        params=params,
        iterations=iterations,
        converged=converged,
        score_at_solution=scores,
        info_matrix=info,
        sigma2v_truncated=truncated,
        singular=info.singular,
        warnings=tuple(notes),
    )
