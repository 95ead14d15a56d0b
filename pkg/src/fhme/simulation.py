"""Monte Carlo study of the predictors and prediction intervals.

Data generation: x_i ~ N(5, 9), psi_i ~ Gamma(4.5, rate 2), a k% subset of
areas gets C_i = d (the rest 0), log Y_i = 3 x_i + v_i, z_i = log Y_i + e_i,
W_i = x_i + u_i.  By default the area design (x, psi, C) is drawn once per
seed and held fixed across replications; only v, e and u are redrawn.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from functools import partial
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd

from . import rng as rngmod
from .estimation import fit
from .model import AreaArrays, AreaObservation, ModelParams
from .parallel import ordered_map
from .predictors import log_predictors_arrays
from .uncertainty import (
    ReplicateBudgetExceeded,
    bootstrap_log_replicates,
    default_refit,
    direct_interval,
    empirical_cdf_inverse,
    jackknife_all,
    log_r1_hat_arrays,
    normal_interval,
)

logger = logging.getLogger(__name__)

PREDICTORS = ("direct", "no_me", "a", "b")
INTERVAL_METHODS = ("direct", "estimated_mse", "jackknife", "bootstrap")


@dataclass(frozen=True)
class SimulationConfig:
    m: int = 20
    k_percent: float = 50.0
    d_value: float = 2.0
    sigma2v: float = 2.0
    beta0: float = 0.0
    beta1: float = 3.0
    reps: int = 2000
    seed: int = 20240101
    psi_shape: float = 4.5
    psi_param_value: float = 2.0
    psi_param: str = "rate"
    x_mean: float = 5.0
    x_var: float = 9.0
    fixed_design: bool = True
    bt: int = 2000
    bootstrap_eval: str = "resampled"

    def __post_init__(self) -> None:
        if int(self.m) != self.m or self.m < 4:
            raise ValueError(f"m must be an integer >= 4, got {self.m!r}")
        if not 0.0 < self.k_percent <= 100.0:
            raise ValueError(f"k_percent must lie in (0, 100], got {self.k_percent!r}")
        if self.reps < 1:
            raise ValueError(f"reps must be >= 1, got {self.reps!r}")
        if self.d_value < 0:
            raise ValueError(f"d_value must be >= 0, got {self.d_value!r}")
        if self.sigma2v < 0:
            raise ValueError(f"sigma2v must be >= 0, got {self.sigma2v!r}")
        if self.psi_param not in ("rate", "scale"):
            raise ValueError(f"psi_param must be 'rate' or 'scale', got {self.psi_param!r}")
        if self.psi_shape <= 0 or self.psi_param_value <= 0:
            raise ValueError("psi_shape and psi_param_value must be positive")
        if self.x_var < 0:
            raise ValueError(f"x_var must be >= 0, got {self.x_var!r}")
        if self.bt < 1:
            raise ValueError(f"bt must be >= 1, got {self.bt!r}")
        if self.bootstrap_eval not in ("resampled", "original"):
            raise ValueError(f"bootstrap_eval must be 'resampled' or 'original', got {self.bootstrap_eval!r}")

    @property
    def n_error_prone(self) -> int:
        return int(round(self.k_percent * self.m / 100.0))

    @property
    def psi_scale(self) -> float:
        return 1.0 / self.psi_param_value if self.psi_param == "rate" else self.psi_param_value

    @classmethod
    def from_mapping(cls, values: dict) -> "SimulationConfig":
        """Build from string values (config files, CLI overrides)."""
        kwargs = {}
        known = {f.name: f for f in fields(cls)}
        for key, raw in values.items():
            if key not in known:
                raise ValueError(f"unknown simulation setting {key!r}")
            default = known[key].default
            kwargs[key] = _coerce(key, raw, default)
        return cls(**kwargs)


def _coerce(key: str, raw, default):
    if not isinstance(raw, str):
        return raw
    try:
        if isinstance(default, bool):
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ValueError(f"cannot parse {key}={raw!r}") from None
    return raw


@dataclass(frozen=True, kw_only=True)
class SimulatedArea(AreaObservation):
    """An observed area together with its simulated truths."""

    x: float
    v: float
    theta: float

    @property
    def y_true(self) -> float:
        return self.theta


@dataclass(frozen=True)
class SimSample:
    areas: AreaArrays
    x: np.ndarray
    v: np.ndarray
    log_y_true: np.ndarray


def _design(config: SimulationConfig, rep_index: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    key = (rngmod.DESIGN,) if config.fixed_design else (rngmod.DESIGN, rep_index)
    gen = rngmod.stream(config.seed, *key)
    x = gen.normal(config.x_mean, math.sqrt(config.x_var), config.m)
    psi = gen.gamma(config.psi_shape, config.psi_scale, config.m)
    c = np.zeros(config.m)
    c[gen.permutation(config.m)[: config.n_error_prone]] = config.d_value
    return x, psi, c


def draw_sample(config: SimulationConfig, rep_index: int) -> SimSample:
    x, psi, c = _design(config, rep_index)
    gen = rngmod.stream(config.seed, rngmod.REPLICATE, rep_index)
    v = gen.normal(0.0, math.sqrt(config.sigma2v), config.m)
    e = gen.normal(0.0, 1.0, config.m) * np.sqrt(psi)
    u = gen.normal(0.0, 1.0, config.m) * np.sqrt(c)
    log_y = config.beta0 + config.beta1 * x + v
    arr = AreaArrays.from_columns(log_y + e, x + u, psi, c, area_id=[f"A{i + 1:03d}" for i in range(config.m)])
    return SimSample(arr, x, v, log_y)


def generate(config: SimulationConfig, rep_index: int) -> list[SimulatedArea]:
    """Simulated areas for one replication; deterministic in (seed, rep_index)."""
    s = draw_sample(config, rep_index)
    a = s.areas
    return [
        SimulatedArea(a.area_id[i], a.z[i], a.w[i], a.psi[i], a.c[i], x=float(s.x[i]), v=float(s.v[i]),
                      theta=math.exp(s.log_y_true[i]))
        for i in range(a.m)
    ]


# --- elementary metrics ------------------------------------------------------

def emse(pred_series, truth_series) -> float:
    """Mean squared error over replications."""
    p = np.asarray(pred_series, dtype=float)
    t = np.asarray(truth_series, dtype=float)
    if p.shape != t.shape:
        raise ValueError("prediction and truth series must have equal length")
    if p.size == 0:
        raise ValueError("need at least one replication")
    return float(np.mean((p - t) ** 2))


def rb_rrmse(pred_series, truth_series) -> tuple[float, float]:
    """Relative bias and relative root MSE for one area.

    The denominator is the replication mean of the truth, which is the
    truth itself when it does not vary.
    """
    p = np.asarray(pred_series, dtype=float)
    t = np.asarray(truth_series, dtype=float)
    if p.shape != t.shape:
        raise ValueError("prediction and truth series must have equal length")
    if np.any(t == 0):
        raise ValueError("truth must be nonzero")
    scale = float(np.mean(t))
    return float(np.mean(p - t)) / scale, math.sqrt(float(np.mean((p - t) ** 2))) / scale


# --- one replication ---------------------------------------------------------

@dataclass
class RepResult:
    rep: int
    converged: bool
    c: np.ndarray
    log_y: np.ndarray
    log_pred: dict
    log_r1: np.ndarray
    mse_j: Optional[np.ndarray] = None
    jack_failures: int = 0
    cover: dict = field(default_factory=dict)
    log_len: dict = field(default_factory=dict)
    boot_failures: int = 0
    failed: str = ""


def run_rep(
    rep: int,
    config: SimulationConfig,
    jackknife: bool = False,
    methods: Sequence[str] = (),
    levels: Sequence[float] = (),
) -> RepResult:
    sample = draw_sample(config, rep)
    arr = sample.areas
    res = fit(arr)
    params = res.params
    logs = log_predictors_arrays(params, arr)
    out = RepResult(
        rep=rep,
        converged=res.converged,
        c=arr.c,
        log_y=sample.log_y_true,
        log_pred={"direct": arr.z, "no_me": logs["no_me"], "a": logs["a"], "b": logs["b"]},
        log_r1=log_r1_hat_arrays(params, arr),
    )
    need_jack = jackknife or "jackknife" in methods
    if need_jack:
        try:
            est = jackknife_all(arr, full_params=params, fit_fn=partial(default_refit, init=params))
            out.mse_j = np.array([e.mse_j for e in est])
            out.jack_failures = est[0].failed_replicates
        except ReplicateBudgetExceeded as exc:
            out.failed = str(exc)
            out.mse_j = np.full(arr.m, np.nan)

    if methods:
        y = np.exp(sample.log_y_true)
        theta_b = np.exp(logs["b"])
        boot_logs = None
        if "bootstrap" in methods:
            try:
                boot_logs, out.boot_failures = bootstrap_log_replicates(
                    arr, bt=config.bt, seed=config.seed * 1_000_003 + rep,
                    evaluation=config.bootstrap_eval, init=params,
                )
            except ReplicateBudgetExceeded as exc:
                out.failed = str(exc)
        for level in levels:
            alpha = 1.0 - level
            for method in methods:
                if method == "direct":
                    lo, hi, ll = direct_interval(arr, alpha)
                elif method == "estimated_mse":
                    lo, hi, ll = normal_interval(theta_b, np.exp(out.log_r1), alpha)
                elif method == "jackknife":
                    lo, hi, ll = normal_interval(theta_b, out.mse_j, alpha)
                elif method == "bootstrap":
                    if boot_logs is None:
                        continue
                    lo_log = np.array([empirical_cdf_inverse(boot_logs[:, i], alpha / 2) for i in range(arr.m)])
                    hi_log = np.array([empirical_cdf_inverse(boot_logs[:, i], 1 - alpha / 2) for i in range(arr.m)])
                    lo, hi = np.exp(lo_log), np.exp(hi_log)
                    with np.errstate(divide="ignore"):
                        ll = hi_log + np.log(-np.expm1(lo_log - hi_log))
                else:
                    raise ValueError(f"unknown interval method {method!r}")
                out.cover[(level, method)] = (lo <= y) & (y <= hi)
                out.log_len[(level, method)] = ll
    return out


def run_reps(config: SimulationConfig, workers: int = 1, **kwargs) -> list[RepResult]:
    task = partial(run_rep, config=config, **kwargs)
    return ordered_map(task, range(config.reps), workers=workers, chunksize=1)


# --- aggregation -------------------------------------------------------------

@dataclass
class MetricsTable:
    """Tabular results of a study; each frame is written as its own CSV."""

    config: SimulationConfig
    areas: pd.DataFrame = field(default_factory=pd.DataFrame)
    groups: pd.DataFrame = field(default_factory=pd.DataFrame)
    ratios: pd.DataFrame = field(default_factory=pd.DataFrame)
    coverage: pd.DataFrame = field(default_factory=pd.DataFrame)
    log_lengths: pd.DataFrame = field(default_factory=pd.DataFrame)
    n_unconverged: int = 0

    def frames(self) -> dict[str, pd.DataFrame]:
        return {k: v for k, v in (
            ("areas", self.areas), ("groups", self.groups), ("ratios", self.ratios),
            ("coverage", self.coverage), ("log_lengths", self.log_lengths),
        ) if not v.empty}


def _safe_log(x):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(x)


def summarize_predictors(config: SimulationConfig, results: list[RepResult]) -> MetricsTable:
    y = np.exp(np.array([r.log_y for r in results]))  # reps x m
    c_all = np.array([r.c for r in results])
    sq = {}
    pred = {}
    for name in PREDICTORS:
        pred[name] = np.exp(np.array([r.log_pred[name] for r in results]))
        sq[name] = (pred[name] - y) ** 2
    r1 = np.exp(np.array([r.log_r1 for r in results]))
    has_jack = all(r.mse_j is not None for r in results)
    mse_j = np.array([r.mse_j for r in results]) if has_jack else None
    n_unconv = sum(not r.converged for r in results)

    area_rows = []
    if config.fixed_design:
        c = c_all[0]
        for i in range(config.m):
            row = {"area": i + 1, "c": c[i], "log_mean_y": float(np.log(np.mean(y[:, i])))}
            for name in PREDICTORS:
                e = emse(pred[name][:, i], y[:, i])
                row[f"emse_{name}"] = e
                row[f"log_emse_{name}"] = float(_safe_log(e))
                rb, rrmse = rb_rrmse(pred[name][:, i], y[:, i])
                row[f"rb_{name}"] = rb
                row[f"rrmse_{name}"] = rrmse
            row["mean_r1_hat"] = float(np.mean(r1[:, i]))
            row["log_mean_r1_hat"] = float(_safe_log(row["mean_r1_hat"]))
            if has_jack:
                row["mean_mse_j"] = float(np.nanmean(mse_j[:, i]))
                row["log_mean_mse_j"] = float(_safe_log(row["mean_mse_j"]))
                row["share_negative_mse_j"] = float(np.mean(mse_j[:, i] < 0))
            area_rows.append(row)
    areas = pd.DataFrame(area_rows)

    group_rows = []
    ratio_rows = []
    for cval in np.unique(c_all):
        mask = c_all == cval
        row = {"m": config.m, "k_percent": config.k_percent, "c": float(cval), "n_pairs": int(mask.sum())}
        for name in PREDICTORS:
            row[f"log_mean_emse_{name}"] = float(np.log(np.mean(sq[name][mask])))
            if config.fixed_design:
                row[f"mean_log_emse_{name}"] = float(areas.loc[areas.c == cval, f"log_emse_{name}"].mean())
        row["log_mean_r1_hat"] = float(_safe_log(np.mean(r1[mask])))
        if config.fixed_design:
            row["mean_log_r1_hat"] = float(areas.loc[areas.c == cval, "log_mean_r1_hat"].mean())
        if has_jack:
            row["log_mean_mse_j"] = float(_safe_log(np.nanmean(mse_j[mask])))
            if config.fixed_design:
                row["mean_log_mse_j"] = float(areas.loc[areas.c == cval, "log_mean_mse_j"].mean(skipna=False))
            row["share_negative_mse_j"] = float(np.mean(mse_j[mask] < 0))
        group_rows.append(row)

        direct_avg = float(np.mean(sq["direct"][mask]))
        ratio = {"m": config.m, "k_percent": config.k_percent, "c": float(cval)}
        for name in ("no_me", "a", "b"):
            ratio[f"ratio_{name}"] = float(np.mean(sq[name][mask])) / direct_avg
        ratio_rows.append(ratio)

    return MetricsTable(config, areas=areas, groups=pd.DataFrame(group_rows),
                        ratios=pd.DataFrame(ratio_rows), n_unconverged=n_unconv)


def summarize_intervals(config: SimulationConfig, results: list[RepResult], methods, levels) -> tuple[pd.DataFrame, pd.DataFrame]:
    rows = []
    length_rows = []
    for level in levels:
        for method in methods:
            key = (level, method)
            covers = [r.cover[key] for r in results if key in r.cover]
            if not covers:
                continue
            cov = np.concatenate(covers)
            ll = np.concatenate([r.log_len[key] for r in results if key in r.log_len])
            finite = ll[np.isfinite(ll)]
            p = float(cov.mean())
            rows.append({
                "m": config.m,
                "k_percent": config.k_percent,
                "level": level,
                "method": method,
                "coverage": p,
                "coverage_se": math.sqrt(p * (1 - p) / cov.size),
                "mean_log_length": float(finite.mean()) if finite.size else float("nan"),
                "n_intervals": int(cov.size),
                "n_zero_length": int(ll.size - finite.size),
                "reps_used": len(covers),
            })
            if level == levels[0] or math.isclose(level, 0.95):
                for r in results:
                    if key in r.log_len:
                        for i, v in enumerate(r.log_len[key]):
                            length_rows.append({"level": level, "method": method, "rep": r.rep, "area": i + 1, "log_length": v})
    return pd.DataFrame(rows), pd.DataFrame(length_rows)


def predictor_study(config: SimulationConfig, jackknife: bool = False, workers: int = 1) -> MetricsTable:
    """EMSE, RB/RRMSE and MSE-ratio comparison of the four predictors."""
    results = run_reps(config, workers=workers, jackknife=jackknife)
    return summarize_predictors(config, results)


def interval_study(
    config: SimulationConfig,
    methods: Sequence[str] = INTERVAL_METHODS,
    levels: Sequence[float] = (0.90, 0.95, 0.99),
    workers: int = 1,
) -> MetricsTable:
    """Coverage and mean log length of prediction intervals."""
    for method in methods:
        if method not in INTERVAL_METHODS:
            raise ValueError(f"unknown interval method {method!r}")
    results = run_reps(config, workers=workers, methods=tuple(methods), levels=tuple(levels))
    table = summarize_predictors(config, results)
    table.coverage, table.log_lengths = summarize_intervals(config, results, methods, levels)
    failed = [r for r in results if r.failed]
    if failed:
        logger.warning("%d replications skipped interval methods: %s", len(failed), failed[0].failed)
    return table


def table_s21(configs: Iterable[SimulationConfig], workers: int = 1) -> MetricsTable:
    """C-group averaged EMSE, R1 and jackknife MSE over a grid of (m, k)."""
    configs = list(configs)
    parts = [predictor_study(cfg, jackknife=True, workers=workers) for cfg in configs]
    groups = pd.concat([p.groups for p in parts], ignore_index=True)
    ratios = pd.concat([p.ratios for p in parts], ignore_index=True)
    return MetricsTable(configs[0], groups=groups, ratios=ratios,
                        n_unconverged=sum(p.n_unconverged for p in parts))


def s21_grid(base: SimulationConfig, ms=(20, 50, 100), ks=(25, 50, 80, 100)) -> list[SimulationConfig]:
    return [replace(base, m=m, k_percent=float(k)) for m in ms for k in ks]


# --- synthetic application-style data -----------------------------------------

def cog_like(seed: int = 0, m: int = 49, sample_size: int = 4000) -> tuple[AreaArrays, np.ndarray]:
    """Synthetic data shaped like state-level government employment means.

    Returns the log-scale areas and the true log means.  Direct estimates
    come from simple random samples whose size is split across states;
    psi and C are delta-method variances of the log sample means.
    """
    gen = rngmod.stream(seed, rngmod.AUXILIARY, 1)
    log_x = gen.normal(4.0, 0.9, m)
    log_theta = 0.3 + 0.95 * log_x + gen.normal(0.0, 0.15, m)
    share = gen.dirichlet(np.full(m, 4.0))
    n_y = np.maximum(10, np.round(share * sample_size)).astype(int)
    n_w = 10 * n_y
    cv_unit = 1.5  # unit-level coefficient of variation of a skewed count
    psi = cv_unit ** 2 / n_y
    c = cv_unit ** 2 / n_w
    z = log_theta + gen.normal(0.0, 1.0, m) * np.sqrt(psi)
    w = log_x + gen.normal(0.0, 1.0, m) * np.sqrt(c)
    ids = [f"S{i + 1:02d}" for i in range(m)]
    return AreaArrays.from_columns(z, w, psi, c, area_id=ids), log_theta
