"""Command-line entry point: ``fhme simulate | fit | intervals | synth``."""
from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from . import __version__
from .config import ConfigError, read_key_values, write_snapshot
from .estimation import fit
from .ingest import ColumnMapping, IngestError, RawAreaRecord, exact_log_covariate, read_csv, to_arrays, write_csv
from .model import LogScaleOverflow
from .predictors import log_predictors_arrays, predict_all
from .simulation import (
    INTERVAL_METHODS,
    SimulationConfig,
    cog_like,
    interval_study,
    predictor_study,
    s21_grid,
    table_s21,
)
from .uncertainty import (
    ReplicateBudgetExceeded,
    bootstrap_log_replicates,
    direct_interval,
    empirical_cdf_inverse,
    jackknife_all,
    log_r1_hat_arrays,
    normal_interval,
)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
OUT_ENV = "FHME_OUT_DIR"
DEFAULT_BT = 2000

logger = logging.getLogger("fhme")

PRESETS = {
    "table2-desk": {"study": "predictors", "m": "20", "k_percent": "50", "reps": "500", "jackknife": "true"},
    "table4-desk": {"study": "intervals", "m": "50", "k_percent": "50", "reps": "200", "bt": "300",
                    "levels": "0.90,0.95,0.99"},
    "tableS21-desk": {"study": "s21", "reps": "100"},
    "full": {"study": "intervals", "m": "50", "k_percent": "50", "reps": "2000", "bt": "2000",
              "levels": "0.90,0.95,0.99"},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit 2, which is reserved for IO errors
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value settings file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./fhme-out)")
    p.add_argument("--threads", type=int, default=1, help="worker processes (output does not depend on it)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fhme", description="Log-scale Fay-Herriot small-area estimation with covariate measurement error.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sim = sub.add_parser("simulate", help="Monte Carlo study of predictors and intervals")
    _common(sim)
    sim.add_argument("--preset", choices=sorted(PRESETS))
    sim.add_argument("--reps", type=int)
    sim.add_argument("--bootstrap", type=int, help="bootstrap replicates per MC rep")
    sim.add_argument("--alpha", type=float, action="append", help="1 - nominal level; repeatable")
    sim.add_argument("--no-plots", action="store_true")

    fp = sub.add_parser("fit", aliases=["fit-predict", "predict"], help="fit the model and predict every area")
    _common(fp)
    fp.add_argument("--input", required=True)

    iv = sub.add_parser("intervals", help="prediction intervals for every area")
    _common(iv)
    iv.add_argument("--input", required=True)
    iv.add_argument("--bootstrap", type=int, help=f"bootstrap replicates (default {DEFAULT_BT})")
    iv.add_argument("--alpha", type=float, action="append", help="repeatable; default 0.05")
    iv.add_argument("--no-plots", action="store_true")

    sy = sub.add_parser("synth", help="write a synthetic area-level CSV")
    _common(sy)
    sy.add_argument("--areas", type=int, default=49)
    return parser


# --- helpers -----------------------------------------------------------------

def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or "fhme-out")
    out.mkdir(parents=True, exist_ok=True)
    return out


# snapshot entries that describe a run rather than configure it
_REPORT_KEYS = {"command", "input", "preset", "converged", "unconverged_fits", "bootstrap_failures",
                "jackknife_failures", "jackknife_negative"}


def _settings(args) -> dict[str, str]:
    if not args.config:
        return {}
    return {k: v for k, v in read_key_values(args.config).items() if k not in _REPORT_KEYS}


def _floats(text: str, what: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise UsageError(f"cannot parse {what} list {text!r}") from None


def _alphas(values: Sequence[float]) -> tuple[float, ...]:
    for a in values:
        if not 0.0 < a < 1.0:
            raise UsageError(f"alpha must lie in (0, 1), got {a}")
    return tuple(sorted(set(values), reverse=True))


def _write_frame(df: pd.DataFrame, path: Path) -> None:
    df.to_csv(path, index=False, lineterminator="\n")


def _split_settings(settings: dict[str, str], prefix: str) -> tuple[dict, dict]:
    own, rest = {}, {}
    for k, v in settings.items():
        (own if k.startswith(prefix) else rest)[k[len(prefix):] if k.startswith(prefix) else k] = v
    return own, rest


def _load_areas(args, settings):
    column_keys, rest = _split_settings(settings, "column.")
    mapping = ColumnMapping.from_dict(column_keys) if column_keys else ColumnMapping()
    result = read_csv(args.input, mapping)
    for err in result.errors:
        logger.warning("%s row %d: %s", args.input, err.row, err.message)
    if result.accepted < 4:
        raise UsageError(f"{args.input}: need at least 4 valid areas, got {result.accepted}")
    return result, mapping, rest


def _write_row_errors(result, out: Path) -> None:
    rows = [{"row": e.row, "message": e.message} for e in result.errors]
    _write_frame(pd.DataFrame(rows, columns=["row", "message"]), out / "row_errors.csv")


def _exp(values):
    with np.errstate(over="ignore"):
        return np.exp(values)


# --- simulate ----------------------------------------------------------------

def cmd_simulate(args) -> int:
    settings = dict(PRESETS.get(args.preset, {}))
    settings.update(_settings(args))
    if args.seed is not None:
        settings["seed"] = str(args.seed)
    if args.reps is not None:
        settings["reps"] = str(args.reps)
    if args.bootstrap is not None:
        settings["bt"] = str(args.bootstrap)
    if args.alpha:
        settings["levels"] = ",".join(repr(1.0 - a) for a in _alphas(args.alpha))

    study = settings.pop("study", "predictors")
    jackknife = settings.pop("jackknife", "false").lower() in ("1", "true", "yes")
    levels = _floats(settings.pop("levels", "0.90,0.95,0.99"), "levels")
    methods = tuple(m.strip() for m in settings.pop("methods", ",".join(INTERVAL_METHODS)).split(",") if m.strip())
    if study not in ("predictors", "intervals", "s21"):
        raise UsageError(f"study must be predictors, intervals or s21, got {study!r}")
    for lvl in levels:
        if not 0.0 < lvl < 1.0:
            raise UsageError(f"levels must lie in (0, 1), got {lvl}")
    for meth in methods:
        if meth not in INTERVAL_METHODS:
            raise UsageError(f"unknown interval method {meth!r}")
    config = SimulationConfig.from_mapping(settings)

    out = _out_dir(args)
    if study == "predictors":
        table = predictor_study(config, jackknife=jackknife, workers=args.threads)
    elif study == "intervals":
        table = interval_study(config, methods=methods, levels=levels, workers=args.threads)
    else:
        table = table_s21(s21_grid(config), workers=args.threads)

    for name, frame in table.frames().items():
        _write_frame(frame, out / f"{name}.csv")
    snapshot = {k: v for k, v in asdict(config).items()}
    snapshot.update(command="simulate", preset=args.preset or "", study=study, jackknife=jackknife,
                    levels=levels, methods=methods, unconverged_fits=table.n_unconverged)
    write_snapshot(out, snapshot)

    if not args.no_plots:
        from .plotting import log_length_boxplot, rb_rrmse_scatter

        if not table.log_lengths.empty:
            lvl = table.log_lengths["level"].iloc[0]
            sel = table.log_lengths[table.log_lengths["level"] == lvl]
            log_length_boxplot({m: g["log_length"].to_numpy() for m, g in sel.groupby("method", sort=False)},
                               out / "log_lengths.svg", title=f"{lvl:.0%} intervals")
        if not table.areas.empty:
            series = {p: (table.areas[f"rb_{p}"], table.areas[f"rrmse_{p}"]) for p in ("direct", "no_me", "a", "b")}
            rb_rrmse_scatter(series, out / "rb_rrmse.svg")
    print(f"simulate: {study} study written to {out} ({table.n_unconverged} unconverged fits)")
    return EXIT_OK


# --- fit / predict -----------------------------------------------------------

def _fit_kwargs(rest: dict) -> dict:
    kw = {}
    try:
        if "tol" in rest:
            kw["tol"] = float(rest.pop("tol"))
        if "max_iter" in rest:
            kw["max_iter"] = int(rest.pop("max_iter"))
    except ValueError as exc:
        raise UsageError(f"bad fit setting: {exc}") from None
    return kw


def _reject_unknown(rest: dict) -> None:
    if rest:
        raise UsageError(f"unknown settings: {', '.join(sorted(rest))}")


def cmd_fit(args) -> int:
    settings = _settings(args)
    result, mapping, rest = _load_areas(args, settings)
    fit_kw = _fit_kwargs(rest)
    _reject_unknown(rest)
    arr = to_arrays(result.records)
    res = fit(arr, **fit_kw)
    x_exact = exact_log_covariate(result.records)
    fh_params = None
    if x_exact is not None:
        fh_params = fit(arr.with_w(np.asarray(x_exact)).with_c(0.0), **fit_kw).params
    preds = predict_all(res.params, arr, x_exact=x_exact, params_fheblup=fh_params)
    log_r1 = log_r1_hat_arrays(res.params, arr)

    out = _out_dir(args)
    rows = []
    for i, p in enumerate(preds):
        row = {"area_id": p.area_id, "c": arr.c[i], "psi": arr.psi[i],
               "log_direct": p.log_direct, "log_no_me": p.log_no_me, "log_a": p.log_a, "log_b": p.log_b}
        if x_exact is not None:
            row["log_fheblup"] = p.log_fheblup
        row["log_r1_hat"] = log_r1[i]
        rows.append(row)
    df = pd.DataFrame(rows)
    for col in [c for c in df.columns if c.startswith("log_") and c != "log_r1_hat"]:
        df[col[4:] if col != "log_direct" else "direct"] = _exp(df[col].to_numpy())
    df = df.rename(columns={"a": "pred_a", "b": "pred_b", "no_me": "pred_no_me", "fheblup": "pred_fheblup"})
    _write_frame(df, out / "predictions.csv")

    se = res.info_matrix.standard_errors()
    summary = pd.DataFrame({
        "key": ["beta0", "beta1", "sigma2v", "iterations", "converged", "sigma2v_truncated", "singular",
                "rows_accepted", "rows_rejected"],
        "value": [res.params.beta0, res.params.beta1, res.params.sigma2v, res.iterations, res.converged,
                  res.sigma2v_truncated, res.singular, result.accepted, result.rejected],
        "std_error": [se[0], se[1], se[2]] + [""] * 6,
    })
    _write_frame(summary, out / "fit_summary.csv")
    _write_row_errors(result, out)
    write_snapshot(out, {"command": "fit", "input": args.input, **{f"column.{k}": v for k, v in asdict(mapping).items()},
                         **fit_kw})
    status = "converged" if res.converged else "did NOT converge"
    print(f"fit: {result.accepted} areas ({result.rejected} rejected), {status} in {res.iterations} iterations; "
          f"outputs in {out}")
    return EXIT_OK


# --- intervals ---------------------------------------------------------------

def _describe(values: np.ndarray) -> dict:
    finite = values[np.isfinite(values)]
    if finite.size == 0:
        stats = dict.fromkeys(("min", "q1", "median", "mean", "q3", "max"), float("nan"))
    else:
        q = np.quantile(finite, [0.0, 0.25, 0.5, 0.75, 1.0])
        stats = {"min": q[0], "q1": q[1], "median": q[2], "mean": float(finite.mean()), "q3": q[3], "max": q[4]}
    stats["iqr"] = stats["q3"] - stats["q1"]
    stats["n_zero_length"] = int(values.size - finite.size)
    return stats


def cmd_intervals(args) -> int:
    settings = _settings(args)
    result, mapping, rest = _load_areas(args, settings)
    fit_kw = _fit_kwargs(rest)
    methods = tuple(m.strip() for m in rest.pop("methods", ",".join(INTERVAL_METHODS)).split(",") if m.strip())
    for meth in methods:
        if meth not in INTERVAL_METHODS:
            raise UsageError(f"unknown interval method {meth!r}")
    evaluation = rest.pop("bootstrap_eval", "resampled")
    if evaluation not in ("resampled", "original"):
        raise UsageError(f"bootstrap_eval must be resampled or original, got {evaluation!r}")
    bt = args.bootstrap if args.bootstrap is not None else int(rest.pop("bootstrap", DEFAULT_BT))
    if bt < 100:
        raise UsageError(f"bootstrap must be at least 100, got {bt}")
    seed = args.seed if args.seed is not None else int(rest.pop("seed", 0))
    alphas = _alphas(args.alpha or _floats(rest.pop("alpha", "0.05"), "alpha"))
    _reject_unknown(rest)

    arr = to_arrays(result.records)
    res = fit(arr, **fit_kw)
    params = res.params
    theta_b = _exp(log_predictors_arrays(params, arr)["b"])
    jack = None
    if "jackknife" in methods:
        jack = jackknife_all(arr, full_params=params)
    boot = None
    boot_failures = 0
    if "bootstrap" in methods:
        boot, boot_failures = bootstrap_log_replicates(arr, bt=bt, seed=seed, evaluation=evaluation,
                                                       workers=args.threads, init=params)

    rows = []
    for alpha in alphas:
        for meth in methods:
            neg = np.zeros(arr.m, dtype=bool)
            if meth == "direct":
                lo, hi, ll = direct_interval(arr, alpha)
            elif meth == "estimated_mse":
                lo, hi, ll = normal_interval(theta_b, _exp(log_r1_hat_arrays(params, arr)), alpha)
            elif meth == "jackknife":
                mse = np.array([e.mse_j for e in jack])
                neg = mse < 0
                lo, hi, ll = normal_interval(theta_b, mse, alpha)
            else:
                lo_log = np.array([empirical_cdf_inverse(boot[:, i], alpha / 2) for i in range(arr.m)])
                hi_log = np.array([empirical_cdf_inverse(boot[:, i], 1 - alpha / 2) for i in range(arr.m)])
                lo, hi = _exp(lo_log), _exp(hi_log)
                with np.errstate(divide="ignore"):
                    ll = hi_log + np.log(-np.expm1(lo_log - hi_log))
            for i in range(arr.m):
                rows.append({"area_id": arr.area_id[i], "alpha": alpha, "method": meth, "pred_b": theta_b[i],
                             "lower": lo[i], "upper": hi[i], "log_length": ll[i], "negative_mse": bool(neg[i])})
    df = pd.DataFrame(rows)
    out = _out_dir(args)
    _write_frame(df, out / "intervals.csv")

    summary = []
    for (alpha, meth), g in df.groupby(["alpha", "method"], sort=False):
        summary.append({"alpha": alpha, "method": meth, **_describe(g["log_length"].to_numpy())})
    _write_frame(pd.DataFrame(summary), out / "log_length_summary.csv")
    _write_row_errors(result, out)
    snapshot = {"command": "intervals", "input": args.input, "bootstrap": bt, "seed": seed, "alpha": alphas,
                "methods": methods, "bootstrap_eval": evaluation, "converged": res.converged,
                "bootstrap_failures": boot_failures,
                **{f"column.{k}": v for k, v in asdict(mapping).items()}, **fit_kw}
    if jack is not None:
        snapshot["jackknife_failures"] = jack[0].failed_replicates
        snapshot["jackknife_negative"] = int(sum(e.negative_flag for e in jack))
    write_snapshot(out, snapshot)

    if not args.no_plots:
        from .plotting import log_length_boxplot

        first = df[df["alpha"] == alphas[0]]
        log_length_boxplot({m: g["log_length"].to_numpy() for m, g in first.groupby("method", sort=False)},
                           out / "log_lengths.svg", title=f"{1 - alphas[0]:.0%} intervals")
    print(f"intervals: {arr.m} areas, methods {', '.join(methods)}; outputs in {out}")
    return EXIT_OK


# --- synth -------------------------------------------------------------------

def cmd_synth(args) -> int:
    seed = args.seed if args.seed is not None else 0
    if args.areas < 4:
        raise UsageError(f"areas must be >= 4, got {args.areas}")
    arr, _ = cog_like(seed=seed, m=args.areas)
    records = []
    for i in range(arr.m):
        y = math.exp(arr.z[i])
        w = math.exp(arr.w[i])
        records.append(RawAreaRecord(arr.area_id[i], y, arr.psi[i] * y * y, w, arr.c[i] * w * w))
    out = _out_dir(args)
    write_csv(out / "synthetic_areas.csv", records)
    write_snapshot(out, {"command": "synth", "seed": seed, "areas": args.areas})
    print(f"synth: wrote {out / 'synthetic_areas.csv'}")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "fit-predict": cmd_fit, "predict": cmd_fit,
            "intervals": cmd_intervals, "synth": cmd_synth}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help, --version and usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("fhme: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, IngestError, ValueError) as exc:
        print(f"fhme: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"fhme: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ReplicateBudgetExceeded, LogScaleOverflow) as exc:
        print(f"fhme: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
