"""Area-level CSV input: validation, margin-of-error conversion and the log
transform with delta-method variances."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

from .model import AreaArrays, AreaObservation

MOE90_DIVISOR = 1.645


class IngestError(ValueError):
    """File-level problem: missing columns, bad mapping, unreadable header."""


def moe_to_variance(moe90: float, divisor: float = MOE90_DIVISOR) -> float:
    if not math.isfinite(moe90) or moe90 < 0:
        raise ValueError(f"margin of error must be finite and >= 0, got {moe90!r}")
    return (moe90 / divisor) ** 2


def variance_to_moe(var: float, divisor: float = MOE90_DIVISOR) -> float:
    if not math.isfinite(var) or var < 0:
        raise ValueError(f"variance must be finite and >= 0, got {var!r}")
    return math.sqrt(var) * divisor


@dataclass(frozen=True)
class RawAreaRecord:
    """One area's original-scale estimates and their variances."""

    area_id: str
    y_hat: float
    var_y: float
    w_hat: float
    var_w: float = 0.0
    x_exact: Optional[float] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "area_id", str(self.area_id))
        if self.x_exact is not None:
            object.__setattr__(self, "x_exact", float(self.x_exact))
        for name in ("y_hat", "var_y", "w_hat", "var_w"):
            v = float(getattr(self, name))
            object.__setattr__(self, name, v)
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite")
        if self.y_hat <= 0:
            raise ValueError(f"y_hat must be > 0, got {self.y_hat}")
        if self.w_hat <= 0:
            raise ValueError(f"w_hat must be > 0, got {self.w_hat}")
        if self.var_y <= 0:
            raise ValueError(f"var_y must be > 0, got {self.var_y}")
        if self.var_w < 0:
            raise ValueError(f"var_w must be >= 0, got {self.var_w}")
        if self.x_exact is not None and not (math.isfinite(self.x_exact) and self.x_exact > 0):
            raise ValueError("x_exact must be finite and > 0")


def log_transform_record(rec: RawAreaRecord) -> AreaObservation:
    """z = log y, psi = var_y / y^2, W = log w, C = var_w / w^2."""
    return AreaObservation(
        area_id=rec.area_id,
        z=math.log(rec.y_hat),
        w=math.log(rec.w_hat),
        psi=rec.var_y / (rec.y_hat * rec.y_hat),
        c=rec.var_w / (rec.w_hat * rec.w_hat),
    )


def to_arrays(records: Sequence[RawAreaRecord]) -> AreaArrays:
    obs = [log_transform_record(r) for r in records]
    return AreaArrays.from_columns(
        [o.z for o in obs], [o.w for o in obs], [o.psi for o in obs], [o.c for o in obs],
        area_id=[o.area_id for o in obs],
    )


def exact_log_covariate(records: Sequence[RawAreaRecord]) -> Optional[list[float]]:
    if not records or any(r.x_exact is None for r in records):
        return None
    return [math.log(r.x_exact) for r in records]


# --- column mapping ----------------------------------------------------------

@dataclass(frozen=True)
class ColumnMapping:
    """Which CSV columns hold which quantities.

    Each variance may instead be given as a 90% margin of error
    (``moe_y`` / ``moe_w``); naming both for the same estimate is an error.
    With ``scale=log`` the file already holds z, psi, W and C.
    """

    area_id: str = "area_id"
    y_hat: str = "y_hat"
    var_y: Optional[str] = "var_y"
    moe_y: Optional[str] = None
    w_hat: str = "w_hat"
    var_w: Optional[str] = "var_w"
    moe_w: Optional[str] = None
    x_exact: Optional[str] = None
    scale: str = "original"
    moe_divisor: float = MOE90_DIVISOR

    def __post_init__(self) -> None:
        if self.scale not in ("original", "log"):
            raise IngestError(f"scale must be 'original' or 'log', got {self.scale!r}")
        if self.var_y and self.moe_y:
            raise IngestError("give either var_y or moe_y, not both")
        if self.var_w and self.moe_w:
            raise IngestError("give either var_w or moe_w, not both")
        if not (self.var_y or self.moe_y):
            raise IngestError("a variance or margin-of-error column for y is required")
        if self.moe_divisor <= 0:
            raise IngestError("moe_divisor must be positive")

    @classmethod
    def from_dict(cls, values: dict) -> "ColumnMapping":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise IngestError(f"unknown column-mapping keys: {', '.join(sorted(unknown))}")
        kwargs = {}
        for k, v in values.items():
            if k == "moe_divisor":
                kwargs[k] = float(v)
            else:
                kwargs[k] = v or None
        # naming a moe column switches off the default variance column
        if kwargs.get("moe_y") and "var_y" not in kwargs:
            kwargs["var_y"] = None
        if kwargs.get("moe_w") and "var_w" not in kwargs:
            kwargs["var_w"] = None
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "ColumnMapping":
        from .config import read_key_values

        return cls.from_dict(read_key_values(path))

    def required(self) -> list[str]:
        cols = [self.area_id, self.y_hat, self.var_y or self.moe_y, self.w_hat]
        return [c for c in cols if c]

    def optional(self) -> list[str]:
        return [c for c in (self.var_w, self.moe_w, self.x_exact) if c]


@dataclass
class RowError:
    row: int
    message: str


@dataclass
class IngestResult:
    records: list[RawAreaRecord] = field(default_factory=list)
    errors: list[RowError] = field(default_factory=list)

    @property
    def accepted(self) -> int:
        return len(self.records)

    @property
    def rejected(self) -> int:
        return len(self.errors)


def _number(text: str, column: str) -> float:
    try:
        value = float(text)
    except (TypeError, ValueError):
        raise ValueError(f"column {column!r}: cannot parse {text!r} as a number") from None
    if not math.isfinite(value):
        raise ValueError(f"column {column!r}: value {text!r} is not finite")
    return value


def _record_from_row(row: dict, mapping: ColumnMapping) -> RawAreaRecord:
    area_id = (row.get(mapping.area_id) or "").strip()
    if not area_id:
        raise ValueError("empty area id")
    a = _number(row[mapping.y_hat], mapping.y_hat)
    b = _number(row[mapping.w_hat], mapping.w_hat)
    if mapping.var_y:
        var_a = _number(row[mapping.var_y], mapping.var_y)
    else:
        var_a = moe_to_variance(_number(row[mapping.moe_y], mapping.moe_y), mapping.moe_divisor)
    var_b = 0.0
    if mapping.var_w and row.get(mapping.var_w, "") not in ("", None):
        var_b = _number(row[mapping.var_w], mapping.var_w)
    elif mapping.moe_w and row.get(mapping.moe_w, "") not in ("", None):
        var_b = moe_to_variance(_number(row[mapping.moe_w], mapping.moe_w), mapping.moe_divisor)
    x = None
    if mapping.x_exact and row.get(mapping.x_exact, "") not in ("", None):
        x = _number(row[mapping.x_exact], mapping.x_exact)
    if mapping.scale == "log":
        # file already holds z, psi, W, C: map back so one record type serves both
        if var_b < 0:
            raise ValueError("C must be >= 0")
        y_hat, w_hat = math.exp(a), math.exp(b)
        return RawAreaRecord(area_id, y_hat, var_a * y_hat * y_hat, w_hat, var_b * w_hat * w_hat,
                             None if x is None else math.exp(x))
    return RawAreaRecord(area_id, a, var_a, b, var_b, x)


def read_csv(path, mapping: Optional[ColumnMapping] = None) -> IngestResult:
    """Read and validate area records; bad rows are reported, not dropped silently.

    Row numbers count the header as row 1.
    """
    mapping = mapping or ColumnMapping()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        if header is None:
            raise IngestError(f"{path}: missing header row")
        missing = [c for c in mapping.required() if c not in header]
        if missing:
            raise IngestError(f"{path}: missing required columns: {', '.join(missing)}")
        absent_optional = [c for c in mapping.optional() if c not in header]
        if absent_optional:
            raise IngestError(f"{path}: mapped columns not in header: {', '.join(absent_optional)}")
        out = IngestResult()
        seen: dict[str, int] = {}
        for rownum, row in enumerate(reader, start=2):
            try:
                rec = _record_from_row(row, mapping)
            except (ValueError, KeyError, OverflowError) as exc:
                out.errors.append(RowError(rownum, str(exc)))
                continue
            if rec.area_id in seen:
                out.errors.append(RowError(rownum, f"duplicate area id {rec.area_id!r} (first seen on row {seen[rec.area_id]})"))
                continue
            seen[rec.area_id] = rownum
            out.records.append(rec)
    return out


def write_csv(path, records: Sequence[RawAreaRecord]) -> None:
    """Write records with the default column names; ``read_csv`` reads them back exactly."""
    with_x = any(r.x_exact is not None for r in records)
    cols = ["area_id", "y_hat", "var_y", "w_hat", "var_w"] + (["x_exact"] if with_x else [])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for r in records:
            row = [r.area_id, repr(r.y_hat), repr(r.var_y), repr(r.w_hat), repr(r.var_w)]
            if with_x:
                row.append("" if r.x_exact is None else repr(r.x_exact))
            writer.writerow(row)

