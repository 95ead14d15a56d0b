"""Domain types and per-area quantities of the log-scale Fay-Herriot model
with a covariate observed with error.

The hierarchy is

    z_i | phi_i ~ N(phi_i, psi_i)
    phi_i       ~ N(beta0 + beta1 x_i, sigma2v)
    W_i         ~ N(x_i, C_i)

with psi_i and C_i known.  Everything here is a pure function of
(params, area); nothing touches an RNG.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np

__all__ = [
    "AreaObservation",
    "ModelParams",
    "DerivedQuantities",
    "AreaArrays",
    "LogScaleOverflow",
    "as_arrays",
    "derive",
    "identity_residual",
    "posterior_phi_moments",
]


class LogScaleOverflow(OverflowError):
    """Raised when a quantity cannot be exponentiated in double precision.

    The log-scale value is kept so callers can still report it.
    """

    def __init__(self, what: str, log_value: float):
        super().__init__(f"{what} overflows on the original scale (log value {log_value:.6g})")
        self.log_value = log_value


def _check_finite(**values: float) -> None:
    for name, value in values.items():
        if not math.isfinite(value):
            raise ValueError(f"{name} must be finite, got {value!r}")


@dataclass(frozen=True)
class AreaObservation:
    """Observed data for one small area, all on the log scale.

    ``psi`` is the sampling variance of ``z`` and ``c`` the measurement-error
    variance of ``w``; ``c == 0`` means the covariate is exact.
    """

    area_id: str
    z: float
    w: float
    psi: float
    c: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "area_id", str(self.area_id))
        for name in ("z", "w", "psi", "c"):
            object.__setattr__(self, name, float(getattr(self, name)))
        _check_finite(z=self.z, w=self.w, psi=self.psi, c=self.c)
        if self.psi <= 0.0:
            raise ValueError(f"psi must be > 0, got {self.psi!r} (area {self.area_id})")
        if self.c < 0.0:
            raise ValueError(f"c must be >= 0, got {self.c!r} (area {self.area_id})")


@dataclass(frozen=True)
class ModelParams:
    """omega = (beta0, beta1, sigma2v)."""

    beta0: float
    beta1: float
    sigma2v: float

    def __post_init__(self) -> None:
        for name in ("beta0", "beta1", "sigma2v"):
            object.__setattr__(self, name, float(getattr(self, name)))
        _check_finite(beta0=self.beta0, beta1=self.beta1, sigma2v=self.sigma2v)
        if self.sigma2v < 0.0:
            raise ValueError(f"sigma2v must be >= 0, got {self.sigma2v!r}")

    def as_array(self) -> np.ndarray:
        return np.array([self.beta0, self.beta1, self.sigma2v])


@dataclass(frozen=True)
class DerivedQuantities:
    s: float
    gamma_tilde: float
    gamma_star: float
    d: float
    tau: float


@dataclass(frozen=True)
class AreaArrays:
    """Column view of a list of areas, used by the vectorised routines."""

    area_id: tuple
    z: np.ndarray
    w: np.ndarray
    psi: np.ndarray
    c: np.ndarray

    @property
    def m(self) -> int:
        return len(self.z)

    def take(self, index: Iterable[int]) -> "AreaArrays":
        index = np.asarray(list(index) if not isinstance(index, np.ndarray) else index, dtype=int)
        return AreaArrays(
            area_id=tuple(self.area_id[j] for j in index),
            z=self.z[index],
            w=self.w[index],
            psi=self.psi[index],
            c=self.c[index],
        )

    def drop(self, j: int) -> "AreaArrays":
        keep = np.delete(np.arange(self.m), j)
        return self.take(keep)

    def with_c(self, c) -> "AreaArrays":
        return AreaArrays(self.area_id, self.z, self.w, self.psi, np.broadcast_to(np.asarray(c, float), self.z.shape).copy())

    def with_w(self, w) -> "AreaArrays":
        return AreaArrays(self.area_id, self.z, np.asarray(w, float), self.psi, self.c)

    def observations(self) -> list[AreaObservation]:
        return [
            AreaObservation(a, z, w, p, c)
            for a, z, w, p, c in zip(self.area_id, self.z, self.w, self.psi, self.c)
        ]

    @classmethod
    def from_columns(cls, z, w, psi, c=None, area_id=None) -> "AreaArrays":
        z = np.asarray(z, dtype=float)
        w = np.asarray(w, dtype=float)
        psi = np.asarray(psi, dtype=float)
        c = np.zeros_like(z) if c is None else np.asarray(c, dtype=float)
        if not (z.shape == w.shape == psi.shape == c.shape) or z.ndim != 1:
            raise ValueError("z, w, psi and c must be 1-d arrays of equal length")
        if not np.all(np.isfinite(z) & np.isfinite(w) & np.isfinite(psi) & np.isfinite(c)):
            raise ValueError("area data must be finite")
        if np.any(psi <= 0):
            raise ValueError("psi must be > 0 for every area")
        if np.any(c < 0):
            raise ValueError("c must be >= 0 for every area")
        if area_id is None:
            area_id = tuple(str(i + 1) for i in range(len(z)))
        return cls(tuple(str(a) for a in area_id), z, w, psi, c)


AreaLike = Union[AreaArrays, Sequence[AreaObservation]]


def as_arrays(areas: AreaLike) -> AreaArrays:
    if isinstance(areas, AreaArrays):
        return areas
    areas = list(areas)
    if not areas:
        empty = np.zeros(0)
        return AreaArrays((), empty, empty.copy(), empty.copy(), empty.copy())
    return AreaArrays(
        area_id=tuple(a.area_id for a in areas),
        z=np.array([a.z for a in areas]),
        w=np.array([a.w for a in areas]),
        psi=np.array([a.psi for a in areas]),
        c=np.array([a.c for a in areas]),
    )


def derive(params: ModelParams, area: AreaObservation) -> DerivedQuantities:
    """Per-area S, shrinkage weights, bias exponent d and residual tau."""
    b1sq_c = params.beta1 * params.beta1 * area.c
    s = b1sq_c + params.sigma2v + area.psi
    gamma_tilde = (b1sq_c + params.sigma2v) / s
    gamma_star = params.sigma2v / (params.sigma2v + area.psi)
    d = 2.0 * area.psi * b1sq_c / s
    tau = area.z - params.beta0 - params.beta1 * area.w
    return DerivedQuantities(s=s, gamma_tilde=gamma_tilde, gamma_star=gamma_star, d=d, tau=tau)


def identity_residual(params: ModelParams, area: AreaObservation, x: float) -> float:
    """LHS minus RHS of the completing-the-square identity in x.

    Used as a test oracle for the marginal likelihood; needs ``c > 0``.
    """
    if area.c <= 0.0:
        raise ValueError("identity_residual requires c > 0")
    if not math.isfinite(x):
        raise ValueError("x must be finite")
    b0, b1, s2v = params.beta0, params.beta1, params.sigma2v
    v = s2v + area.psi
    lhs = (area.z - b0 - b1 * x) ** 2 / v + (area.w - x) ** 2 / area.c
    s = b1 ** 2 * area.c + v
    tau = area.z - b0 - b1 * area.w
    precision = b1 ** 2 / v + 1.0 / area.c
    centre = (b1 * (area.z - b0) / v + area.w / area.c) / precision
    rhs = tau ** 2 / s + precision * (x - centre) ** 2
    return lhs - rhs


def posterior_phi_moments(params: ModelParams, area: AreaObservation) -> tuple[float, float]:
    """Mean and variance of phi_i given (z_i, W_i) with x_i integrated out."""
    dq = derive(params, area)
    g = dq.gamma_tilde
    mean = g * area.z + (1.0 - g) * (params.beta0 + params.beta1 * area.w)
    return mean, g * area.psi
