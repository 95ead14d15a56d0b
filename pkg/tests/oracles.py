"""Independent, vectorised re-statements of model formulas used as test oracles."""
import numpy as np


def scores_batch(b0, b1, s2v, z, w, psi, c):
    """Raw and unbiased scores for a batch of datasets; z and w are (R, m)."""
    s = b1 * b1 * c + s2v + psi
    tau = z - b0 - b1 * w
    u1 = np.sum(tau / s, axis=1)
    u2_raw = -np.sum(b1 * c / s) + np.sum(w * tau / s, axis=1) + np.sum(tau ** 2 * b1 * c / s ** 2, axis=1)
    u3 = 0.5 * np.sum(tau ** 2 / s ** 2, axis=1) - 0.5 * np.sum(1 / s)
    u2 = u2_raw + np.sum(b1 * c / s)
    return np.column_stack([u1, u2_raw, u3]), np.column_stack([u1, u2, u3])


def draw_zw(gen, reps, x, psi, c, b0, b1, s2v):
    """z and W at fixed true covariates x."""
    m = len(x)
    v = gen.normal(0, np.sqrt(s2v), (reps, m))
    e = gen.normal(0, 1, (reps, m)) * np.sqrt(psi)
    u = gen.normal(0, 1, (reps, m)) * np.sqrt(c)
    return b0 + b1 * x + v + e, x + u


def bisect(f, lo, hi, xtol=1e-10):
    flo = f(lo)
    while hi - lo > xtol:
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


def dgp_arrays(seed, m, k_frac=0.5, d=2.0, s2v=2.0):
    """One draw from the simulation design, returned as plain arrays plus x."""
    gen = np.random.default_rng(seed)
    x = gen.normal(5, 3, m)
    psi = gen.gamma(4.5, 0.5, m)
    c = np.zeros(m)
    c[gen.permutation(m)[: int(round(k_frac * m))]] = d
    z = 3 * x + gen.normal(0, np.sqrt(s2v), m) + gen.normal(0, 1, m) * np.sqrt(psi)
    w = x + gen.normal(0, 1, m) * np.sqrt(c)
    return z, w, psi, c, x
