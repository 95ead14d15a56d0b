import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from fhme.model import (
    AreaArrays,
    AreaObservation,
    ModelParams,
    as_arrays,
    derive,
    identity_residual,
    posterior_phi_moments,
)

finite = st.floats(-20, 20, allow_nan=False)
positive = st.floats(1e-4, 20)
nonneg = st.floats(0, 20)


@st.composite
def param_area(draw, c_positive=False):
    p = ModelParams(draw(finite), draw(st.floats(-5, 5)), draw(nonneg))
    c = draw(st.floats(1e-3, 20) if c_positive else nonneg)
    a = AreaObservation("a", draw(finite), draw(finite), draw(positive), c)
    return p, a


def test_derive_hand_example():
    dq = derive(ModelParams(0, 3, 2), AreaObservation("a", 10, 3, 1, 2))
    assert dq.s == pytest.approx(21)
    assert dq.gamma_tilde == pytest.approx(20 / 21)
    assert dq.d == pytest.approx(12 / 7)
    assert dq.gamma_star == pytest.approx(2 / 3)
    assert dq.tau == pytest.approx(1.0)


def test_derive_zero_c_collapses():
    dq = derive(ModelParams(1, 2, 0.7), AreaObservation("a", 1, 1, 0.3, 0))
    assert dq.gamma_tilde == dq.gamma_star
    assert dq.d == 0.0


def test_derive_zero_slope_kills_me_term():
    dq = derive(ModelParams(0, 0, 2), AreaObservation("a", 1, 1, 1, 5))
    assert dq.s == 3.0
    assert dq.gamma_tilde == pytest.approx(2 / 3)
    assert dq.d == 0.0


@settings(max_examples=300)
@given(param_area())
def test_derive_invariants(pa):
    p, a = pa
    dq = derive(p, a)
    assert dq.s > 0
    assert 0 <= dq.gamma_tilde <= 1
    assert 0 <= dq.gamma_star < 1
    assert dq.d >= 0
    assert (dq.d == 0) == (p.beta1 * p.beta1 * a.c * a.psi == 0)
    if a.c == 0:
        assert dq.gamma_tilde == dq.gamma_star


@settings(max_examples=200)
@given(param_area(), st.floats(1e-3, 5))
def test_gamma_tilde_nondecreasing_in_c(pa, extra):
    p, a = pa
    if p.beta1 == 0:
        return
    bigger = AreaObservation("a", a.z, a.w, a.psi, a.c + extra)
    assert derive(p, bigger).gamma_tilde >= derive(p, a).gamma_tilde


@pytest.mark.parametrize("bad", [
    dict(psi=0.0), dict(psi=-1.0), dict(c=-0.1), dict(z=math.nan), dict(w=math.inf),
])
def test_area_validation(bad):
    kw = dict(area_id="a", z=1.0, w=1.0, psi=1.0, c=0.0)
    kw.update(bad)
    with pytest.raises(ValueError):
        AreaObservation(**kw)


def test_params_validation():
    with pytest.raises(ValueError):
        ModelParams(0, 1, -1e-9)
    with pytest.raises(ValueError):
        ModelParams(math.nan, 1, 1)


def test_area_is_immutable():
    a = AreaObservation("a", 1, 1, 1)
    with pytest.raises(AttributeError):
        a.z = 2.0


def test_identity_hand_example():
    r = identity_residual(ModelParams(0, 1, 1), AreaObservation("a", 2, 1, 1, 1), 1.0)
    assert abs(r) < 1e-12


def test_identity_x_equals_w_zero_slope():
    p = ModelParams(0.3, 0.0, 1.5)
    a = AreaObservation("a", 2.2, -1.0, 0.4, 0.9)
    assert abs(identity_residual(p, a, a.w)) < 1e-14


def test_identity_rejects_zero_c():
    with pytest.raises(ValueError):
        identity_residual(ModelParams(0, 1, 1), AreaObservation("a", 1, 1, 1, 0), 0.0)


@settings(max_examples=300)
@given(param_area(c_positive=True), st.floats(-20, 20))
def test_identity_random(pa, x):
    p, a = pa
    lhs_scale = 1 + (a.z - p.beta0 - p.beta1 * x) ** 2 / (p.sigma2v + a.psi) + (a.w - x) ** 2 / a.c
    assert abs(identity_residual(p, a, x)) <= 1e-10 * lhs_scale


def test_posterior_hand_example():
    mean, var = posterior_phi_moments(ModelParams(0, 3, 2), AreaObservation("a", 10, 3, 1, 2))
    assert mean == pytest.approx(209 / 21)
    assert var == pytest.approx(20 / 21)


def test_posterior_full_shrinkage():
    mean, var = posterior_phi_moments(ModelParams(1, 2, 0), AreaObservation("a", 10, 3, 1, 0))
    assert mean == 7.0
    assert var == 0.0


def _quadrature_moments(p: ModelParams, a: AreaObservation, n: int = 801):
    """Moments of phi under the joint posterior of (phi, x), flat prior on x.

    Trapezoid rule on a wide 2-D grid; for smooth, fast-decaying integrands
    it converges far beyond the 1e-6 needed here.
    """
    xs = 12 * math.sqrt(a.c)
    ps = 12 * math.sqrt(a.psi + p.sigma2v + p.beta1 ** 2 * a.c)
    phi = np.linspace(a.z - ps, a.z + ps, n)[:, None]
    x = np.linspace(a.w - xs, a.w + xs, n)[None, :]
    # Gaussian log densities up to constants that cancel in the ratios
    logd = -0.5 * ((a.z - phi) ** 2 / a.psi
                   + (phi - p.beta0 - p.beta1 * x) ** 2 / p.sigma2v
                   + (a.w - x) ** 2 / a.c)
    dens = np.exp(logd - logd.max())
    marg = integrate.trapezoid(dens, x[0], axis=1)
    grid = phi[:, 0]
    m0 = integrate.trapezoid(marg, grid)
    mean = integrate.trapezoid(grid * marg, grid) / m0
    var = integrate.trapezoid((grid - mean) ** 2 * marg, grid) / m0
    return mean, var


def _posterior_grid():
    gen = np.random.default_rng(3)
    out = []
    for _ in range(20):
        p = ModelParams(gen.uniform(-1, 1), gen.uniform(-2, 2), gen.uniform(0.2, 2))
        a = AreaObservation("a", gen.uniform(-2, 2), gen.uniform(-1, 1), gen.uniform(0.2, 2), gen.uniform(0.1, 2))
        out.append((p, a))
    return out


@pytest.mark.parametrize("p,a", _posterior_grid())
def test_posterior_matches_quadrature(p, a):
    mean, var = posterior_phi_moments(p, a)
    qm, qv = _quadrature_moments(p, a)
    assert abs(mean - qm) < 1e-6
    assert abs(var - qv) < 1e-6


def test_arrays_roundtrip_and_views():
    obs = [AreaObservation(str(i), i, 2 * i, 1 + i, 0.5 * i) for i in range(5)]
    arr = as_arrays(obs)
    assert arr.m == 5
    assert arr.observations() == obs
    assert arr.drop(2).area_id == ("0", "1", "3", "4")
    assert list(arr.take([4, 4]).z) == [4.0, 4.0]
    assert as_arrays([]).m == 0
    with pytest.raises(ValueError):
        AreaArrays.from_columns([1, 2], [1, 2], [1, 0])
