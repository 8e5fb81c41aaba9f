import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.linalg import expm

from skld.action import (ActionReport, IllConditionedWarning, MollifierSpec, action_heat, action_wave,
                         control_from_path, controllability_gramian, linear_min_energy_finite,
                         linear_min_energy_heat, linear_min_energy_infinite, mollify, second_derivative,
                         time_derivative)
from skld.dynamics import Path, TimeGrid
from skld.spectral import Nonlinearity, PhasePoint, basis_vector, build_config, measured_decay

ZERO = Nonlinearity.zero()


def _const_path(cfg, T=3.0, n=300):
    g = TimeGrid.span(0, T, n)
    return Path(g, np.tile(basis_vector(cfg, 1), (n + 1, 1)))


def _reversed_flow(cfg, x, T=10.0, dt=1e-3):
    g = TimeGrid.from_dt(-T, 0.0, dt)
    return Path(g, np.exp(np.outer(g.times, cfg.alpha)) * x)


# -- finite differences ------------------------------------------------------

def test_derivative_stencils_are_exact_on_quadratics():
    g = TimeGrid.span(0, 1, 10)
    t = g.times[:, None]
    y = 3 * t ** 2 - t + 2
    np.testing.assert_allclose(time_derivative(y, g.dt), 6 * t - 1, atol=1e-12)
    np.testing.assert_allclose(second_derivative(y, g.dt), np.full_like(t, 6.0), atol=1e-9)
    with pytest.raises(ValueError):
        time_derivative(y[:2], g.dt)


# -- controls ----------------------------------------------------------------

def test_zero_path_zero_control(cfg8):
    g = TimeGrid.span(0, 1, 50)
    psi = control_from_path(cfg8, Path(g, np.zeros((51, 8))), 0.3, Nonlinearity.linear(0.2))
    assert np.all(psi.values == 0)


def test_constant_path_control(cfg8):
    psi = control_from_path(cfg8, _const_path(cfg8), None, ZERO)
    np.testing.assert_allclose(psi.values, np.tile(basis_vector(cfg8, 1), (301, 1)), atol=1e-12)
    assert np.allclose(np.linalg.norm(psi.values, axis=1), 1.0)


def test_reversed_flow_control():
    cfg = build_config(n_modes=3)
    x = np.array([1.0, -0.5, 0.2])
    phi = _reversed_flow(cfg, x, T=3.0, dt=1e-4)
    psi = control_from_path(cfg, phi, None, ZERO)
    np.testing.assert_allclose(psi.values, 2 * cfg.alpha * phi.u, atol=2e-5 * 81)


def test_ill_conditioned_noise_warns():
    cfg = build_config(n_modes=8, beta=200.0)
    with pytest.warns(IllConditionedWarning):
        control_from_path(cfg, _const_path(cfg), None, ZERO)


# -- action values -----------------------------------------------------------

def test_heat_action_examples(cfg8):
    g = TimeGrid.span(0, 1, 20)
    assert action_heat(cfg8, Path(g, np.zeros((21, 8))), ZERO).value == 0
    assert action_heat(cfg8, _const_path(cfg8, T=3.0), ZERO).value == pytest.approx(1.5, rel=1e-12)
    val = action_heat(cfg8, _reversed_flow(cfg8, basis_vector(cfg8, 1)), ZERO).value
    assert val == pytest.approx(1.0, rel=1e-2)


def test_reversed_flow_matches_oracle_and_refines():
    cfg = build_config(n_modes=4, beta=0.25)
    x = np.array([0.7, 0.2, -0.1, 0.05])
    vals = [action_heat(cfg, _reversed_flow(cfg, x, T=10 / cfg.alpha[0], dt=dt), ZERO).value
            for dt in (2e-3, 1e-3)]
    oracle = linear_min_energy_infinite(cfg, PhasePoint(x, np.zeros(4)), 1.0)
    assert vals[1] == pytest.approx(oracle, rel=1e-2)
    assert abs(vals[0] - vals[1]) / vals[1] < 5e-3


def test_wave_action_examples(cfg8):
    g = TimeGrid.span(0, 1, 20)
    rep = action_wave(cfg8, Path(g, np.zeros((21, 8))), 0.4, ZERO)
    assert (rep.value, rep.heat_part, rep.remainder) == (0, 0, 0)
    rep = action_wave(cfg8, _const_path(cfg8, T=3.0), 0.4, ZERO)
    assert rep.value == pytest.approx(1.5, rel=1e-12)
    assert rep.remainder == pytest.approx(0.0, abs=1e-9)
    with pytest.raises(ValueError):
        action_wave(cfg8, _const_path(cfg8), 0.0, ZERO)


def test_decomposition_on_smooth_path(cfg8):
    mu = 0.3
    reps = []
    for n in (4000, 8000):
        g = TimeGrid.span(0, 2 * math.pi, n)
        reps.append(action_wave(cfg8, Path(g, np.sin(g.times)[:, None] * basis_vector(cfg8, 1)), mu, ZERO))
    for r in reps:
        assert r.residual_norm / r.value < 1e-8
    # control is cos t + (1 - mu) sin t; its heat part is cos t + sin t
    exact = {"value": math.pi * (1 + (1 - mu) ** 2) / 2, "heat": math.pi, "rem": math.pi * (mu ** 2 / 2 - mu)}
    assert exact["value"] == pytest.approx(exact["heat"] + exact["rem"])
    errs = [abs(r.value - exact["value"]) for r in reps]
    assert errs[0] / errs[1] > 3.5
    assert reps[1].heat_part == pytest.approx(exact["heat"], rel=1e-6)
    assert reps[1].remainder == pytest.approx(exact["rem"], rel=1e-5)


@given(st.integers(0, 2 ** 32 - 1), st.floats(0.01, 2.0))
def test_decomposition_identity_random_paths(seed, mu):
    cfg = build_config(n_modes=4)
    rng = np.random.default_rng(seed)
    g = TimeGrid.span(0, 3, 600)
    coef = rng.normal(size=(3, 4))
    u = sum(np.outer(np.sin((j + 1) * g.times + j), coef[j]) for j in range(3))
    B = Nonlinearity.nemytskii(lambda xi, s: 0.3 * np.tanh(s), 0.3)
    rep = action_wave(cfg, Path(g, u), mu, B)
    assert rep.residual_norm <= 1e-8 * max(rep.value, 1e-12)


def test_report_json_fields():
    doc = json.loads(ActionReport(1.0, 0.5, 0.5, 0.0).to_json())
    assert set(doc) == {"value", "heat_part", "remainder", "residual_norm"}


# -- minimum energies --------------------------------------------------------

def test_linear_min_energy_infinite_examples(cfg8):
    e1, z = basis_vector(cfg8, 1), np.zeros(8)
    assert linear_min_energy_infinite(cfg8, PhasePoint(e1, z), 1.0) == pytest.approx(1.0)
    assert linear_min_energy_infinite(cfg8, PhasePoint(z, e1), 0.5) == pytest.approx(0.5)
    assert linear_min_energy_infinite(cfg8, PhasePoint(z, z), 0.5) == 0


def test_finite_horizon_monotone_and_limit(cfg8):
    z = PhasePoint(basis_vector(cfg8, 1), np.zeros(8))
    assert linear_min_energy_finite(cfg8, PhasePoint(np.zeros(8), np.zeros(8)), 1.0, 1.0) == 0
    vals = [linear_min_energy_finite(cfg8, z, 1.0, T) for T in (1.0, 10.0)]
    inf = linear_min_energy_infinite(cfg8, z, 1.0)
    assert vals[0] >= vals[1] >= inf
    assert abs(linear_min_energy_finite(cfg8, z, 1.0, 20.0) - inf) < 1e-6


def _least_squares_energy(alpha, lam, mu, z, T, n):
    """Minimum energy over piecewise-constant controls, by pseudo-inverse."""
    a = np.array([[0, 1], [-alpha / mu, -1 / mu]])
    b = np.array([0, lam / mu])
    h = T / n
    aug = np.zeros((3, 3))
    aug[:2, :2] = a
    aug[:2, 2] = b
    step_in = expm(aug * h)[:2, 2]
    prop = expm(a * h)
    cols = np.empty((2, n))
    acc = step_in
    for j in range(n - 1, -1, -1):
        cols[:, j] = acc
        acc = prop @ acc
    c = np.linalg.pinv(cols / math.sqrt(h)) @ z
    return 0.5 * float(c @ c)


@pytest.mark.parametrize("mu,T", [(1.0, 3.0), (0.3, 1.0), (1.0, 20.0)])
def test_finite_horizon_matches_least_squares_oracle(mu, T):
    cfg = build_config(n_modes=1)
    z = np.array([1.0, -0.4])
    got = linear_min_energy_finite(cfg, PhasePoint(z[:1], z[1:]), mu, T)
    ref = _least_squares_energy(1.0, 1.0, mu, z, T, 4000)
    assert got == pytest.approx(ref, rel=1e-4)


def test_gramian_is_positive_definite(cfg8):
    g = controllability_gramian(cfg8, 0.2, 0.5)
    assert np.all(np.linalg.eigvalsh(g) > 0)
    np.testing.assert_allclose(g, np.swapaxes(g, -1, -2), atol=1e-15)


def test_short_horizon_warns(cfg8):
    z = PhasePoint(basis_vector(cfg8, 1), np.zeros(8))
    with pytest.warns(IllConditionedWarning):
        linear_min_energy_finite(cfg8, z, 1.0, 1e-4)
    with pytest.raises(ValueError):
        linear_min_energy_finite(cfg8, z, 1.0, 0.0)


def test_finite_horizon_random_convergence():
    cfg = build_config(n_modes=5, beta=0.3)
    rng = np.random.default_rng(12)
    for _ in range(10):
        mu = 10 ** rng.uniform(-1.5, 0.5)
        z = PhasePoint(rng.normal(size=5), rng.normal(size=5))
        omega = measured_decay(cfg, mu, t_max=40 * mu + 20)[1]
        Ts = np.linspace(0.5, 20 / omega, 12)
        vals = [linear_min_energy_finite(cfg, z, mu, T) for T in Ts]
        inf = linear_min_energy_infinite(cfg, z, mu)
        assert all(a >= b * (1 - 1e-12) for a, b in zip(vals, vals[1:]))
        assert abs(vals[-1] - inf) < 1e-6 * max(1.0, inf)


def test_heat_min_energy(cfg8):
    e1 = basis_vector(cfg8, 1)
    assert linear_min_energy_heat(cfg8, e1) == pytest.approx(1.0)
    assert linear_min_energy_heat(cfg8, e1, 1.0) == pytest.approx(1 / (1 - math.exp(-2)))


# -- mollifier ---------------------------------------------------------------

def test_mollifier_mass_and_support():
    spec = MollifierSpec()
    for mu in (1e-1, 1e-2, 1e-3):
        w = spec.width(mu)
        t = np.linspace(-w, 2 * w, 3001)
        vals = spec.rho_mu(t, mu)
        assert np.all(vals[(t <= 0) | (t >= w)] == 0)
        assert np.all(vals >= 0)
    assert spec.first_moment() == pytest.approx(1.0, rel=1e-10)
    with pytest.raises(ValueError):
        MollifierSpec(1.0)


def test_mollify_constant_is_fixed(cfg8):
    p = _const_path(cfg8)
    out = mollify(p, MollifierSpec(), 0.01)
    np.testing.assert_array_equal(out.u, p.u)


def test_mollify_linear_path_shifts(cfg8):
    spec, mu = MollifierSpec(), 0.01
    g = TimeGrid.span(-3, 0, 3000)
    p = Path(g, np.outer(g.times, basis_vector(cfg8, 1)))
    out = mollify(p, spec, mu)
    inner = g.times >= g.t_start + spec.width(mu)
    shift = mu ** spec.alpha_exponent * spec.first_moment()
    np.testing.assert_allclose(out.u[inner, 0], g.times[inner] - shift, atol=1e-10)


def test_mollify_sup_convergence(cfg8):
    spec = MollifierSpec()
    g = TimeGrid.span(-3, 0, 30000)
    p = Path(g, np.outer(np.abs(np.sin(3 * g.times)), basis_vector(cfg8, 1)))
    ratios = []
    for mu in (1e-2, 1e-3, 1e-4):
        err = np.max(np.abs(mollify(p, spec, mu).u - p.u))
        ratios.append(err / mu ** spec.alpha_exponent)
    assert max(ratios) / min(ratios) < 2.0


def test_mollify_warns_without_history(cfg8):
    g = TimeGrid.span(-0.1, 0, 100)
    with pytest.warns(RuntimeWarning):
        mollify(Path(g, np.zeros((101, 8))), MollifierSpec(), 0.1)
