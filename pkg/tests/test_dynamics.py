import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp
from scipy.linalg import solve_continuous_lyapunov

from skld.action import control_from_path
from skld.dynamics import (Control, DivergenceError, Path, TimeGrid, coupled_sk_run, simulate_ensemble,
                           simulate_heat, simulate_wave, skeleton_solve, unperturbed_flow)
from skld.noise import NoisePlan
from skld.spectral import (Nonlinearity, PhasePoint, basis_vector, build_config, phase_norm, sobolev_norm,
                           wave_propagate)

from conftest import sin_nonlinearity

ZERO = Nonlinearity.zero()


# -- grid and containers -----------------------------------------------------

def test_time_grid_invariants():
    g = TimeGrid.from_dt(-3.0, 1.0, 1e-3)
    assert g.n_steps == 4000
    assert abs(g.t_end - 1.0) < 1e-12
    assert g.times.size == g.n_steps + 1
    with pytest.raises(ValueError):
        TimeGrid(0.0, 0.0, 10)


def test_path_rejects_wrong_length(cfg8):
    g = TimeGrid.span(0, 1, 10)
    with pytest.raises(ValueError):
        Path(g, np.zeros((10, 8)))
    with pytest.raises(ValueError):
        Path(g, np.full((11, 8), np.nan))


def test_control_energy_is_trapezoidal(cfg8):
    g = TimeGrid.span(0, 2, 100)
    psi = Control(g, np.ones((101, 8)) * basis_vector(cfg8, 1))
    assert psi.energy() == pytest.approx(1.0)


# -- heat --------------------------------------------------------------------

def test_heat_linear_part_is_exact(cfg8):
    g = TimeGrid.span(0, math.log(2), 7)
    end = simulate_heat(cfg8, basis_vector(cfg8, 1), 0.0, ZERO, g).final
    np.testing.assert_allclose(end, 0.5 * basis_vector(cfg8, 1), atol=1e-12)


def test_heat_linear_drift_refines_to_ode(cfg1):
    # first order in dt; two resolutions combined by Richardson extrapolation
    target = math.exp(-2.0)
    ends = [simulate_heat(cfg1, [1.0], 0.0, Nonlinearity.linear(1.0), TimeGrid.span(0, 1, n)).final[0]
            for n in (2000, 4000)]
    assert abs(ends[0] - target) / abs(ends[1] - target) == pytest.approx(2.0, rel=0.01)
    assert abs(2 * ends[1] - ends[0] - target) < 1e-6


def test_heat_stationary_variance():
    cfg = build_config(n_modes=3, beta=0.25)
    eps = 0.3
    plans = [NoisePlan(99, r) for r in range(10_000)]
    u = simulate_ensemble(cfg, np.zeros(3), None, None, eps, ZERO, TimeGrid.span(0, 6, 60), plans)
    expected = eps * cfg.lam ** 2 / (2 * cfg.alpha)
    se = expected * math.sqrt(2 / len(plans))
    assert np.all(np.abs(u.var(axis=0) - expected) < 4 * se)


def test_heat_requires_noise_plan(cfg8):
    with pytest.raises(ValueError):
        simulate_heat(cfg8, np.zeros(8), 0.1, ZERO, TimeGrid.span(0, 1, 10))
    with pytest.raises(ValueError):
        simulate_heat(cfg8, np.zeros(8), -0.1, ZERO, TimeGrid.span(0, 1, 10))


def test_divergence_guard(cfg1):
    with pytest.raises(DivergenceError):
        simulate_heat(cfg1, [1.0], 0.0, Nonlinearity.linear(-50.0), TimeGrid.span(0, 1, 1000))


# -- wave --------------------------------------------------------------------

def test_wave_without_forcing_matches_propagator(cfg8):
    rng = np.random.default_rng(0)
    z0 = PhasePoint(rng.normal(size=8), rng.normal(size=8))
    g = TimeGrid.span(0, 1.3, 130)
    end = simulate_wave(cfg8, z0, 0.2, 0.0, ZERO, g).final
    ref = wave_propagate(z0, 0.2, 1.3, cfg8)
    np.testing.assert_allclose(end.u, ref.u, atol=1e-12)
    np.testing.assert_allclose(end.v, ref.v, atol=1e-11)


def test_wave_linear_drift_matches_ode(cfg1):
    mu, kappa = 0.1, 1.0
    sol = solve_ivp(lambda _, y: [y[1], (-(1 + kappa) * y[0] - y[1]) / mu], (0, 1), [1.0, 0.0],
                    method="DOP853", rtol=1e-12, atol=1e-14)
    ends = [simulate_wave(cfg1, PhasePoint([1.0], [0.0]), mu, 0.0, Nonlinearity.linear(kappa),
                          TimeGrid.span(0, 1, n)).final.u[0] for n in (4000, 8000)]
    ref = sol.y[0, -1]
    assert abs(ends[0] - ref) / abs(ends[1] - ref) == pytest.approx(2.0, rel=0.02)
    assert abs(2 * ends[1] - ends[0] - ref) < 1e-6


def test_wave_stationary_covariance():
    cfg = build_config(n_modes=2)
    mu, eps = 0.2, 0.5
    plans = [NoisePlan(5, r) for r in range(10_000)]
    u, v = simulate_ensemble(cfg, np.zeros(2), np.zeros(2), mu, eps, ZERO, TimeGrid.span(0, 8, 160), plans)
    for k in range(2):
        a = np.array([[0, 1], [-cfg.alpha[k] / mu, -1 / mu]])
        q = np.array([[0, 0], [0, eps * cfg.lam[k] ** 2 / mu ** 2]])
        cov = solve_continuous_lyapunov(a, -q)
        emp = np.cov(np.stack([u[:, k], v[:, k]]))
        se = np.sqrt((cov ** 2 + np.outer(np.diag(cov), np.diag(cov))) / len(plans))
        assert np.all(np.abs(emp - cov) < 4 * se)


def test_ensemble_matches_single_paths(cfg8):
    g = TimeGrid.span(0, 0.2, 40)
    plans = [NoisePlan(3, r) for r in range(3)]
    u, v = simulate_ensemble(cfg8, np.zeros(8), np.zeros(8), 0.1, 0.2, sin_nonlinearity(), g, plans)
    single = simulate_wave(cfg8, PhasePoint(np.zeros(8), np.zeros(8)), 0.1, 0.2, sin_nonlinearity(), g, plans[2])
    # batched linear algebra may differ from the single path in the last ulp
    np.testing.assert_allclose(u[2], single.u[-1], rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(v[2], single.v[-1], rtol=1e-13, atol=1e-15)


def test_determinism(cfg8, sin_b):
    g = TimeGrid.span(0, 0.5, 500)
    z0 = PhasePoint(basis_vector(cfg8, 1), np.zeros(8))
    a = simulate_wave(cfg8, z0, 0.05, 0.1, sin_b, g, NoisePlan(17, 2))
    b = simulate_wave(cfg8, z0, 0.05, 0.1, sin_b, g, NoisePlan(17, 2))
    np.testing.assert_array_equal(a.u, b.u)
    np.testing.assert_array_equal(a.v, b.v)


def test_weak_order_sanity(cfg8, sin_b):
    z0 = PhasePoint(basis_vector(cfg8, 1) + 0.5 * basis_vector(cfg8, 2), basis_vector(cfg8, 3))
    ends = [simulate_wave(cfg8, z0, 0.1, 0.0, sin_b, TimeGrid.span(0, 1, n)).u for n in (200, 400, 800)]
    d1 = np.max(np.abs(ends[0][-1] - ends[1][-1]))
    d2 = np.max(np.abs(ends[1][-1] - ends[2][-1]))
    assert d2 < 0.6 * d1


# -- unperturbed flow --------------------------------------------------------

def test_unperturbed_zero_stays_zero(cfg8, sin_b):
    p = unperturbed_flow(cfg8, PhasePoint(np.zeros(8), np.zeros(8)), 0.1, sin_b, TimeGrid.span(0, 5, 500))
    assert np.all(p.u == 0) and np.all(p.v == 0)


def test_unperturbed_attraction(cfg8, sin_b):
    z0 = PhasePoint(basis_vector(cfg8, 1) - basis_vector(cfg8, 4), 2 * basis_vector(cfg8, 2))
    p = unperturbed_flow(cfg8, z0, 0.1, sin_b, TimeGrid.span(0, 40, 4000))
    norms = phase_norm(PhasePoint(p.u, p.v), 0.0, cfg8)
    assert norms[-1] < 1e-3 * norms[0]
    late = norms[2000:]
    assert np.all(np.diff(late) <= 1e-15)


def test_velocity_scaling(cfg8):
    v0 = basis_vector(cfg8, 2) + 0.3 * basis_vector(cfg8, 5)
    g = TimeGrid.span(0, 1, 1000)
    sups = [unperturbed_flow(cfg8, PhasePoint(np.zeros(8), s * v0), 0.05, ZERO, g).sup_norm(cfg8)
            for s in (1.0, 3.0)]
    assert sups[1] / sups[0] == pytest.approx(3.0, rel=1e-12)


def test_energy_inequality(cfg8, sin_b):
    mu = 0.1
    rng = np.random.default_rng(11)
    g = TimeGrid.span(0, 10, 5000)
    for B, bound in ((ZERO, 1.0 + 1e-3), (sin_b, 4.0)):
        for _ in range(5):
            z0 = PhasePoint(rng.normal(size=8), rng.normal(size=8))
            p = unperturbed_flow(cfg8, z0, mu, B, g)
            vv = sobolev_norm(p.v, -1, cfg8) ** 2
            dissip = np.concatenate([[0], np.cumsum(0.5 * (vv[1:] + vv[:-1]) * g.dt)])
            energy = mu * vv + sobolev_norm(p.u, 1, cfg8) ** 2 + 2 * dissip
            assert np.max(energy) <= bound * energy[0]


# -- skeleton ----------------------------------------------------------------

def test_skeleton_zero(cfg8):
    g = TimeGrid.span(0, 1, 50)
    p = skeleton_solve(cfg8, PhasePoint(np.zeros(8), np.zeros(8)), 0.1, ZERO, Control(g, np.zeros((51, 8))))
    assert np.all(p.u == 0)


def test_skeleton_constant_forcing_steady_state(cfg8):
    g = TimeGrid.span(0, 10, 1000)
    psi = Control(g, np.tile(cfg8.alpha[0] * basis_vector(cfg8, 1), (1001, 1)))
    end = skeleton_solve(cfg8, np.zeros(8), None, ZERO, psi).final
    assert np.linalg.norm(end - basis_vector(cfg8, 1)) < 1e-4


@pytest.mark.parametrize("mu", [None, 0.2])
def test_skeleton_round_trip_second_order(cfg8, sin_b, mu):
    d = basis_vector(cfg8, 1) + 0.5 * basis_vector(cfg8, 2) - 0.2 * basis_vector(cfg8, 4)
    errs = []
    for n in (200, 400):
        g = TimeGrid.span(0, 2, n)
        u = np.sin(g.times)[:, None] * d
        psi = control_from_path(cfg8, Path(g, u), mu, sin_b)
        z0 = np.zeros(8) if mu is None else PhasePoint(np.zeros(8), d)
        errs.append(np.max(np.abs(skeleton_solve(cfg8, z0, mu, sin_b, psi).u - u)))
    assert errs[0] < 1e-4
    assert errs[0] / errs[1] > 3.5


# -- coupled SK runs ---------------------------------------------------------

def test_coupled_noiseless_from_rest(cfg8, sin_b):
    sup = coupled_sk_run(cfg8, np.zeros(8), np.zeros(8), [0.1, 0.01], 0.0, sin_b, TimeGrid.span(0, 1, 100),
                         [NoisePlan(0, 0)])
    assert np.all(sup == 0)


def test_coupled_noiseless_mode_discrepancy(cfg8):
    mu = 0.01
    g = TimeGrid.span(0, 1, 1000)
    sup = coupled_sk_run(cfg8, basis_vector(cfg8, 1), np.zeros(8), [mu], 0.0, ZERO, g, [NoisePlan(0, 0)])
    # closed forms: overdamped roots of mu r^2 + r + 1 = 0 against exp(-t)
    t = g.times[1:]
    r1, r2 = np.roots([mu, 1, 1])
    wave = (r2 * np.exp(r1 * t) - r1 * np.exp(r2 * t)) / (r2 - r1)
    ref = np.max(np.abs(wave - np.exp(-t)))
    assert sup[0, 0] == pytest.approx(ref, rel=1e-9)


def test_coupled_modes_are_uncorrelated():
    cfg = build_config(n_modes=3)
    n = 10_000
    _, final = coupled_sk_run(cfg, np.zeros(3), np.zeros(3), [0.1], 0.5, ZERO, TimeGrid.span(0, 0.5, 25),
                              [NoisePlan(8, r) for r in range(n)], with_final=True)
    c = np.corrcoef(final[:, 0, :].T)
    off = c[np.triu_indices(3, 1)]
    assert np.all(np.abs(off) < 3 / math.sqrt(n))


def test_coupled_replica_rows_are_reproducible(cfg8, sin_b):
    g = TimeGrid.span(0, 0.3, 300)
    plans = [NoisePlan(4, r) for r in range(4)]
    a = coupled_sk_run(cfg8, np.zeros(8), np.zeros(8), [0.1, 0.01], 0.1, sin_b, g, plans)
    b = coupled_sk_run(cfg8, np.zeros(8), np.zeros(8), [0.1, 0.01], 0.1, sin_b, g, plans[2:3])
    np.testing.assert_allclose(a[2], b[0], rtol=1e-13)
    np.testing.assert_array_equal(a, coupled_sk_run(cfg8, np.zeros(8), np.zeros(8), [0.1, 0.01], 0.1, sin_b,
                                                    g, plans))
