"""Fast self-checks of the structural invariants, used by ``skld verify``.

Each check returns ``(name, passed, detail)``.  The suite is deterministic and
runs in a few seconds; the full tests live in the test suite.
"""

from __future__ import annotations

import math
from typing import Callable, List, Tuple

import numpy as np
from scipy import integrate
from scipy.linalg import expm

from .action import (MollifierSpec, action_wave, linear_min_energy_finite, linear_min_energy_infinite)
from .dynamics import Path, TimeGrid, simulate_heat, simulate_wave, unperturbed_flow
from .noise import NoisePlan
from .quasipotential import MamProblem, mam_minimize
from .spectral import (Nonlinearity, PhasePoint, SpectralConfig, basis_vector, build_config,
                       check_hypotheses, mode_propagator, phase_norm, sobolev_norm)

Check = Tuple[str, bool, str]


def _propagator_oracle(rng) -> Check:
    worst = 0.0
    for _ in range(100):
        mu = 10 ** rng.uniform(-2, 1)
        alpha = 10 ** rng.uniform(-1, 2)
        if rng.random() < 0.2:
            alpha = (1 + rng.uniform(-1e-7, 1e-7)) / (4 * mu)
        t = rng.uniform(0, 5 * mu)
        ref = expm(np.array([[0, 1], [-alpha / mu, -1 / mu]]) * t)
        got = mode_propagator(np.array([alpha]), mu, t).matrices[0]
        worst = max(worst, np.max(np.abs(got - ref)) / np.max(np.abs(ref)))
    return "propagator matches matrix exponential", worst < 1e-10, f"max rel err {worst:.2e}"


def _determinant(rng) -> Check:
    mu, t = 0.3, 0.7
    alpha = np.array([0.5, 1 / (4 * mu), 10.0])
    m = mode_propagator(alpha, mu, t).matrices
    det = np.linalg.det(m)
    err = float(np.max(np.abs(det / math.exp(-t / mu) - 1)))
    return "propagator determinant is exp(-t/mu)", err < 1e-12, f"rel err {err:.2e}"


def _norm_consistency(cfg, rng) -> Check:
    z = PhasePoint(rng.normal(size=cfg.n_modes), rng.normal(size=cfg.n_modes))
    errs = []
    for delta in (0.0, 1.0, 1.0 + 2 * cfg.beta):
        lhs = phase_norm(z, delta, cfg) ** 2
        rhs = sobolev_norm(z.u, delta, cfg) ** 2 + sobolev_norm(z.v, delta - 1, cfg) ** 2
        errs.append(abs(lhs - rhs) / rhs)
    return "phase norm splits into its components", max(errs) < 1e-12, f"max rel err {max(errs):.2e}"


def _heat_exact(cfg) -> Check:
    e1 = basis_vector(cfg, 1)
    g = TimeGrid.span(0.0, math.log(2), 50)
    end = simulate_heat(cfg, e1, 0.0, Nonlinearity.zero(), g).final
    target = 0.5 * np.exp(-(cfg.alpha[0] - 1.0) * math.log(2)) * e1
    err = float(np.max(np.abs(end - target)))
    return "noiseless heat step is exact", err < 1e-12, f"err {err:.2e}"


def _determinism(cfg) -> Check:
    g = TimeGrid.span(0.0, 0.5, 200)
    z0 = PhasePoint(np.zeros(cfg.n_modes), np.zeros(cfg.n_modes))
    a = simulate_wave(cfg, z0, 0.1, 0.05, Nonlinearity.zero(), g, NoisePlan(11, 3))
    b = simulate_wave(cfg, z0, 0.1, 0.05, Nonlinearity.zero(), g, NoisePlan(11, 3))
    same = bool(np.array_equal(a.u, b.u) and np.array_equal(a.v, b.v))
    return "same seed and replica give identical paths", same, ""


def _attraction(cfg, B, mu) -> Check:
    z0 = PhasePoint(basis_vector(cfg, 1), basis_vector(cfg, 2))
    g = TimeGrid.span(0.0, 60.0, 6000)
    p = unperturbed_flow(cfg, z0, mu, B, g)
    ratio = float(phase_norm(PhasePoint(p.u[-1], p.v[-1]), 0.0, cfg) / phase_norm(z0, 0.0, cfg))
    return "unperturbed flow is attracted to 0", ratio < 1e-3, f"|z(T)|/|z0| = {ratio:.2e}"


def _velocity_scaling(cfg, mu) -> Check:
    g = TimeGrid.span(0.0, 1.0, 500)
    v0 = basis_vector(cfg, 1) + 0.5 * basis_vector(cfg, 3)
    sups = []
    for s in (1.0, 2.0):
        p = unperturbed_flow(cfg, PhasePoint(np.zeros(cfg.n_modes), s * v0), mu, Nonlinearity.zero(), g)
        sups.append(float(np.max(np.linalg.norm(p.u, axis=-1))))
    err = abs(sups[1] / sups[0] - 2.0) / 2.0
    return "sup |u| is linear in the initial velocity", err < 1e-12, f"rel err {err:.2e}"


def _finite_horizon(cfg) -> Check:
    z = PhasePoint(basis_vector(cfg, 1), 0.5 * basis_vector(cfg, 2))
    vals = [linear_min_energy_finite(cfg, z, 1.0, T) for T in (1.0, 5.0, 20.0, 40.0)]
    inf = linear_min_energy_infinite(cfg, z, 1.0)
    ok = all(a >= b for a, b in zip(vals, vals[1:])) and abs(vals[-1] - inf) < 1e-6
    return "finite-horizon energy decreases to the infinite one", ok, f"{vals[-1]:.8f} vs {inf:.8f}"


def _mam_linear(cfg) -> Check:
    e1 = basis_vector(cfg, 1)
    res = mam_minimize(MamProblem(cfg, e1, 0.5, Nonlinearity.zero(), velocity=np.zeros(cfg.n_modes)))
    exact = linear_min_energy_infinite(cfg, PhasePoint(e1, np.zeros(cfg.n_modes)), 0.5)
    err = abs(res.action - exact) / exact
    return "minimum action matches the linear oracle", res.converged and err < 0.02, f"rel err {err:.2e}"


def _decomposition(cfg) -> Check:
    g = TimeGrid.span(0.0, 2 * math.pi, 4000)
    path = Path(g, np.sin(g.times)[:, None] * basis_vector(cfg, 1))
    rep = action_wave(cfg, path, 0.3, Nonlinearity.zero())
    rel = rep.residual_norm / rep.value
    return "action equals heat part plus remainder", rel < 1e-8, f"rel residual {rel:.2e}"


def _mollifier_mass() -> Check:
    spec = MollifierSpec()
    errs = []
    for mu in (1e-1, 1e-2, 1e-3):
        w = spec.width(mu)
        val, _ = integrate.quad(lambda t: float(spec.rho_mu(np.array([t]), mu)[0]), 0.0, w,
                                epsabs=0.0, epsrel=1e-13, limit=200)
        errs.append(abs(val - 1.0))
    return "mollifier has unit mass", max(errs) < 1e-12, f"max err {max(errs):.2e}"


def _hypotheses(cfg, B, mu) -> Check:
    rep = check_hypotheses(cfg, B, mu)
    return "configuration satisfies the structural hypotheses", rep.admissible, \
        f"mu threshold {rep.mu_threshold:.4g}"


def run_suite(cfg: SpectralConfig = None, B: Nonlinearity = None, mu: float = 0.1,
              seed: int = 0) -> List[Check]:
    """Run every check; defaults are the nonlinear reference configuration."""
    if cfg is None:
        cfg = build_config()
    if B is None:
        B = Nonlinearity.nemytskii(lambda xi, s: 0.5 * np.sin(s), 0.5, db=lambda xi, s: 0.5 * np.cos(s),
                                   label="0.5 sin")
    rng = np.random.default_rng(seed)
    checks: List[Callable[[], Check]] = [
        lambda: _hypotheses(cfg, B, mu),
        lambda: _propagator_oracle(rng),
        lambda: _determinant(rng),
        lambda: _norm_consistency(cfg, rng),
        lambda: _heat_exact(cfg),
        lambda: _determinism(cfg),
        lambda: _attraction(cfg, B, mu),
        lambda: _velocity_scaling(cfg, mu),
        lambda: _finite_horizon(cfg),
        lambda: _decomposition(cfg),
        _mollifier_mass,
        lambda: _mam_linear(cfg),
    ]
    return [c() for c in checks]
