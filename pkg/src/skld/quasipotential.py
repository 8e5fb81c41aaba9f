"""Minimum action method for the wave and heat quasi-potentials.

Paths are parameterized by their node values on a uniform grid over ``[-T, 0]``.
The start is pinned at rest at the origin, the end at the target; a prescribed
terminal velocity is imposed through the one-sided derivative stencil, and a free
one simply leaves the last interior node unconstrained.

The discrete action is minimized by gradient descent in the metric of the
linear part of the action (its exact Hessian when ``B`` is linear), with a
Barzilai-Borwein step seed and Armijo backtracking, so every accepted step
decreases the action.  The horizon is doubled, keeping ``dt`` fixed and warm
starting from the previous path padded with zeros, until the action settles.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy import optimize
from scipy.sparse.linalg import splu

from .action import control_from_path, time_derivative
from .dynamics import Control, Path, TimeGrid, skeleton_solve
from .spectral import (GradientPotential, HypothesisWarning, Nonlinearity, PhasePoint,
                       SpectralConfig, apply_nonlinearity, check_hypotheses,
                       nonlinearity_jvp, sobolev_norm)

__all__ = [
    "MamProblem",
    "MamResult",
    "mam_minimize",
    "v_mu",
    "v_heat",
    "v_exact_gradient",
    "sk_limit_study",
    "SkLimitTable",
    "regularized_control_experiment",
]

log = logging.getLogger(__name__)


@dataclass
class MamProblem:
    """One quasi-potential evaluation.

    ``mu=None`` selects the heat equation.  ``velocity`` is ``"free"`` or a field;
    it is ignored for heat.  ``start`` is ``"origin"`` or a radius ``rho0``: the path
    then may start anywhere (at rest) in that H-ball.
    """

    config: SpectralConfig
    target: np.ndarray
    mu: Optional[float] = None
    B: Nonlinearity = field(default_factory=Nonlinearity.zero)
    velocity: object = "free"
    horizon: float = 4.0
    dt: Optional[float] = None
    start: object = "origin"
    rel_tol: float = 1e-3
    max_horizon: float = 128.0
    max_iters: int = 2000
    grad_tol: float = 1e-6

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=float)
        if not np.all(np.isfinite(self.target)):
            raise ValueError("target must be finite")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.dt is None:
            self.dt = 0.01 if self.mu is None else min(0.01, self.mu / 20)
        n = int(round(self.horizon / self.dt))
        if n < 16:
            raise ValueError("need at least 16 path nodes; shrink dt or enlarge the horizon")

    @property
    def is_wave(self) -> bool:
        return self.mu is not None

    @property
    def free_velocity(self) -> bool:
        return isinstance(self.velocity, str) and self.velocity == "free"


@dataclass
class MamResult:
    """Minimizer on the final horizon.

    ``horizon_ladder`` lists ``(T, action)`` per horizon tried and ``trace`` the
    action after each accepted descent step on the final horizon.
    """

    action: float
    path: Path
    converged: bool
    iterations: int
    horizon_ladder: list
    mu: Optional[float] = None
    trace: list = field(default_factory=list)

    @property
    def terminal_velocity(self) -> np.ndarray:
        return time_derivative(self.path.u, self.path.grid.dt)[-1]

    def to_dict(self) -> dict:
        return {
            "mu": self.mu,
            "action": self.action,
            "converged": self.converged,
            "iterations": self.iterations,
            "horizon_ladder": [[float(t), float(a)] for t, a in self.horizon_ladder],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _d1(n, h):
    rows = [0, 0, 0]
    cols = [0, 1, 2]
    vals = [-3, 4, -1]
    i = np.arange(1, n)
    rows += list(i) * 2
    cols += list(i - 1) + list(i + 1)
    vals += [-1] * (n - 1) + [1] * (n - 1)
    rows += [n, n, n]
    cols += [n - 2, n - 1, n]
    vals += [1, -4, 3]
    return sp.csr_matrix((np.array(vals, float) / (2 * h), (rows, cols)), shape=(n + 1, n + 1))


def _d2(n, h):
    i = np.arange(1, n)
    rows = list(i) * 3
    cols = list(i - 1) + list(i) + list(i + 1)
    vals = [1] * (n - 1) + [-2] * (n - 1) + [1] * (n - 1)
    rows += [0] * 4 + [n] * 4
    cols += [0, 1, 2, 3] + [n, n - 1, n - 2, n - 3]
    vals += [2, -5, 4, -1] * 2
    return sp.csr_matrix((np.array(vals, float) / h ** 2, (rows, cols)), shape=(n + 1, n + 1))


class _DiscreteAction:
    """Discrete action on a fixed grid with its affine node parameterization."""

    def __init__(self, prob: MamProblem, n: int):
        self.prob = prob
        self.cfg = prob.config
        self.n = n
        h = prob.dt
        self.h = h
        self.grid = TimeGrid(-n * h, h, n)
        if prob.is_wave:
            self.w = np.full(n + 1, h)
            self.w[[0, -1]] = h / 2
            self.op = (prob.mu * _d2(n, h) + _d1(n, h)).tocsr()
            self.avg = sp.identity(n + 1, format="csr")
        else:
            # midpoint (box) scheme: central differences on nodes would leave the
            # sawtooth mode unpenalized
            self.w = np.full(n, h)
            self.op = sp.diags([-np.ones(n), np.ones(n)], [0, 1], shape=(n, n + 1), format="csr") / h
            self.avg = sp.diags([np.full(n, 0.5), np.full(n, 0.5)], [0, 1], shape=(n, n + 1), format="csr")
        self.op_t = self.op.T.tocsr()
        self.avg_t = self.avg.T.tocsr()
        self.lam = self.cfg.lam
        self.alpha = self.cfg.alpha
        wave = prob.is_wave
        self.ball = not (isinstance(prob.start, str) and prob.start == "origin")
        # node index sets
        first = 2 if wave else 1
        last = n - 1 if (not wave or prob.free_velocity) else n - 2
        self.free = np.arange(first, last + 1)
        if self.ball:
            self.free = np.r_[0, self.free]
        self.start_link = wave  # phi_1 = (3 phi_0 + phi_2) / 4 (zero start velocity)
        self.end_link = wave and not prob.free_velocity
        self.y = None if (not wave or prob.free_velocity) else np.asarray(prob.velocity, float)
        self._build_preconditioner()

    # affine map ---------------------------------------------------------
    def expand(self, xi):
        phi = np.zeros((self.n + 1, self.cfg.n_modes))
        phi[self.free] = xi
        phi[-1] = self.prob.target
        if self.start_link:
            phi[1] = (3 * phi[0] + phi[2]) / 4 if self.ball else phi[2] / 4
        if self.end_link:
            phi[-2] = (3 * phi[-1] + phi[-3] - 2 * self.h * self.y) / 4
        return phi

    def reduce(self, g):
        g = g.copy()
        if self.end_link:
            g[-3] += g[-2] / 4
        if self.start_link:
            g[2] += g[1] / 4
            if self.ball:
                g[0] += 3 * g[1] / 4
        return g[self.free]

    def _linear_rate(self, B):
        if B.kind == "linear":
            return np.broadcast_to(np.asarray(B.rate, float), (self.cfg.n_modes,))
        if B.kind == "sum":
            return sum((self._linear_rate(p) for p in B.parts), np.zeros(self.cfg.n_modes))
        return np.zeros(self.cfg.n_modes)

    def _build_preconditioner(self):
        n = self.n
        # reduced map P: free vars -> nodes (the linear part of expand)
        m = self.free.size
        rows, cols, vals = list(self.free), list(range(m)), [1.0] * m
        pos = {int(j): i for i, j in enumerate(self.free)}
        if self.start_link:
            rows.append(1), cols.append(pos[2]), vals.append(0.25)
            if self.ball:
                rows.append(1), cols.append(pos[0]), vals.append(0.75)
        if self.end_link:
            rows.append(n - 1), cols.append(pos[n - 2]), vals.append(0.25)
        self.P = sp.csr_matrix((vals, (rows, cols)), shape=(n + 1, m))
        rate = self._linear_rate(self.prob.B)
        wmat = sp.diags(self.w)
        self.factors = []
        for k in range(self.cfg.n_modes):
            lk = (self.op + (self.alpha[k] + rate[k]) * self.avg) / self.lam[k]
            hk = (self.P.T @ (lk.T @ wmat @ lk) @ self.P).tocsc()
            self.factors.append(splu(hk))
        if self.ball:
            e0 = np.zeros(m)
            e0[0] = 1.0
            self.h_inv_e0 = np.stack([f.solve(e0) for f in self.factors], axis=1)

    def precondition(self, g, xi=None):
        p = np.stack([f.solve(g[:, k]) for k, f in enumerate(self.factors)], axis=1)
        if self.ball and xi is not None:
            # sphere curvature on the start block (rank one per mode, Sherman-Morrison)
            q = self.h_inv_e0 / (1.0 + self._shift * self.h_inv_e0[0])
            p = p - self._shift * q * p[0]
            # Newton step restricted to start moves tangent to the sphere
            n = xi[0] / np.linalg.norm(xi[0])
            q = q * n
            nu = np.dot(p[0], n) / np.dot(q[0], n)
            p = p - nu * q
        return p

    # objective ----------------------------------------------------------
    def residual(self, phi):
        state = self.avg @ phi
        b = apply_nonlinearity(self.prob.B, state, self.cfg)
        return (self.op @ phi + self.alpha * state - b) / self.lam, state

    def value(self, phi):
        r, _ = self.residual(phi)
        return 0.5 * float(np.sum(self.w[:, None] * r * r))

    def value_grad(self, phi):
        r, state = self.residual(phi)
        val = 0.5 * float(np.sum(self.w[:, None] * r * r))
        y = self.w[:, None] * r / self.lam
        g = self.op_t @ y + self.avg_t @ (self.alpha * y - nonlinearity_jvp(self.prob.B, state, y, self.cfg))
        return val, g

    def tangent(self, xi, g):
        """Drop the radial part of the start-node gradient (start pinned to the sphere)."""
        if not self.ball:
            return g
        n = xi[0] / np.linalg.norm(xi[0])
        g = g.copy()
        radial = float(np.dot(g[0], n))
        g[0] -= radial * n
        # the multiplier of the sphere constraint, reused by precondition()
        self._shift = max(0.0, -radial) / float(self.prob.start)
        return g

    def retract(self, xi):
        if not self.ball:
            return xi
        nrm = float(np.linalg.norm(xi[0]))
        xi = xi.copy()
        xi[0] = xi[0] * (float(self.prob.start) / nrm) if nrm > 0 else xi[0]
        return xi


def _descend(problem: _DiscreteAction, xi, max_iters, grad_tol, trace=None):
    xi = problem.retract(xi)
    val, g_full = problem.value_grad(problem.expand(xi))
    if trace is not None:
        trace.append(val)
    g = problem.tangent(xi, problem.reduce(g_full))
    step = 1.0
    it = 0
    converged = False
    for it in range(1, max_iters + 1):
        p = problem.precondition(g, xi)
        gp = float(np.sum(g * p))
        if gp <= grad_tol ** 2 * max(val, 1e-300) or gp <= 1e-300:
            converged = True
            it -= 1
            break
        s = min(max(step, 1e-4), 10.0)
        accepted = False
        for _ in range(60):
            trial = problem.retract(xi - s * p)
            tval = problem.value(problem.expand(trial))
            if tval <= val - 1e-4 * s * gp:
                accepted = True
                break
            s *= 0.5
        if not accepted:
            # no decrease available at working precision
            converged = gp <= 1e-10 * max(val, 1e-300)
            break
        tval, tg_full = problem.value_grad(problem.expand(trial))
        tg = problem.tangent(trial, problem.reduce(tg_full))
        dg = tg - g
        dp = problem.precondition(dg, trial)
        denom = float(np.sum(dg * dp))
        dx = trial - xi
        step = float(np.sum(dx * dg)) / denom if denom > 0 else 1.0
        if not np.isfinite(step) or step <= 0:
            step = 1.0
        xi, val, g = trial, tval, tg
        if trace is not None:
            trace.append(val)
    return xi, val, it, converged


def mam_minimize(problem: MamProblem) -> MamResult:
    """Minimize the discrete action from rest at 0 to ``problem.target``."""
    cfg = problem.config
    if problem.is_wave:
        rep = check_hypotheses(cfg, problem.B, problem.mu)
        if rep.mu_ok is False:
            warnings.warn(f"mu={problem.mu} is above the small-mass threshold {rep.mu_threshold:.4g}",
                          HypothesisWarning, stacklevel=2)
    if not (isinstance(problem.start, str) and problem.start == "origin"):
        return _ball_scan(problem)
    n = int(round(problem.horizon / problem.dt))
    disc = _DiscreteAction(problem, n)
    xi = _initial_nodes(disc, np.zeros(cfg.n_modes))
    ladder = []
    total_iters = 0
    converged = True
    while True:
        trace = []
        xi, val, iters, ok = _descend(disc, xi, problem.max_iters, problem.grad_tol, trace)
        total_iters += iters
        converged = converged and ok
        T = disc.n * disc.h
        ladder.append((T, val))
        log.debug("horizon %.3g action %.8g iters %d", T, val, iters)
        if len(ladder) >= 2 and abs(ladder[-2][1] - val) <= problem.rel_tol * max(val, 1e-300):
            break
        if 2 * T > problem.max_horizon + 1e-9:
            converged = False
            break
        # double the horizon at fixed dt; the earlier half starts at rest at 0
        phi = np.zeros((2 * disc.n + 1, cfg.n_modes))
        phi[disc.n:] = disc.expand(xi)
        disc = _DiscreteAction(problem, 2 * disc.n)
        xi = phi[disc.free]
    res = _result(problem, disc, xi, val, converged, total_iters, ladder)
    res.trace = trace
    return res


def _initial_nodes(disc, start):
    # straight line in mode space from the start to the target
    s = np.linspace(0.0, 1.0, disc.n + 1)[:, None]
    phi = (1 - s) * start + s * disc.prob.target
    return phi[disc.free]


def _result(problem, disc, xi, val, converged, iters, ladder):
    phi = disc.expand(xi)
    path = Path(disc.grid, phi, time_derivative(phi, disc.h) if problem.is_wave else None)
    return MamResult(val, path, converged, iters, ladder, problem.mu)


def _ball_scan(problem: MamProblem) -> MamResult:
    """Cheapest arrival from rest on the sphere of radius ``rho0``.

    From a ball the infimum is reached at a finite horizon, so instead of the
    doubling ladder the horizons ``T 2^j`` (``j >= -3``) are scanned and the best
    one is returned.
    """
    rho0 = float(problem.start)
    if not rho0 > 0:
        raise ValueError("start radius must be positive")
    x = problem.target
    nrm = float(np.linalg.norm(x))
    if nrm <= rho0:
        n = 16
        disc = _DiscreteAction(MamProblem(problem.config, x, problem.mu, problem.B, problem.velocity,
                                          n * problem.dt, problem.dt, "origin"), n)
        grid = TimeGrid(-n * problem.dt, problem.dt, n)
        u = np.tile(x, (n + 1, 1))
        return MamResult(0.0, Path(grid, u, np.zeros_like(u) if problem.is_wave else None), True, 0, [], problem.mu)
    start = x * (rho0 / nrm)
    best, ladder, total, all_ok = None, [], 0, True
    T = problem.horizon / 16
    rises = 0
    while T <= problem.max_horizon + 1e-9:
        n = int(round(T / problem.dt))
        if n >= 16:
            disc = _DiscreteAction(problem, n)
            xi, val, iters, ok = _descend(disc, _initial_nodes(disc, start), problem.max_iters, problem.grad_tol)
            total += iters
            ladder.append((n * problem.dt, val))
            if best is None or val < best[2]:
                best, rises, all_ok = (disc, xi, val), 0, ok
            else:
                rises += 1
                if rises >= 2:
                    break
        T *= 2
    if best is None:
        raise ValueError("no horizon in the scan has 16 nodes; shrink dt")
    solved = {}

    def at_horizon(log_t):
        n = max(16, int(round(math.exp(log_t) / problem.dt)))
        if n not in solved:
            disc = _DiscreteAction(problem, n)
            solved[n] = (disc,) + _descend(disc, _initial_nodes(disc, start), problem.max_iters,
                                           problem.grad_tol)
        return solved[n][2]

    t_best = best[0].n * problem.dt
    optimize.minimize_scalar(at_horizon, bounds=(math.log(t_best / 2), math.log(2 * t_best)),
                             method="bounded", options={"xatol": 0.02})
    for disc, xi, val, iters, ok in solved.values():
        total += iters
        ladder.append((disc.n * problem.dt, val))
        if val < best[2]:
            best, all_ok = (disc, xi, val), ok
    ladder.sort()
    disc, xi, val = best
    return _result(problem, disc, xi, val, all_ok, total, ladder)


def v_mu(config: SpectralConfig, x, mu: float, B: Nonlinearity, **opts) -> float:
    """``inf_y V^mu(x, y)`` by minimizing over paths with free terminal velocity."""
    return mam_minimize(MamProblem(config, x, mu, B, velocity="free", **opts)).action


def v_heat(config: SpectralConfig, x, B: Nonlinearity, **opts) -> float:
    """Quasi-potential of the heat system."""
    return mam_minimize(MamProblem(config, x, None, B, **opts)).action


def v_exact_gradient(config: SpectralConfig, x, y, mu: float, F: GradientPotential) -> float:
    """``|(-A)^{1/2} Q^-1 x|^2 + 2 F(x) + mu |Q^-1 y|^2`` (``y=None`` means ``y = 0``)."""
    if not F.certified:
        raise ValueError("gradient potential is not certified against B; call certify() first")
    x = np.asarray(x, float)
    lam2 = config.lam ** 2
    val = float(np.sum(config.alpha * x * x / lam2)) + 2.0 * float(F.value(x))
    if y is not None:
        y = np.asarray(y, float)
        val += mu * float(np.sum(y * y / lam2))
    return val


@dataclass
class SkLimitTable:
    mus: list
    v_mu: list
    converged: list
    v_heat: float

    @property
    def gaps(self) -> list:
        return [abs(v - self.v_heat) for v in self.v_mu]

    def rows(self):
        return [(m, v, self.v_heat, g) for m, v, g in zip(self.mus, self.v_mu, self.gaps)]

    def to_dict(self) -> dict:
        return {"mu": self.mus, "v_mu": self.v_mu, "converged": self.converged,
                "v_heat": self.v_heat, "gap": self.gaps}


def sk_limit_study(config: SpectralConfig, x, mu_ladder: Sequence[float], B: Nonlinearity,
                   **opts) -> SkLimitTable:
    """``V_mu(x)`` along a decreasing ``mu`` ladder next to the heat value ``V(x)``."""
    mus = sorted((float(m) for m in mu_ladder), reverse=True)
    heat_opts = {k: v for k, v in opts.items() if k != "dt"}
    heat = mam_minimize(MamProblem(config, x, None, B, **heat_opts))
    vals, flags = [], []
    for mu in mus:
        res = mam_minimize(MamProblem(config, x, mu, B, velocity="free", **opts))
        vals.append(res.action)
        flags.append(res.converged)
    return SkLimitTable(mus, vals, flags, heat.action)


def regularized_control_experiment(config: SpectralConfig, result: MamResult, mu: float,
                                   B: Nonlinearity, delta_ladder: Sequence[float], beta: Optional[float] = None):
    """Smooth the optimal control by ``(1 + delta alpha_k)^{-1/2}`` and re-solve.

    Returns rows ``(delta, drift, drift / sqrt(delta), energy_ratio)`` where drift is the
    ``H^{2 beta}`` distance between the endpoints reached with the original and the
    smoothed control.
    """
    beta = config.beta if beta is None else beta
    psi = control_from_path(config, result.path, mu, B)
    z0 = PhasePoint(np.zeros(config.n_modes), np.zeros(config.n_modes))
    ref = skeleton_solve(config, z0, mu, B, psi).u[-1]
    e0 = psi.energy()
    rows = []
    for delta in delta_ladder:
        mult = (1.0 + delta * config.alpha) ** -0.5
        psi_d = Control(psi.grid, psi.values * mult)
        end = skeleton_solve(config, z0, mu, B, psi_d).u[-1]
        drift = float(sobolev_norm(ref - end, 2 * beta, config))
        ratio = drift / math.sqrt(delta) if delta > 0 else 0.0
        rows.append((float(delta), drift, ratio, psi_d.energy() / e0 if e0 > 0 else 1.0))
    return rows
