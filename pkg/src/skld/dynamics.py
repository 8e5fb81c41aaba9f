"""Time integration of the stochastic heat and damped wave systems in mode space.

Both integrators are exponential: the linear flow over a step is exact, a forcing
``f`` known at the two ends of the step is integrated exactly under linear
interpolation, the nonlinearity is frozen at the left node, and the Gaussian
stochastic convolution over a step is sampled from its exact covariance.

Wave modes obey ``u' = v, mu v' = -alpha u - v + f``; heat modes
``u' = -alpha u + f``.  The forcing is ``f = B(u) + lam * psi`` for skeleton
equations and ``f = B(u)`` plus noise for the stochastic systems.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import expm

from .noise import NoisePlan
from .spectral import (Nonlinearity, PhasePoint, SpectralConfig, apply_nonlinearity,
                       mode_propagator, sobolev_norm)

__all__ = [
    "TimeGrid",
    "Path",
    "Control",
    "DivergenceError",
    "Stepper",
    "noise_covariance",
    "simulate_heat",
    "simulate_wave",
    "unperturbed_flow",
    "skeleton_solve",
    "coupled_sk_run",
    "simulate_ensemble",
]

DIVERGENCE_BOUND = 1e6


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    t_start: float
    dt: float
    n_steps: int

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.n_steps < 0:
            raise ValueError("n_steps must be nonnegative")

    @classmethod
    def span(cls, t_start: float, t_end: float, n_steps: int) -> "TimeGrid":
        return cls(float(t_start), (t_end - t_start) / n_steps, int(n_steps))

    @classmethod
    def from_dt(cls, t_start: float, t_end: float, dt: float) -> "TimeGrid":
        n = max(1, int(round((t_end - t_start) / dt)))
        return cls.span(t_start, t_end, n)

    @property
    def t_end(self) -> float:
        return self.t_start + self.n_steps * self.dt

    @property
    def times(self) -> np.ndarray:
        return self.t_start + self.dt * np.arange(self.n_steps + 1)


@dataclass
class Path:
    """States on a grid: ``u`` has shape ``(n_steps + 1, K)``; ``v`` is ``None`` for heat."""

    grid: TimeGrid
    u: np.ndarray
    v: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.u.shape[0] != self.grid.n_steps + 1:
            raise ValueError("path length must equal n_steps + 1")
        if not np.all(np.isfinite(self.u)) or (self.v is not None and not np.all(np.isfinite(self.v))):
            raise ValueError("path states must be finite")

    @property
    def final(self):
        if self.v is None:
            return self.u[-1]
        return PhasePoint(self.u[-1], self.v[-1])

    def sup_norm(self, config: SpectralConfig, delta: float = 0.0) -> float:
        return float(np.max(sobolev_norm(self.u, delta, config)))


@dataclass
class Control:
    """Control values ``psi(t_n)`` in coefficients, shape ``(n_steps + 1, K)``."""

    grid: TimeGrid
    values: np.ndarray

    def energy(self) -> float:
        """``1/2 int |psi|_H^2`` by the trapezoidal rule."""
        sq = np.sum(self.values ** 2, axis=-1)
        return 0.5 * float(np.trapezoid(sq, dx=self.grid.dt))


# ---------------------------------------------------------------------------
# step coefficients


def _hold_weights(blocks: np.ndarray, inputs: np.ndarray, dt: float):
    """Exact step matrices for ``x' = F x + g w(t)``, ``w`` linear on the step.

    Returns ``(Phi, G0, G1)`` with ``x1 = Phi x0 + G0 w0 + G1 (w1 - w0)``.
    ``blocks`` has shape ``(K, n, n)`` and ``inputs`` ``(K, n)``.
    """
    k, n, _ = blocks.shape
    aug = np.zeros((k, n + 2, n + 2))
    aug[:, :n, :n] = blocks
    aug[:, :n, n] = inputs
    aug[:, n, n + 1] = 1.0 / dt
    e = expm(aug * dt)
    return e[:, :n, :n], e[:, :n, n], e[:, :n, n + 1]


def _wave_block(alpha, mu):
    m = np.zeros((alpha.size, 2, 2))
    m[:, 0, 1] = 1.0
    m[:, 1, 0] = -alpha / mu
    m[:, 1, 1] = -1.0 / mu
    return m


def noise_covariance(config: SpectralConfig, dt: float, mus: Sequence[float] = (), heat: bool = True):
    """Exact one-step covariance of the stochastic convolutions, per mode.

    The state stacks the heat mode (if ``heat``) followed by ``(u, v)`` for each
    ``mu``; all components are driven by the same Brownian motion ``lam_k beta_k``.
    Computed with Van Loan's block exponential.  Returns shape ``(K, m, m)``.
    """
    alpha, lam = config.alpha, config.lam
    blocks, inputs = [], []
    if heat:
        blocks.append(-alpha[:, None, None] * np.ones((1, 1)))
        inputs.append(lam[:, None])
    for mu in mus:
        blocks.append(_wave_block(alpha, mu))
        inputs.append(np.stack([np.zeros_like(lam), lam / mu], axis=-1))
    m = sum(b.shape[-1] for b in blocks)
    f = np.zeros((config.n_modes, m, m))
    g = np.concatenate(inputs, axis=-1)
    i = 0
    for b in blocks:
        s = b.shape[-1]
        f[:, i:i + s, i:i + s] = b
        i += s
    big = np.zeros((config.n_modes, 2 * m, 2 * m))
    big[:, :m, :m] = -f
    big[:, :m, m:] = g[:, :, None] * g[:, None, :]
    big[:, m:, m:] = np.swapaxes(f, -1, -2)
    e = expm(big * dt)
    cov = np.swapaxes(e[:, m:, m:], -1, -2) @ e[:, :m, m:]
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def _factor(cov):
    # symmetric square-root factor; tolerant of rank deficiency
    w, q = np.linalg.eigh(cov)
    return q * np.sqrt(np.clip(w, 0.0, None))[..., None, :]


class Stepper:
    """One-step map for the heat (``mu=None``) or wave system on a fixed ``dt``.

    Operates on batches: ``u`` and ``v`` have shape ``(R, K)``.
    """

    def __init__(self, config: SpectralConfig, mu: Optional[float], dt: float, B: Nonlinearity):
        self.config = config
        self.mu = mu
        self.dt = dt
        self.B = B
        alpha, lam = config.alpha, config.lam
        self.lam = lam
        if mu is None:
            blocks = -alpha[:, None, None] * np.ones((1, 1))
            inputs = np.ones((alpha.size, 1))
            _, g0, g1 = _hold_weights(blocks, inputs, dt)
            self.phi = np.exp(-alpha * dt)
            self.g0 = g0[:, 0]
            self.g1 = g1[:, 0]
            self.noise_sd = lam * np.sqrt(-np.expm1(-2.0 * alpha * dt) / (2.0 * alpha))
            self.n_lanes = 1
        else:
            if not mu > 0:
                raise ValueError("mu must be positive")
            self.prop = mode_propagator(alpha, mu, dt)
            inputs = np.stack([np.zeros_like(alpha), np.full_like(alpha, 1.0 / mu)], axis=-1)
            _, g0, g1 = _hold_weights(_wave_block(alpha, mu), inputs, dt)
            self.phi = self.prop.matrices
            self.g0 = g0
            self.g1 = g1
            self.noise_factor = _factor(noise_covariance(config, dt, (mu,), heat=False))
            self.n_lanes = 2

    @property
    def is_wave(self) -> bool:
        return self.mu is not None

    def step(self, u, v, force0=None, force1=None, normals=None, eps: float = 0.0,
             corrector: bool = False):
        """Advance one step.  ``force0``/``force1`` are extra forcings at the two ends.

        ``normals`` has shape ``(R, K * n_lanes)`` (slot ``k * n_lanes + lane``).
        With ``corrector`` (deterministic steps only) the nonlinearity is held
        linearly between ``u`` and a frozen-``B`` prediction of the next state,
        which makes the step second order.
        """
        b0 = apply_nonlinearity(self.B, u, self.config) if not self.B.is_zero else 0.0
        f0, df = b0, 0.0
        if force0 is not None:
            f0 = f0 + force0
            df = force1 - force0
        if corrector and not self.B.is_zero:
            up, _ = self._advance(u, v, f0, df)
            df = df + apply_nonlinearity(self.B, up, self.config) - b0
        un, vn = self._advance(u, v, f0, df)
        if eps > 0:
            if not self.is_wave:
                return un + math.sqrt(eps) * self.noise_sd * normals, None
            z = normals.reshape(normals.shape[:-1] + (self.config.n_modes, 2))
            inc = np.einsum("kab,...kb->...ka", self.noise_factor, z)
            un = un + math.sqrt(eps) * inc[..., 0]
            vn = vn + math.sqrt(eps) * inc[..., 1]
        return un, vn

    def _advance(self, u, v, f0, df):
        if not self.is_wave:
            return self.phi * u + self.g0 * f0 + self.g1 * df, None
        p = self.phi
        un = p[:, 0, 0] * u + p[:, 0, 1] * v + self.g0[:, 0] * f0 + self.g1[:, 0] * df
        vn = p[:, 1, 0] * u + p[:, 1, 1] * v + self.g0[:, 1] * f0 + self.g1[:, 1] * df
        return un, vn


def _guard(u):
    if not np.all(np.isfinite(u)) or np.max(np.abs(u)) > DIVERGENCE_BOUND:
        raise DivergenceError("state norm exceeded the divergence guard")


def _run(stepper: Stepper, u0, v0, grid: TimeGrid, eps: float, noise: Optional[NoisePlan],
         forcing: Optional[np.ndarray] = None, chunk: int = 1024, corrector: bool = False) -> Path:
    k = stepper.config.n_modes
    n = grid.n_steps
    us = np.empty((n + 1, k))
    vs = np.empty((n + 1, k)) if stepper.is_wave else None
    u = np.asarray(u0, dtype=float).copy()
    v = np.asarray(v0, dtype=float).copy() if stepper.is_wave else None
    us[0] = u
    if vs is not None:
        vs[0] = v
    slots = k * stepper.n_lanes
    if eps > 0 and noise is None:
        raise ValueError("a NoisePlan is required when eps > 0")
    for start in range(0, n, chunk):
        m = min(chunk, n - start)
        z = noise.normals(start, m, slots) if eps > 0 else None
        for j in range(m):
            i = start + j
            f0 = f1 = None
            if forcing is not None:
                f0, f1 = forcing[i], forcing[i + 1]
            u, v = stepper.step(u, v, f0, f1, None if z is None else z[j], eps, corrector)
            us[i + 1] = u
            if vs is not None:
                vs[i + 1] = v
        _guard(u)
    return Path(grid, us, vs)


def simulate_heat(config: SpectralConfig, u0, eps: float, B: Nonlinearity, grid: TimeGrid,
                  noise: Optional[NoisePlan] = None) -> Path:
    """Exponential-Euler path of ``du = (Au + B(u)) dt + sqrt(eps) dw^Q``."""
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    return _run(Stepper(config, None, grid.dt, B), u0, None, grid, eps, noise)


def simulate_wave(config: SpectralConfig, z0: PhasePoint, mu: float, eps: float, B: Nonlinearity,
                  grid: TimeGrid, noise: Optional[NoisePlan] = None) -> Path:
    """Exponential-integrator path of the damped stochastic wave system with mass ``mu``."""
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    return _run(Stepper(config, mu, grid.dt, B), z0[0], z0[1], grid, eps, noise)


def unperturbed_flow(config: SpectralConfig, z0: PhasePoint, mu: float, B: Nonlinearity,
                     grid: TimeGrid) -> Path:
    return simulate_wave(config, z0, mu, 0.0, B, grid)


def skeleton_solve(config: SpectralConfig, z0, mu: Optional[float], B: Nonlinearity, psi: Control) -> Path:
    """Solve the controlled equation with forcing ``Q psi`` (heat when ``mu`` is None).

    ``z0`` is a field for heat and a :class:`PhasePoint` for the wave.  The control
    is held linearly between nodes and ``B`` by a predictor-corrector, so the
    solution is second order in the step.
    """
    forcing = config.lam * np.asarray(psi.values, dtype=float)
    stepper = Stepper(config, mu, psi.grid.dt, B)
    if mu is None:
        return _run(stepper, z0, None, psi.grid, 0.0, None, forcing, corrector=True)
    return _run(stepper, z0[0], z0[1], psi.grid, 0.0, None, forcing, corrector=True)


def coupled_sk_run(config: SpectralConfig, u0, v0, mu_list: Sequence[float], eps: float,
                   B: Nonlinearity, grid: TimeGrid, noises: Sequence[NoisePlan],
                   with_final: bool = False):
    """Run the heat system and one wave system per ``mu`` on shared Brownian paths.

    Returns ``sup_t |u^mu(t) - u(t)|_H`` with shape ``(len(noises), len(mu_list))``;
    row ``r`` uses ``noises[r]``.  With ``with_final`` the per-mode terminal
    differences ``u^mu(T) - u(T)`` of shape ``(R, len(mu_list), K)`` are also
    returned.  The joint per-step Gaussian of all stochastic
    convolutions is sampled exactly, which is what couples the runs.
    """
    mu_list = list(mu_list)
    k = config.n_modes
    r = len(noises)
    heat = Stepper(config, None, grid.dt, B)
    waves = [Stepper(config, mu, grid.dt, B) for mu in mu_list]
    m = 1 + 2 * len(mu_list)
    factor = _factor(noise_covariance(config, grid.dt, mu_list, heat=True)) if eps > 0 else None
    uh = np.broadcast_to(np.asarray(u0, float), (r, k)).copy()
    uw = [uh.copy() for _ in mu_list]
    vw = [np.broadcast_to(np.asarray(v0, float), (r, k)).copy() for _ in mu_list]
    sup = np.zeros((r, len(mu_list)))
    se = math.sqrt(eps)
    chunk = 512
    for start in range(0, grid.n_steps, chunk):
        c = min(chunk, grid.n_steps - start)
        if eps > 0:
            z = np.stack([p.normals(start, c, k * m) for p in noises], axis=1).reshape(c, r, k, m)
            inc = se * np.einsum("kab,nrkb->nrka", factor, z)
        for j in range(c):
            uh, _ = heat.step(uh, None)
            if eps > 0:
                uh = uh + inc[j, :, :, 0]
            for w, st in enumerate(waves):
                uw[w], vw[w] = st.step(uw[w], vw[w])
                if eps > 0:
                    uw[w] = uw[w] + inc[j, :, :, 1 + 2 * w]
                    vw[w] = vw[w] + inc[j, :, :, 2 + 2 * w]
                sup[:, w] = np.maximum(sup[:, w], np.linalg.norm(uw[w] - uh, axis=-1))
        _guard(uh)
    if with_final:
        return sup, np.stack([w - uh for w in uw], axis=1)
    return sup


def simulate_ensemble(config: SpectralConfig, u0, v0, mu: Optional[float], eps: float,
                      B: Nonlinearity, grid: TimeGrid, noises: Sequence[NoisePlan]):
    """Advance one replica per noise plan and return the terminal states.

    Returns ``u`` (heat) or ``(u, v)`` (wave, ``v0`` required), each of shape
    ``(len(noises), K)``.  Replica ``r`` matches a single-path run with ``noises[r]``.
    """
    st = Stepper(config, mu, grid.dt, B)
    r, k = len(noises), config.n_modes
    u = np.broadcast_to(np.asarray(u0, float), (r, k)).copy()
    v = np.broadcast_to(np.asarray(v0, float), (r, k)).copy() if st.is_wave else None
    slots = k * st.n_lanes
    chunk = 1024
    for start in range(0, grid.n_steps, chunk):
        c = min(chunk, grid.n_steps - start)
        z = np.stack([p.normals(start, c, slots) for p in noises], axis=1) if eps > 0 else None
        for j in range(c):
            u, v = st.step(u, v, normals=None if z is None else z[j], eps=eps)
        _guard(u)
    return u if v is None else (u, v)
