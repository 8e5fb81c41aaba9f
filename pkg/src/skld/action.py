"""Action functionals on discrete paths, minimum control energies, mollification.

Derivatives along a path use second-order central differences in the interior and
second-order one-sided stencils at the two ends; integrals use the trapezoidal rule.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass
from functools import cached_property
from typing import Optional

import numpy as np
from scipy import integrate

from .dynamics import Control, Path
from .spectral import (Nonlinearity, PhasePoint, SpectralConfig, apply_nonlinearity,
                       mode_propagator)

__all__ = [
    "ActionReport",
    "MollifierSpec",
    "IllConditionedWarning",
    "time_derivative",
    "second_derivative",
    "control_from_path",
    "action_heat",
    "action_wave",
    "linear_min_energy_infinite",
    "linear_min_energy_finite",
    "linear_min_energy_heat",
    "mollify",
    "l2_in_time",
]


class IllConditionedWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ActionReport:
    value: float
    heat_part: float
    remainder: float
    residual_norm: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def time_derivative(y: np.ndarray, dt: float) -> np.ndarray:
    """Second-order first derivative along axis 0."""
    if y.shape[0] < 3:
        raise ValueError("need at least 3 nodes")
    d = np.empty_like(y)
    d[1:-1] = (y[2:] - y[:-2]) / (2 * dt)
    d[0] = (-3 * y[0] + 4 * y[1] - y[2]) / (2 * dt)
    d[-1] = (3 * y[-1] - 4 * y[-2] + y[-3]) / (2 * dt)
    return d


def second_derivative(y: np.ndarray, dt: float) -> np.ndarray:
    """Second-order second derivative along axis 0 (needs 4 nodes for the end stencils)."""
    n = y.shape[0]
    if n < 3:
        raise ValueError("need at least 3 nodes")
    d = np.empty_like(y)
    d[1:-1] = (y[2:] - 2 * y[1:-1] + y[:-2]) / dt ** 2
    if n >= 4:
        d[0] = (2 * y[0] - 5 * y[1] + 4 * y[2] - y[3]) / dt ** 2
        d[-1] = (2 * y[-1] - 5 * y[-2] + 4 * y[-3] - y[-4]) / dt ** 2
    else:
        d[0] = d[1]
        d[-1] = d[1]
    return d


def l2_in_time(values: np.ndarray, dt: float) -> float:
    """``int |values(t)|^2 dt`` (trapezoid), summing over the mode axis."""
    return float(np.trapezoid(np.sum(values ** 2, axis=-1), dx=dt))


def _check_lam(config):
    lam = config.lam
    if np.min(lam) < 1e-150:
        warnings.warn("noise eigenvalues underflow; Q^-1 is ill-conditioned", IllConditionedWarning,
                      stacklevel=3)
    return lam


def _heat_residual(config, phi, dphi, B):
    # phi' - A phi - B(phi), with A = -alpha
    return dphi + config.alpha * phi - apply_nonlinearity(B, phi, config)


def control_from_path(config: SpectralConfig, phi: Path, mu: Optional[float], B: Nonlinearity) -> Control:
    """Cheapest control realizing ``phi``: ``Q^-1(mu phi'' + phi' - A phi - B(phi))``.

    ``mu=None`` gives the heat-equation control (no second-derivative term).
    """
    lam = _check_lam(config)
    dt = phi.grid.dt
    u = phi.u
    r = _heat_residual(config, u, time_derivative(u, dt), B)
    if mu is not None:
        r = r + mu * second_derivative(u, dt)
    with np.errstate(divide="ignore", invalid="ignore"):
        return Control(phi.grid, r / lam)


def action_heat(config: SpectralConfig, phi: Path, B: Nonlinearity) -> ActionReport:
    """``1/2 int |Q^-1(phi' - A phi - B(phi))|^2``."""
    val = control_from_path(config, phi, None, B).energy()
    return ActionReport(val, val, 0.0, 0.0)


def action_wave(config: SpectralConfig, z: Path, mu: float, B: Nonlinearity) -> ActionReport:
    """Wave action of ``z = (phi, phi')`` together with its heat part and remainder.

    ``remainder = mu^2/2 int |Q^-1 phi''|^2 + mu int <Q^-1 phi'', Q^-1(phi' - A phi - B(phi))>``
    is evaluated term by term; ``residual_norm`` is ``|value - heat_part - remainder|``.
    """
    if not mu > 0:
        raise ValueError("mu must be positive")
    lam = _check_lam(config)
    dt = z.grid.dt
    u = z.u
    heat_ctrl = _heat_residual(config, u, time_derivative(u, dt), B) / lam
    acc = second_derivative(u, dt) / lam
    value = 0.5 * l2_in_time(heat_ctrl + mu * acc, dt)
    heat_part = 0.5 * l2_in_time(heat_ctrl, dt)
    cross = float(np.trapezoid(np.sum(acc * heat_ctrl, axis=-1), dx=dt))
    remainder = 0.5 * mu ** 2 * l2_in_time(acc, dt) + mu * cross
    return ActionReport(value, heat_part, remainder, abs(value - heat_part - remainder))


# ---------------------------------------------------------------------------
# minimum energies of the linear system


def linear_min_energy_infinite(config: SpectralConfig, z: PhasePoint, mu: float) -> float:
    """``|(-A)^{1/2} Q^-1 u|^2 + mu |Q^-1 v|^2``: cheapest arrival at ``z`` from rest at ``-inf``."""
    if not mu > 0:
        raise ValueError("mu must be positive")
    lam2 = config.lam ** 2
    u, v = np.asarray(z[0], float), np.asarray(z[1], float)
    return float(np.sum(config.alpha * u * u / lam2) + mu * np.sum(v * v / lam2))


def controllability_gramian(config: SpectralConfig, mu: float, horizon: float) -> np.ndarray:
    """Per-mode ``C - S(T) C S(T)^T`` in ``(u, v)`` coordinates, shape ``(K, 2, 2)``.

    ``C = diag(lam^2 / (2 alpha), lam^2 / (2 mu))`` is the infinite-horizon Gramian.
    """
    lam2 = config.lam ** 2
    c_inf = np.zeros((config.n_modes, 2, 2))
    c_inf[:, 0, 0] = lam2 / (2 * config.alpha)
    c_inf[:, 1, 1] = lam2 / (2 * mu)
    s = mode_propagator(config.alpha, mu, horizon).matrices
    return c_inf - s @ c_inf @ np.swapaxes(s, -1, -2)


def linear_min_energy_finite(config: SpectralConfig, z: PhasePoint, mu: float, horizon: float) -> float:
    """Half the squared norm of the minimum-norm control steering 0 to ``z`` in time ``horizon``."""
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    g = controllability_gramian(config, mu, horizon)
    eig_min = float(np.min(np.linalg.eigvalsh(g)))
    if horizon * eig_min < 1e-12:
        warnings.warn(f"Gramian nearly singular (T*lambda_min = {horizon * eig_min:.3g})",
                      IllConditionedWarning, stacklevel=2)
    zz = np.stack([np.asarray(z[0], float), np.asarray(z[1], float)], axis=-1)
    sol = np.linalg.solve(g, zz[..., None])[..., 0]
    return float(0.5 * np.sum(zz * sol))


def linear_min_energy_heat(config: SpectralConfig, x, horizon: float = math.inf) -> float:
    """Heat analogue: ``sum alpha x^2 / (lam^2 (1 - exp(-2 alpha T)))``."""
    x = np.asarray(x, float)
    denom = -np.expm1(-2 * config.alpha * horizon) if math.isfinite(horizon) else 1.0
    return float(np.sum(config.alpha * x * x / (config.lam ** 2 * denom)))


# ---------------------------------------------------------------------------
# mollifier


def _bump(t):
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    inside = (t > 0) & (t < 2)
    s = t[inside] - 1.0
    out[inside] = np.exp(-1.0 / (1.0 - s * s))
    return out


@dataclass(frozen=True)
class MollifierSpec:
    """``rho_mu(t) = mu^-a rho(t / mu^a)`` with ``rho`` the normalized bump on ``(0, 2)``."""

    alpha_exponent: float = 0.5

    def __post_init__(self):
        if not 0 < self.alpha_exponent < 1:
            raise ValueError("alpha_exponent must lie in (0, 1)")

    @cached_property
    def _mass(self) -> float:
        val, _ = integrate.quad(lambda t: float(_bump(np.array([t]))[0]), 0.0, 2.0,
                                epsabs=0.0, epsrel=1e-13, limit=200)
        return val

    def rho(self, t):
        return _bump(t) / self._mass

    def rho_mu(self, t, mu: float):
        w = mu ** self.alpha_exponent
        return self.rho(np.asarray(t) / w) / w

    def width(self, mu: float) -> float:
        return 2.0 * mu ** self.alpha_exponent

    def first_moment(self) -> float:
        val, _ = integrate.quad(lambda t: t * float(self.rho(np.array([t]))[0]), 0.0, 2.0,
                                epsabs=0.0, epsrel=1e-13)
        return val


def _simpson_nodes(width, n):
    n = n + (n % 2 == 0)
    tau = np.linspace(0.0, width, n)
    w = np.ones(n)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return tau, w * (width / (n - 1)) / 3.0


def mollify(phi: Path, spec: MollifierSpec, mu: float, n_quad: int = 401) -> Path:
    """Causal convolution ``phi_mu(t) = int rho_mu(tau) phi(t - tau) dtau`` on the path grid.

    Values before the first node are frozen at ``phi(t_start)``; points between nodes
    are linearly interpolated.
    """
    width = spec.width(mu)
    span = phi.grid.t_end - phi.grid.t_start
    if width / 2 >= span / 2:
        warnings.warn("mollifier support exceeds the available path history", RuntimeWarning, stacklevel=2)
    tau, w = _simpson_nodes(width, n_quad)
    weights = w * spec.rho_mu(tau, mu)
    weights = weights / weights.sum()
    t = phi.grid.times
    # accumulate increments so that constant paths are reproduced bit for bit
    inc = np.zeros_like(phi.u)
    for tj, wj in zip(tau, weights):
        if wj == 0.0:
            continue
        shifted = t - tj
        for k in range(phi.u.shape[1]):
            inc[:, k] += wj * (np.interp(shifted, t, phi.u[:, k]) - phi.u[:, k])
    return Path(phi.grid, phi.u + inc)
