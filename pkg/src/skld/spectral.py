"""Truncated sine basis on an interval, Sobolev norms and per-mode propagators.

Everything lives in coefficient space: a field ``x = sum_k x_k e_k`` with
``e_k(xi) = sqrt(2/L) sin(k pi xi / L)`` is stored as an array whose last axis
has length ``K``.  Leading axes are batch axes (time nodes, replicas), so the
functions here broadcast over them.

The damped wave operator acts on each mode through the 2x2 system

    u' = v,    mu v' = -alpha_k u - v + forcing,

whose flow over a time ``t`` is evaluated in closed form.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, NamedTuple, Optional

import numpy as np

__all__ = [
    "SpectralConfig",
    "PhasePoint",
    "Nonlinearity",
    "GradientPotential",
    "ModePropagator",
    "HypothesisReport",
    "HypothesisWarning",
    "build_config",
    "sobolev_norm",
    "phase_norm",
    "scale_phase",
    "mode_propagator",
    "wave_propagate",
    "heat_propagate",
    "apply_nonlinearity",
    "nonlinearity_jvp",
    "lipschitz_spot_check",
    "check_hypotheses",
    "measured_decay",
    "basis_vector",
]

CRITICAL_TOL = 1e-9


class HypothesisWarning(UserWarning):
    """Raised (as a warning) when a declared structural constant looks wrong."""


@dataclass(frozen=True)
class SpectralConfig:
    """Dirichlet Laplacian on ``(0, L)`` truncated to ``K`` modes plus a diagonal noise.

    ``alpha[k-1] = (k pi / L)^2`` and ``lam[k-1] = noise_scale * alpha^-beta``.
    """

    length: float
    n_modes: int
    beta: float = 0.0
    noise_scale: float = 1.0
    space_dim: int = 1

    def __post_init__(self):
        if not self.length > 0:
            raise ValueError(f"domain length must be positive, got {self.length}")
        if int(self.n_modes) != self.n_modes or self.n_modes < 1:
            raise ValueError(f"mode cutoff K must be a positive integer, got {self.n_modes}")
        if not self.noise_scale > 0:
            raise ValueError(f"noise_scale must be positive, got {self.noise_scale}")
        if self.space_dim < 1:
            raise ValueError(f"space_dim must be >= 1, got {self.space_dim}")

    @cached_property
    def alpha(self) -> np.ndarray:
        k = np.arange(1, self.n_modes + 1, dtype=float)
        return (k * np.pi / self.length) ** 2

    @cached_property
    def lam(self) -> np.ndarray:
        return self.noise_scale * self.alpha ** (-self.beta)

    @property
    def admissible(self) -> bool:
        return self.beta > (self.space_dim - 2) / 4

    @cached_property
    def _collocation(self):
        # 2(K+1) equispaced intervals, interior nodes only (Dirichlet).
        n = 2 * (self.n_modes + 1)
        xi = self.length * np.arange(1, n) / n
        k = np.arange(1, self.n_modes + 1)
        basis = math.sqrt(2.0 / self.length) * np.sin(np.pi * np.outer(xi, k) / self.length)
        return xi, basis, self.length / n

    def collocation(self, n_points: Optional[int] = None):
        """Return ``(xi, E, w)`` with ``E[j, k] = e_k(xi_j)`` and quadrature weight ``w``.

        ``E.T @ (w * values)`` projects point values back onto the modes and is the
        exact inverse of ``E @ coeffs`` for the retained modes.
        """
        if n_points is None:
            return self._collocation
        n = int(n_points) + 1
        if n - 1 < self.n_modes:
            raise ValueError("need at least K collocation points")
        xi = self.length * np.arange(1, n) / n
        k = np.arange(1, self.n_modes + 1)
        basis = math.sqrt(2.0 / self.length) * np.sin(np.pi * np.outer(xi, k) / self.length)
        return xi, basis, self.length / n

    def to_dict(self) -> dict:
        return {
            "length": self.length,
            "n_modes": self.n_modes,
            "beta": self.beta,
            "noise_scale": self.noise_scale,
            "space_dim": self.space_dim,
        }


def build_config(length=math.pi, n_modes=8, beta=0.0, noise_scale=1.0, space_dim=1) -> SpectralConfig:
    return SpectralConfig(float(length), int(n_modes), float(beta), float(noise_scale), int(space_dim))


def basis_vector(config: SpectralConfig, k: int, scale: float = 1.0) -> np.ndarray:
    """Coefficient vector of ``scale * e_k`` (``k`` is 1-based)."""
    x = np.zeros(config.n_modes)
    x[k - 1] = scale
    return x


class PhasePoint(NamedTuple):
    """Position/velocity pair ``z = (u, v)`` in coefficient form."""

    u: np.ndarray
    v: np.ndarray


def sobolev_norm(x, delta: float, config: SpectralConfig):
    """``|x|_{H^delta} = sqrt(sum_k alpha_k^delta x_k^2)``, reduced over the last axis."""
    x = np.asarray(x, dtype=float)
    return np.sqrt(np.sum(config.alpha ** delta * x * x, axis=-1))


def phase_norm(z: PhasePoint, delta: float, config: SpectralConfig):
    """Norm in ``H^delta x H^(delta-1)``."""
    return np.sqrt(sobolev_norm(z.u, delta, config) ** 2 + sobolev_norm(z.v, delta - 1, config) ** 2)


def scale_phase(z: PhasePoint, mu: float, inverse: bool = False) -> PhasePoint:
    """The map ``(u, v) -> (u, sqrt(mu) v)`` (or its inverse)."""
    if mu <= 0:
        raise ValueError("mu must be positive")
    s = 1.0 / math.sqrt(mu) if inverse else math.sqrt(mu)
    return PhasePoint(np.asarray(z.u), s * np.asarray(z.v))


# ---------------------------------------------------------------------------
# per-mode propagators


@dataclass(frozen=True)
class ModePropagator:
    """Flow of ``mu q'' + q' + alpha q = 0`` over a step ``t`` for every mode.

    ``matrices[k]`` maps ``(q, q')`` at time 0 to time ``t``; ``branch[k]`` is one of
    ``"overdamped"``, ``"critical"``, ``"underdamped"``.
    """

    mu: float
    t: float
    alpha: np.ndarray
    matrices: np.ndarray
    branch: tuple

    def apply(self, u, v):
        m = self.matrices
        return (m[:, 0, 0] * u + m[:, 0, 1] * v, m[:, 1, 0] * u + m[:, 1, 1] * v)


def _critical_series(kappa_t2, t, terms=8):
    # ch = sum (k t^2)^n / (2n)!,  sh = t * sum (k t^2)^n / (2n+1)!
    ch = np.zeros_like(kappa_t2)
    sh = np.zeros_like(kappa_t2)
    term_c = np.ones_like(kappa_t2)
    term_s = np.ones_like(kappa_t2)
    for n in range(terms):
        ch += term_c
        sh += term_s
        term_c = term_c * kappa_t2 / ((2 * n + 1) * (2 * n + 2))
        term_s = term_s * kappa_t2 / ((2 * n + 2) * (2 * n + 3))
    return ch, t * sh


def _propagator_terms(alpha, mu, t):
    """Return ``(e^{-at} ch, e^{-at} sh, branch)`` with ``e^{Mt} = e^{-at}(ch I + sh (M + aI))``."""
    alpha = np.asarray(alpha, dtype=float)
    a = 1.0 / (2.0 * mu)
    disc = 1.0 - 4.0 * mu * alpha
    ech = np.empty_like(alpha)
    esh = np.empty_like(alpha)
    branch = np.empty(alpha.shape, dtype=object)

    crit = np.abs(disc) < CRITICAL_TOL
    over = (disc > 0) & ~crit
    under = (disc < 0) & ~crit

    if np.any(over):
        sq = np.sqrt(disc[over])
        c = sq / (2.0 * mu)
        # slow root computed without cancellation
        r_slow = -2.0 * alpha[over] / (1.0 + sq)
        r_fast = -(1.0 + sq) / (2.0 * mu)
        e_slow = np.exp(r_slow * t)
        e_fast = np.exp(r_fast * t)
        ech[over] = 0.5 * (e_slow + e_fast)
        x = 2.0 * c * t
        small = x < 1.0
        # expm1 form only where the two exponentials nearly cancel
        esh[over] = np.where(small, e_fast * np.expm1(np.where(small, x, 0.0)), e_slow - e_fast) / (2.0 * c)
        branch[over] = "overdamped"
    if np.any(under):
        c = np.sqrt(-disc[under]) / (2.0 * mu)
        damp = math.exp(-a * t)
        ech[under] = damp * np.cos(c * t)
        esh[under] = damp * np.sin(c * t) / c
        branch[under] = "underdamped"
    if np.any(crit):
        kappa = disc[crit] / (4.0 * mu * mu)
        ch, sh = _critical_series(kappa * t * t, t)
        damp = math.exp(-a * t)
        ech[crit] = damp * ch
        esh[crit] = damp * sh
        branch[crit] = "critical"
    return ech, esh, branch


def mode_propagator(alpha, mu: float, t: float) -> ModePropagator:
    """Closed-form ``exp(t [[0, 1], [-alpha/mu, -1/mu]])`` for each ``alpha``."""
    if not mu > 0:
        raise ValueError(f"mu must be positive, got {mu}")
    if t < 0:
        raise ValueError(f"t must be nonnegative, got {t}")
    alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
    a = 1.0 / (2.0 * mu)
    ech, esh, branch = _propagator_terms(alpha, mu, t)
    m = np.empty(alpha.shape + (2, 2))
    m[..., 0, 0] = ech + a * esh
    m[..., 0, 1] = esh
    m[..., 1, 0] = -(alpha / mu) * esh
    m[..., 1, 1] = ech - a * esh
    return ModePropagator(mu, t, alpha, m, tuple(branch.tolist()))


def wave_propagate(z: PhasePoint, mu: float, t: float, config: SpectralConfig) -> PhasePoint:
    """Apply the free damped-wave semigroup ``S_mu(t)`` mode by mode."""
    prop = mode_propagator(config.alpha, mu, t)
    u, v = prop.apply(np.asarray(z.u, dtype=float), np.asarray(z.v, dtype=float))
    return PhasePoint(u, v)


def heat_propagate(x, t: float, config: SpectralConfig) -> np.ndarray:
    if t < 0:
        raise ValueError("t must be nonnegative")
    return np.exp(-config.alpha * t) * np.asarray(x, dtype=float)


def measured_decay(config: SpectralConfig, mu: float, t_max: float = 20.0, n: int = 400):
    """Fit ``|S_mu(t)|_{L(H)} ~ M exp(-omega t)`` from the per-mode operator norms.

    Returns ``(M, omega)``.  Diagnostics only: the fitted ``omega`` is the slope of the
    log-norm over the second half of ``[0, t_max]`` and ``M`` the smallest prefactor
    consistent with every sampled time.
    """
    ts = np.linspace(0.0, t_max, n)
    # H x H^{-1} weighting per mode: diag(1, 1/alpha)
    w = np.sqrt(config.alpha)
    norms = np.empty(n)
    for i, t in enumerate(ts):
        m = mode_propagator(config.alpha, mu, t).matrices.copy()
        m[:, 0, 1] *= w
        m[:, 1, 0] /= w
        norms[i] = np.max(np.linalg.norm(m, ord=2, axis=(1, 2)))
    half = ts >= 0.5 * t_max
    slope = np.polyfit(ts[half], np.log(norms[half]), 1)[0]
    omega = -slope
    big_m = float(np.max(norms * np.exp(omega * ts)))
    return big_m, float(omega)


# ---------------------------------------------------------------------------
# nonlinearity


@dataclass(frozen=True)
class Nonlinearity:
    """Reaction term ``B: H -> H`` with a declared Lipschitz constant ``lipschitz``.

    Build with :meth:`zero`, :meth:`linear`, :meth:`nemytskii` or :meth:`sum`.
    For the Nemytskii kind ``b(xi, sigma)`` acts pointwise on collocation values and
    must be vectorized; ``db`` is its sigma-derivative (finite differences if omitted).
    """

    kind: str
    rate: object = 0.0
    b: Optional[Callable] = None
    db: Optional[Callable] = None
    lipschitz: float = 0.0
    parts: tuple = ()
    collocation_points: Optional[int] = None
    label: str = ""

    @classmethod
    def zero(cls) -> "Nonlinearity":
        return cls("zero", label="zero")

    @classmethod
    def linear(cls, rate, label: str = "") -> "Nonlinearity":
        """``B(x) = -rate * x`` (scalar or per-mode rate)."""
        r = np.asarray(rate, dtype=float)
        return cls("linear", rate=rate, lipschitz=float(np.max(np.abs(r))), label=label or "linear")

    @classmethod
    def nemytskii(cls, b, lipschitz, db=None, collocation_points=None, label: str = "") -> "Nonlinearity":
        return cls("nemytskii", b=b, db=db, lipschitz=float(lipschitz),
                   collocation_points=collocation_points, label=label or "nemytskii")

    @classmethod
    def sum(cls, *parts: "Nonlinearity") -> "Nonlinearity":
        return cls("sum", parts=tuple(parts), lipschitz=float(sum(p.lipschitz for p in parts)),
                   label="+".join(p.label for p in parts))

    @property
    def is_zero(self) -> bool:
        if self.kind == "zero":
            return True
        if self.kind == "sum":
            return all(p.is_zero for p in self.parts)
        return False


def _pointwise(B: Nonlinearity, x, config):
    xi, basis, w = config.collocation(B.collocation_points)
    vals = x @ basis.T
    return xi, basis, w, vals


def apply_nonlinearity(B: Nonlinearity, x, config: SpectralConfig, check: bool = False):
    """Evaluate ``B(x)`` on coefficient arrays of shape ``(..., K)``."""
    x = np.asarray(x, dtype=float)
    if B.kind == "zero":
        out = np.zeros_like(x)
    elif B.kind == "linear":
        out = -np.asarray(B.rate, dtype=float) * x
    elif B.kind == "nemytskii":
        xi, basis, w, vals = _pointwise(B, x, config)
        out = (w * B.b(xi, vals)) @ basis
    elif B.kind == "sum":
        out = sum(apply_nonlinearity(p, x, config) for p in B.parts)
    else:
        raise ValueError(f"unknown nonlinearity kind {B.kind!r}")
    if check:
        lipschitz_spot_check(B, config, n_pairs=16, seed=0)
    return out


def _db(B: Nonlinearity, xi, vals):
    if B.db is not None:
        return B.db(xi, vals)
    h = 1e-6 * np.maximum(1.0, np.abs(vals))
    return (B.b(xi, vals + h) - B.b(xi, vals - h)) / (2 * h)


def nonlinearity_jvp(B: Nonlinearity, x, h, config: SpectralConfig):
    """Directional derivative ``DB(x) h``; the Jacobian is symmetric for every kind here."""
    x = np.asarray(x, dtype=float)
    h = np.asarray(h, dtype=float)
    if B.kind == "zero":
        return np.zeros_like(h)
    if B.kind == "linear":
        return -np.asarray(B.rate, dtype=float) * h
    if B.kind == "nemytskii":
        xi, basis, w, vals = _pointwise(B, x, config)
        return (w * _db(B, xi, vals) * (h @ basis.T)) @ basis
    if B.kind == "sum":
        return sum(nonlinearity_jvp(p, x, h, config) for p in B.parts)
    raise ValueError(f"unknown nonlinearity kind {B.kind!r}")


def lipschitz_spot_check(B: Nonlinearity, config: SpectralConfig, n_pairs: int = 64,
                         seed: int = 0, scale: float = 2.0, warn: bool = True) -> float:
    """Largest observed ``|B(x)-B(y)|_H / |x-y|_H`` (and pointwise slope for Nemytskii).

    Emits :class:`HypothesisWarning` when it exceeds the declared constant by > 10%.
    """
    rng = np.random.default_rng(seed)
    k = config.n_modes
    x = rng.normal(scale=scale, size=(n_pairs, k))
    y = x + rng.normal(scale=scale * 0.3, size=(n_pairs, k))
    num = np.linalg.norm(apply_nonlinearity(B, x, config) - apply_nonlinearity(B, y, config), axis=-1)
    den = np.linalg.norm(x - y, axis=-1)
    ratio = float(np.max(num / den))

    def pointwise(part):
        xi, _, _ = config.collocation(part.collocation_points)
        s1 = rng.normal(scale=scale, size=(n_pairs, xi.size))
        s2 = s1 + rng.normal(scale=0.5, size=s1.shape)
        return float(np.max(np.abs(part.b(xi, s1) - part.b(xi, s2)) / np.abs(s1 - s2)))

    if B.kind == "nemytskii":
        ratio = max(ratio, pointwise(B))
    if warn and ratio > 1.1 * B.lipschitz + 1e-12:
        warnings.warn(f"observed Lipschitz ratio {ratio:.4g} exceeds declared {B.lipschitz:.4g}",
                      HypothesisWarning, stacklevel=2)
    return ratio


@dataclass(frozen=True)
class HypothesisReport:
    beta_ok: bool
    lipschitz_ok: bool
    zero_at_origin: bool
    mu_threshold: float
    mu_ok: Optional[bool]

    @property
    def admissible(self) -> bool:
        return self.beta_ok and self.lipschitz_ok and self.zero_at_origin and self.mu_ok is not False


def check_hypotheses(config: SpectralConfig, B: Nonlinearity, mu: Optional[float] = None) -> HypothesisReport:
    """Admissibility of ``(config, B, mu)``; the small-mass threshold is ``(alpha_1 - g0) / g0^2``."""
    g0 = B.lipschitz
    a1 = float(config.alpha[0])
    threshold = math.inf if g0 == 0 else (a1 - g0) / g0 ** 2
    zero = bool(np.allclose(apply_nonlinearity(B, np.zeros(config.n_modes), config), 0.0, atol=1e-14))
    mu_ok = None if mu is None else bool(mu < threshold)
    return HypothesisReport(config.admissible, g0 < a1, zero, threshold, mu_ok)


# ---------------------------------------------------------------------------
# gradient systems


@dataclass(frozen=True)
class GradientPotential:
    """Potential ``F`` with ``B = -Q^2 DF``; ``grad`` returns ``DF`` in coefficients."""

    value: Callable
    grad: Callable
    certified: bool = False
    label: str = ""

    @classmethod
    def zero(cls) -> "GradientPotential":
        return cls(lambda x: np.zeros(np.shape(x)[:-1]), lambda x: np.zeros_like(np.asarray(x, float)),
                   label="zero")

    @classmethod
    def linear(cls, config: SpectralConfig, rate) -> "GradientPotential":
        """Potential of ``B = -rate x``: ``F(x) = sum rate_k x_k^2 / (2 lam_k^2)``."""
        r = np.broadcast_to(np.asarray(rate, float), (config.n_modes,))
        lam2 = config.lam ** 2
        return cls(lambda x: 0.5 * np.sum(r * np.asarray(x) ** 2 / lam2, axis=-1),
                   lambda x: r * np.asarray(x) / lam2, label="linear")

    @classmethod
    def nemytskii(cls, config: SpectralConfig, primitive, b, collocation_points=None) -> "GradientPotential":
        """``F(x) = int G(xi, x(xi)) dxi / lam^2`` for ``Q = lam I`` with ``dG/dsigma = -b``.

        Only meaningful when the noise is a constant multiple of the identity.
        """
        if not np.allclose(config.lam, config.lam[0]):
            raise ValueError("a Nemytskii nonlinearity is a gradient only for Q proportional to I")
        xi, basis, w = config.collocation(collocation_points)
        lam2 = float(config.lam[0] ** 2)

        def value(x):
            return np.sum(w * primitive(xi, np.asarray(x) @ basis.T), axis=-1) / lam2

        def grad(x):
            return -(w * b(xi, np.asarray(x) @ basis.T)) @ basis / lam2

        return cls(value, grad, label="nemytskii")

    def certify(self, B: Nonlinearity, config: SpectralConfig, n_fields: int = 8, seed: int = 0,
                tol: float = 1e-8, fd_tol: float = 1e-6) -> "GradientPotential":
        """Check ``B = -Q^2 DF`` and ``DF`` against central differences; return a certified copy."""
        rng = np.random.default_rng(seed)
        lam2 = config.lam ** 2
        for _ in range(n_fields):
            x = rng.normal(size=config.n_modes)
            bx = apply_nonlinearity(B, x, config)
            recon = -lam2 * self.grad(x)
            if np.linalg.norm(recon - bx) > tol * max(1.0, np.linalg.norm(bx)):
                raise ValueError("B does not equal -Q^2 DF on a random field")
            g = np.asarray(self.grad(x))
            h = 1e-5
            fd = np.array([(self.value(x + h * e) - self.value(x - h * e)) / (2 * h) for e in np.eye(x.size)])
            if np.linalg.norm(fd - g) > fd_tol * max(1.0, np.linalg.norm(g)):
                raise ValueError("DF disagrees with finite differences of F")
        return GradientPotential(self.value, self.grad, True, self.label)
