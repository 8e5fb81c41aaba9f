"""Monte Carlo exit times and exit places for the heat and wave systems.

Replicas are stepped together as a batch, each with its own counter-based noise
stream, so a replica's trajectory does not depend on which batch or thread ran it.
Exit is detected on the position component only; the crossing time is refined by
linear interpolation of the boundary distance between the bracketing steps.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate, special

from .dynamics import Stepper
from .noise import NoisePlan
from .spectral import Nonlinearity, PhasePoint, SpectralConfig

__all__ = [
    "ExitDomain",
    "ExitProblem",
    "ExitRecord",
    "ExitStats",
    "CensoringError",
    "run_exit",
    "run_exit_batch",
    "run_replicas",
    "direction_histogram",
    "estimate_exit_scaling",
    "exit_place_histogram",
    "PlaceReport",
    "ou_mean_exit_time",
    "records_to_csv",
]


class CensoringError(RuntimeError):
    """Too many replicas hit the step budget to summarize honestly."""

    def __init__(self, message: str, censored_fraction: float):
        super().__init__(message)
        self.censored_fraction = censored_fraction


@dataclass(frozen=True)
class ExitDomain:
    """``ball``: ``|u|_H < radius``; ``halfspace``: ``u_mode < level`` (1-based mode)."""

    kind: str
    radius: float = 1.0
    mode: int = 1
    level: float = 1.0

    def __post_init__(self):
        if self.kind == "ball":
            if not self.radius > 0:
                raise ValueError("ball radius must be positive")
        elif self.kind == "halfspace":
            if not self.level > 0:
                raise ValueError("halfspace level must be positive so that 0 is inside")
            if self.mode < 1:
                raise ValueError("mode index is 1-based")
        else:
            raise ValueError(f"unknown domain kind {self.kind!r}")

    @classmethod
    def ball(cls, radius: float) -> "ExitDomain":
        return cls("ball", radius=radius)

    @classmethod
    def halfspace(cls, mode: int, level: float) -> "ExitDomain":
        return cls("halfspace", mode=mode, level=level)

    def boundary_distance(self, u):
        """Signed distance to the boundary, negative inside; vectorized over leading axes."""
        u = np.asarray(u, float)
        if self.kind == "ball":
            return np.linalg.norm(u, axis=-1) - self.radius
        return u[..., self.mode - 1] - self.level

    def to_dict(self) -> dict:
        if self.kind == "ball":
            return {"kind": "ball", "radius": self.radius}
        return {"kind": "halfspace", "mode": self.mode, "level": self.level}


@dataclass(frozen=True)
class ExitRecord:
    replica: int
    tau: float
    exit_point: np.ndarray
    exit_velocity: Optional[np.ndarray]
    hit_max_steps: bool

    @property
    def censored(self) -> bool:
        return self.hit_max_steps


@dataclass
class ExitProblem:
    """Everything but ``eps`` and the replica ids that defines an exit experiment.

    ``z0`` defaults to rest at the origin; its components may also have shape
    ``(R, K)`` to give each of the ``R`` replicas of a batch its own start.
    """

    config: SpectralConfig
    domain: ExitDomain
    mu: Optional[float] = None
    B: Nonlinearity = field(default_factory=Nonlinearity.zero)
    z0: Optional[PhasePoint] = None
    dt: float = 1e-3
    max_steps: int = 10_000_000
    seed: int = 0
    target: Optional[float] = None

    def initial_state(self) -> PhasePoint:
        k = self.config.n_modes
        if self.z0 is None:
            return PhasePoint(np.zeros(k), np.zeros(k))
        u = np.asarray(self.z0[0], float)
        v = np.zeros_like(u) if self.z0[1] is None else np.asarray(self.z0[1], float)
        return PhasePoint(u, v)

    def flow_stays_inside(self, horizon: Optional[float] = None) -> bool:
        """Whether the noise-free flow from ``z0`` stays in the domain up to ``horizon``.

        A finite-time proxy for the requirement that the unperturbed orbit never
        leaves the domain.  The default horizon is ``20 / alpha_1`` (times ``1/mu``
        if that is longer).
        """
        if horizon is None:
            horizon = 20.0 / self.config.alpha[0] * max(1.0, 1.0 / (self.mu or 1.0))
        stepper = Stepper(self.config, self.mu, self.dt, self.B)
        z0 = self.initial_state()
        u, v = z0.u, z0.v if stepper.is_wave else None
        for _ in range(int(math.ceil(horizon / self.dt))):
            u, v = stepper.step(u, v)
            if np.any(self.domain.boundary_distance(u) >= 0):
                return False
        return True


def _noise_block(plans, start, n, slots):
    return np.stack([p.normals(start, n, slots) for p in plans], axis=1)


def run_exit_batch(problem: ExitProblem, eps: float, replicas: Sequence[int], chunk: int = 4096) -> list:
    """Exit records for the given replica ids, stepped together."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    cfg, G = problem.config, problem.domain
    z0 = problem.initial_state()
    if np.any(G.boundary_distance(z0.u) >= 0):
        raise ValueError("initial position must lie strictly inside the domain")
    replicas = [int(r) for r in replicas]
    r = len(replicas)
    stepper = Stepper(cfg, problem.mu, problem.dt, problem.B)
    plans = [NoisePlan(problem.seed, rid) for rid in replicas]
    slots = cfg.n_modes * stepper.n_lanes
    u = np.broadcast_to(z0.u, (r, cfg.n_modes)).copy()
    v = np.broadcast_to(z0.v, (r, cfg.n_modes)).copy() if stepper.is_wave else None
    d = G.boundary_distance(u)
    active = np.ones(r, bool)
    tau = np.full(r, problem.max_steps * problem.dt)
    point = np.zeros((r, cfg.n_modes))
    vel = np.zeros((r, cfg.n_modes)) if stepper.is_wave else None
    dt = problem.dt
    step = 0
    while step < problem.max_steps and active.any():
        m = min(chunk, problem.max_steps - step)
        z = _noise_block(plans, step, m, slots)
        for j in range(m):
            un, vn = stepper.step(u, v, normals=z[j], eps=eps)
            dn = G.boundary_distance(un)
            hit = active & (dn >= 0)
            if hit.any():
                theta = -d[hit] / (dn[hit] - d[hit])
                tau[hit] = (step + j + theta) * dt
                point[hit] = u[hit] + theta[:, None] * (un[hit] - u[hit])
                if vel is not None:
                    vel[hit] = v[hit] + theta[:, None] * (vn[hit] - v[hit])
                active &= ~hit
            u, v, d = un, vn, dn
            if not active.any():
                break
        step += m
    # censored replicas report their state at the end of the budget
    point[active] = u[active]
    if vel is not None:
        vel[active] = v[active]
    return [ExitRecord(rid, float(tau[i]), point[i].copy(), None if vel is None else vel[i].copy(),
                       bool(active[i])) for i, rid in enumerate(replicas)]


def run_exit(problem: ExitProblem, eps: float, replica: int = 0) -> ExitRecord:
    """Single-replica exit record (same stream as in a batch)."""
    return run_exit_batch(problem, eps, [replica])[0]


def _threads(threads: Optional[int]) -> int:
    if threads is not None:
        return max(1, int(threads))
    env = os.environ.get("SKLD_THREADS")
    return max(1, int(env)) if env else (os.cpu_count() or 1)


def run_replicas(problem: ExitProblem, eps: float, n_replicas: int, threads: Optional[int] = None,
                 batch: int = 100) -> list:
    """Records for replicas ``0..n_replicas-1`` fanned out over worker threads."""
    ids = list(range(n_replicas))
    batches = [ids[i:i + batch] for i in range(0, n_replicas, batch)]
    n = min(_threads(threads), len(batches)) or 1
    if n == 1:
        out = [run_exit_batch(problem, eps, b) for b in batches]
    else:
        with ThreadPoolExecutor(n) as pool:
            out = list(pool.map(lambda b: run_exit_batch(problem, eps, b), batches))
    return [rec for b in out for rec in b]


@dataclass
class ExitStats:
    eps: float
    replicas: int
    censored_fraction: float
    mean_tau: float
    median_tau: float
    eps_log_mean: float
    ci_low: float
    ci_high: float
    target: Optional[float] = None
    histogram: dict = field(default_factory=dict)

    @classmethod
    def from_records(cls, eps: float, records: Sequence[ExitRecord], n_boot: int = 2000, seed: int = 0,
                     target: Optional[float] = None, max_censored: float = 0.05) -> "ExitStats":
        taus = np.array([r.tau for r in records])
        cens = float(np.mean([r.censored for r in records])) if records else 0.0
        if cens > max_censored:
            raise CensoringError(f"{cens:.1%} of replicas censored at eps={eps}", cens)
        # censored replicas enter with their censoring time (a lower bound)
        mean = float(np.mean(taus))
        rng = np.random.default_rng(seed)
        boot = taus[rng.integers(0, taus.size, size=(n_boot, taus.size))].mean(axis=1)
        lo, hi = np.quantile(eps * np.log(boot), [0.025, 0.975])
        return cls(eps, len(records), cens, mean, float(np.median(taus)), eps * math.log(mean),
                   float(lo), float(hi), target, direction_histogram(records))

    def to_dict(self) -> dict:
        return {
            "eps": self.eps, "replicas": self.replicas, "censored_fraction": self.censored_fraction,
            "mean_tau": self.mean_tau, "median_tau": self.median_tau, "eps_log_mean": self.eps_log_mean,
            "ci": [self.ci_low, self.ci_high], "target": self.target, "histogram": self.histogram,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def direction_histogram(records: Sequence[ExitRecord], cap: float = 0.9) -> dict:
    """Counts of exit directions in the polar caps ``+-e_k`` (``|dir . e_k| > cap``)."""
    pts = np.array([r.exit_point for r in records if not r.censored])
    if pts.size == 0:
        return {}
    dirs = pts / np.linalg.norm(pts, axis=-1, keepdims=True)
    out = {}
    for k in range(dirs.shape[1]):
        out[f"+e{k + 1}"] = int(np.sum(dirs[:, k] > cap))
        out[f"-e{k + 1}"] = int(np.sum(dirs[:, k] < -cap))
    out["other"] = int(dirs.shape[0] - sum(out.values()))
    return out


def estimate_exit_scaling(problem: ExitProblem, eps_ladder: Sequence[float], replicas: int,
                          threads: Optional[int] = None, n_boot: int = 2000) -> list:
    """``eps log E tau`` with a bootstrap interval for each ``eps``.

    Raises :class:`CensoringError` when more than 5% of the replicas at some ``eps``
    exhaust the step budget.
    """
    if not problem.flow_stays_inside():
        warnings.warn("the noise-free flow leaves the domain; exit asymptotics do not apply",
                      RuntimeWarning, stacklevel=2)
    out = []
    for eps in eps_ladder:
        recs = run_replicas(problem, eps, replicas, threads)
        out.append(ExitStats.from_records(eps, recs, n_boot, problem.seed, problem.target))
    return out


@dataclass
class PlaceReport:
    eps: float
    histogram: dict
    fractions: dict
    n_exited: int
    prob_in_set: Optional[float] = None
    v_set: Optional[float] = None
    v_boundary: Optional[float] = None

    def to_dict(self) -> dict:
        return {"eps": self.eps, "histogram": self.histogram, "fractions": self.fractions,
                "n_exited": self.n_exited, "prob_in_set": self.prob_in_set,
                "v_set": self.v_set, "v_boundary": self.v_boundary}


def _sphere_samples(k: int, radius: float, n: int = 4000, seed: int = 0):
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(n, k))
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    axes = np.concatenate([np.eye(k), -np.eye(k)])
    return radius * np.concatenate([axes, d])


def exit_place_histogram(problem: ExitProblem, eps: float, replicas: int,
                         in_set: Optional[Callable] = None, potential: Optional[Callable] = None,
                         threads: Optional[int] = None, cap: float = 0.9) -> PlaceReport:
    """Exit-direction histogram and the empirical mass of a boundary subset ``N``.

    ``in_set`` maps exit points ``(n, K)`` to booleans; ``potential`` maps fields
    ``(n, K)`` to quasi-potential values and is minimized over samples of the sphere
    (ball domains) inside and outside ``N``.
    """
    recs = run_replicas(problem, eps, replicas, threads)
    hist = direction_histogram(recs, cap)
    n_exit = sum(not r.censored for r in recs)
    fr = {key: val / n_exit for key, val in hist.items()} if n_exit else {}
    rep = PlaceReport(eps, hist, fr, n_exit)
    pts = np.array([r.exit_point for r in recs if not r.censored])
    if in_set is not None and n_exit:
        rep.prob_in_set = float(np.mean(in_set(pts)))
    if potential is not None and problem.domain.kind == "ball":
        samples = _sphere_samples(problem.config.n_modes, problem.domain.radius)
        vals = np.asarray(potential(samples))
        rep.v_boundary = float(vals.min())
        if in_set is not None:
            mask = np.asarray(in_set(samples), bool)
            rep.v_set = float(vals[mask].min()) if mask.any() else math.inf
    return rep


def ou_mean_exit_time(alpha: float, lam: float, eps: float, radius: float, x0: float = 0.0) -> float:
    """Mean exit time of ``du = -alpha u dt + sqrt(eps) lam dw`` from ``(-radius, radius)``.

    ``E tau = (2/s) int_|x0|^r exp(c y^2) int_0^y exp(-c z^2) dz dy`` with ``s = eps lam^2``
    and ``c = alpha / s``.
    """
    s = eps * lam * lam
    c = alpha / s
    rc = math.sqrt(c)

    def inner(y):
        # exp(c y^2) int_0^y exp(-c z^2) dz, written with erf for accuracy
        return math.exp(c * y * y) * math.sqrt(math.pi) / (2 * rc) * special.erf(rc * y)

    val, _ = integrate.quad(inner, abs(x0), radius, epsabs=0.0, epsrel=1e-12, limit=200)
    return 2.0 / s * val


def records_to_csv(records: Sequence[ExitRecord], header_lines: Sequence[str] = ()) -> str:
    """CSV text: ``replica, tau, censored, u_1..u_K`` with ``#`` header comments."""
    buf = io.StringIO()
    for line in header_lines:
        buf.write(f"# {line}\n")
    k = records[0].exit_point.size if records else 0
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["replica", "tau", "censored"] + [f"u_{i + 1}" for i in range(k)])
    for r in records:
        w.writerow([r.replica, repr(r.tau), int(r.censored)] + [repr(float(x)) for x in r.exit_point])
    return buf.getvalue()
