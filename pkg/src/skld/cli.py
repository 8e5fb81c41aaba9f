"""Command line runner: ``skld run <config.json>``, ``skld verify``, ``skld emit-plots <dir>``.

A configuration is one JSON document naming one experiment.  It is validated
against :data:`CONFIG_SCHEMA` (unknown keys are rejected) before anything runs.
Every output file carries the SHA-256 of the canonical configuration and the
package version, and contains nothing run-dependent, so reruns are byte-identical.

Exit codes: 0 success, 1 invalid configuration, 2 solver non-convergence,
3 Monte Carlo budget exceeded, 4 a verification check failed.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import math
import sys
import time
import warnings
from pathlib import Path as FsPath
from typing import Optional

import jsonschema
import numpy as np

from . import __version__
from .action import action_heat, action_wave
from .dynamics import Path, TimeGrid, coupled_sk_run, simulate_heat, simulate_wave
from .exit import CensoringError, ExitDomain, ExitProblem, ExitStats, records_to_csv, run_replicas
from .noise import NoisePlan
from .quasipotential import MamProblem, mam_minimize, sk_limit_study
from .spectral import Nonlinearity, PhasePoint, build_config
from .verify import run_suite

log = logging.getLogger("skld")

EXIT_OK, EXIT_INVALID, EXIT_NONCONVERGED, EXIT_BUDGET, EXIT_CHECK_FAILED = 0, 1, 2, 3, 4

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_VEC = {"type": "array", "items": _NUM, "minItems": 1}
_FIELD = {"oneOf": [_VEC, {"type": "string", "pattern": "^e[1-9][0-9]*$"}]}

_NONLINEARITY = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["zero", "linear", "nemytskii", "sum"]},
        "rate": {"oneOf": [_NUM, _VEC]},
        "function": {"enum": ["sin", "tanh"]},
        "amplitude": _NUM,
        "parts": {"type": "array", "items": {"$ref": "#/$defs/nonlinearity"}},
    },
    "required": ["kind"],
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "$defs": {"nonlinearity": _NONLINEARITY},
    "type": "object",
    "properties": {
        "experiment": {"enum": ["simulate", "sk-converge", "action", "quasipotential", "sk-limit",
                                "exit", "verify"]},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1},
        "spectral": {
            "type": "object",
            "properties": {
                "length": _POS,
                "n_modes": {"type": "integer", "minimum": 1},
                "beta": _NUM,
                "noise_scale": _POS,
                "space_dim": {"type": "integer", "minimum": 1},
            },
            "required": ["n_modes"],
            "additionalProperties": False,
        },
        "nonlinearity": {"$ref": "#/$defs/nonlinearity"},
        "equation": {
            "type": "object",
            "properties": {"type": {"enum": ["heat", "wave"]}, "mu": _POS},
            "required": ["type"],
            "additionalProperties": False,
        },
        "params": {
            "type": "object",
            "properties": {
                "t_end": _POS, "dt": _POS, "eps": {"type": "number", "minimum": 0},
                "u0": _FIELD, "v0": _FIELD, "replicas": {"type": "integer", "minimum": 1},
                "mu_list": {"type": "array", "items": _POS, "minItems": 1},
                "path": {"enum": ["sin", "reversed_flow"]},
                "target": _FIELD, "velocity": {"oneOf": [_FIELD, {"const": "free"}]},
                "horizon": _POS, "max_iters": {"type": "integer", "minimum": 1},
                "eps_ladder": {"type": "array", "items": _POS, "minItems": 1},
                "max_steps": {"type": "integer", "minimum": 1},
                "domain": {
                    "type": "object",
                    "properties": {"kind": {"enum": ["ball", "halfspace"]}, "radius": _POS,
                                   "mode": {"type": "integer", "minimum": 1}, "level": _POS},
                    "required": ["kind"],
                    "additionalProperties": False,
                },
                "target_value": _NUM,
            },
            "additionalProperties": False,
        },
        "output": {
            "type": "object",
            "properties": {"dir": {"type": "string"}},
            "additionalProperties": False,
        },
    },
    "required": ["experiment", "spectral"],
    "additionalProperties": False,
}

DEFAULT_CONFIG = {
    "experiment": "verify",
    "seed": 20240601,
    "spectral": {"length": math.pi, "n_modes": 8, "beta": 0.0, "noise_scale": 1.0, "space_dim": 1},
    "nonlinearity": {"kind": "nemytskii", "function": "sin", "amplitude": 0.5},
    "equation": {"type": "wave", "mu": 0.1},
    "output": {"dir": "results"},
}


class ConfigError(ValueError):
    pass


class NonConvergence(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration


def validate(cfg: dict) -> None:
    """Raise :class:`ConfigError` naming the offending field."""
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        where = ".".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {err.message}")
    if cfg.get("equation", {}).get("type") == "wave" and "mu" not in cfg["equation"]:
        raise ConfigError("equation.mu: required for the wave equation")


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def build_nonlinearity(block: Optional[dict]) -> Nonlinearity:
    if block is None or block["kind"] == "zero":
        return Nonlinearity.zero()
    kind = block["kind"]
    if kind == "linear":
        return Nonlinearity.linear(block.get("rate", 0.0))
    if kind == "nemytskii":
        a = float(block.get("amplitude", 1.0))
        if block.get("function", "sin") == "sin":
            return Nonlinearity.nemytskii(lambda xi, s: a * np.sin(s), abs(a),
                                          db=lambda xi, s: a * np.cos(s), label=f"{a} sin")
        return Nonlinearity.nemytskii(lambda xi, s: a * np.tanh(s), abs(a),
                                      db=lambda xi, s: a / np.cosh(s) ** 2, label=f"{a} tanh")
    return Nonlinearity.sum(*(build_nonlinearity(p) for p in block.get("parts", [])))


def _field(spec, k: int, name: str):
    if spec is None:
        return np.zeros(k)
    if isinstance(spec, str):
        i = int(spec[1:])
        if i > k:
            raise ConfigError(f"params.{name}: mode {i} exceeds n_modes={k}")
        x = np.zeros(k)
        x[i - 1] = 1.0
        return x
    x = np.asarray(spec, float)
    if x.size != k:
        raise ConfigError(f"params.{name}: expected {k} coefficients, got {x.size}")
    return x


# ---------------------------------------------------------------------------
# output


class Outputs:
    """Collects artifacts in memory; :meth:`flush` writes them in one pass."""

    def __init__(self, directory: FsPath, cfg: dict):
        self.dir = directory
        self.hash = config_hash(cfg)
        self.files = {}

    def header(self):
        return [f"config_sha256 {self.hash}", f"skld_version {__version__}"]

    def csv(self, name: str, columns, rows):
        buf = io.StringIO()
        for line in self.header():
            buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])
        self.files[name] = buf.getvalue()

    def raw(self, name: str, text: str):
        self.files[name] = text

    def json(self, name: str, payload: dict):
        doc = dict(payload)
        doc["config_sha256"] = self.hash
        doc["skld_version"] = __version__
        self.files[name] = json.dumps(_plain(doc), sort_keys=True, indent=2) + "\n"

    def flush(self):
        self.dir.mkdir(parents=True, exist_ok=True)
        for name in sorted(self.files):
            (self.dir / name).write_text(self.files[name], encoding="utf-8", newline="\n")


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _path_rows(path: Path):
    t = path.grid.times
    for i in range(t.size):
        for k in range(path.u.shape[1]):
            v = path.v[i, k] if path.v is not None else float("nan")
            yield (float(t[i]), k + 1, float(path.u[i, k]), float(v))


# ---------------------------------------------------------------------------
# experiments


def _setup(cfg):
    sp = build_config(**cfg["spectral"])
    B = build_nonlinearity(cfg.get("nonlinearity"))
    eq = cfg.get("equation", {"type": "heat"})
    mu = eq.get("mu") if eq["type"] == "wave" else None
    return sp, B, mu, cfg.get("params", {}), int(cfg.get("seed", 0))


def _exp_simulate(cfg, out):
    sp, B, mu, p, seed = _setup(cfg)
    grid = TimeGrid.from_dt(0.0, p.get("t_end", 1.0), p.get("dt", 1e-3))
    eps = p.get("eps", 0.0)
    u0 = _field(p.get("u0"), sp.n_modes, "u0")
    noise = NoisePlan(seed, 0)
    if mu is None:
        path = simulate_heat(sp, u0, eps, B, grid, noise)
    else:
        path = simulate_wave(sp, PhasePoint(u0, _field(p.get("v0"), sp.n_modes, "v0")), mu, eps, B, grid, noise)
    out.csv("path.csv", ["t", "mode", "u_k", "v_k"], _path_rows(path))
    final = float(np.linalg.norm(path.u[-1]))
    out.json("summary.json", {"experiment": "simulate", "final_norm": final})
    return "final |u|_H", final


def _exp_sk_converge(cfg, out):
    sp, B, _, p, seed = _setup(cfg)
    grid = TimeGrid.from_dt(0.0, p.get("t_end", 1.0), p.get("dt", 1e-3))
    mus = p.get("mu_list", [1e-1, 1e-2, 1e-3])
    reps = p.get("replicas", 100)
    u0 = _field(p.get("u0"), sp.n_modes, "u0")
    v0 = _field(p.get("v0"), sp.n_modes, "v0")
    sup = coupled_sk_run(sp, u0, v0, mus, p.get("eps", 0.1), B, grid,
                         [NoisePlan(seed, r) for r in range(reps)])
    out.csv("sk_converge.csv", ["replica", "mu", "sup_diff"],
            ((r, float(m), float(sup[r, j])) for r in range(reps) for j, m in enumerate(mus)))
    med = np.median(sup, axis=0)
    out.json("sk_converge.json", {"mu": mus, "median_sup_diff": med})
    return "median sup diff", [float(x) for x in med]


def _exp_action(cfg, out):
    sp, B, mu, p, _ = _setup(cfg)
    dt = p.get("dt", 1e-3)
    e1 = np.zeros(sp.n_modes)
    e1[0] = 1.0
    if p.get("path", "sin") == "sin":
        grid = TimeGrid.from_dt(0.0, 2 * math.pi, dt)
        u = np.sin(grid.times)[:, None] * e1
    else:
        x = _field(p.get("target", "e1"), sp.n_modes, "target")
        grid = TimeGrid.from_dt(-p.get("horizon", 10.0), 0.0, dt)
        u = np.exp(np.outer(grid.times, sp.alpha)) * x
    path = Path(grid, u)
    rep = action_heat(sp, path, B) if mu is None else action_wave(sp, path, mu, B)
    out.raw("action.json", json.dumps({**json.loads(rep.to_json()), "config_sha256": out.hash,
                                        "skld_version": __version__}, sort_keys=True, indent=2) + "\n")
    return "action", rep.value


def _exp_quasipotential(cfg, out):
    sp, B, mu, p, _ = _setup(cfg)
    x = _field(p.get("target", "e1"), sp.n_modes, "target")
    vel = p.get("velocity", "free")
    if vel != "free":
        vel = _field(vel, sp.n_modes, "velocity")
    opts = {k: p[k] for k in ("horizon", "dt", "max_iters") if k in p}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = mam_minimize(MamProblem(sp, x, mu, B, velocity=vel, **opts))
    out.json("quasipotential.json", res.to_dict())
    out.csv("mam_path.csv", ["t", "mode", "u_k", "v_k"], _path_rows(res.path))
    if not res.converged:
        raise NonConvergence(f"minimum action solver did not converge (action {res.action:.6g})")
    return "action", res.action


def _exp_sk_limit(cfg, out):
    sp, B, _, p, _ = _setup(cfg)
    x = _field(p.get("target", "e1"), sp.n_modes, "target")
    mus = p.get("mu_list", [1.0, 0.3, 0.1, 0.03])
    opts = {k: p[k] for k in ("horizon", "max_iters") if k in p}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        tab = sk_limit_study(sp, x, mus, B, **opts)
    out.json("sk_limit.json", tab.to_dict())
    out.csv("sk_limit.csv", ["mu", "V_mu", "V", "gap"], tab.rows())
    if not all(tab.converged):
        raise NonConvergence("minimum action solver did not converge for some mu")
    return "max gap", max(tab.gaps)


def _exp_exit(cfg, out):
    sp, B, mu, p, seed = _setup(cfg)
    dom = p.get("domain", {"kind": "ball", "radius": 0.35})
    domain = ExitDomain(**dom)
    prob = ExitProblem(sp, domain, mu, B, PhasePoint(_field(p.get("u0"), sp.n_modes, "u0"),
                                                      _field(p.get("v0"), sp.n_modes, "v0")),
                       dt=p.get("dt", 1e-3), max_steps=p.get("max_steps", 10_000_000), seed=seed,
                       target=p.get("target_value"))
    ladder = p.get("eps_ladder", [0.06, 0.04, 0.03])
    reps = p.get("replicas", 400)
    stats = []
    for eps in ladder:
        recs = run_replicas(prob, eps, reps)
        out.raw(f"exit_records_eps{eps:g}.csv", records_to_csv(recs, out.header()))
        stats.append(ExitStats.from_records(eps, recs, seed=seed, target=prob.target))
        out.json(f"exit_stats_eps{eps:g}.json", stats[-1].to_dict())
    out.json("exit_scaling.json", {"stats": [s.to_dict() for s in stats]})
    return "eps log E tau", [s.eps_log_mean for s in stats]


def _exp_verify(cfg, out):
    sp, B, mu, _, seed = _setup(cfg)
    checks = run_suite(sp, B, mu if mu is not None else 0.1, seed)
    out.csv("verify.csv", ["check", "passed", "detail"], ((n, int(ok), d) for n, ok, d in checks))
    for n, ok, d in checks:
        print(f"{'PASS' if ok else 'FAIL'}  {n}  {d}")
    failed = [n for n, ok, _ in checks if not ok]
    if failed:
        raise _CheckFailure(", ".join(failed))
    return "checks passed", len(checks)


class _CheckFailure(RuntimeError):
    pass


EXPERIMENTS = {
    "simulate": _exp_simulate,
    "sk-converge": _exp_sk_converge,
    "action": _exp_action,
    "quasipotential": _exp_quasipotential,
    "sk-limit": _exp_sk_limit,
    "exit": _exp_exit,
    "verify": _exp_verify,
}


def run_config(cfg: dict, out_dir: Optional[str] = None) -> int:
    """Validate and execute one configuration; returns the process exit code."""
    try:
        validate(cfg)
        directory = FsPath(out_dir or cfg.get("output", {}).get("dir", "results"))
        out = Outputs(directory, cfg)
        t0 = time.perf_counter()
        code = EXIT_OK
        try:
            name, metric = EXPERIMENTS[cfg["experiment"]](cfg, out)
        except NonConvergence as exc:
            print(f"error: {exc}", file=sys.stderr)
            name, metric, code = "non-converged", None, EXIT_NONCONVERGED
        except CensoringError as exc:
            print(f"error: {exc}", file=sys.stderr)
            name, metric, code = "censored fraction", exc.censored_fraction, EXIT_BUDGET
        except _CheckFailure as exc:
            print(f"error: failed checks: {exc}", file=sys.stderr)
            name, metric, code = "failed checks", str(exc), EXIT_CHECK_FAILED
        out.flush()
    except (ConfigError, ValueError, TypeError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    print(f"{cfg['experiment']}: {name} = {metric} ({time.perf_counter() - t0:.2f} s)")
    return code


# ---------------------------------------------------------------------------
# plots


def emit_plots(results: str) -> list:
    """Two-column data files from the JSON results in ``results``; returns written paths."""
    d = FsPath(results)
    written = []
    sk = d / "sk_limit.json"
    if sk.exists():
        tab = json.loads(sk.read_text())
        lines = [f"# config_sha256 {tab.get('config_sha256', '')}",
                 "# mu  V_mu(x)  V(x)  |V_mu(x)-V(x)|   (small-mass ladder of the quasi-potential)"]
        for m, v, g in zip(tab["mu"], tab["v_mu"], tab["gap"]):
            lines.append(f"{m!r} {v!r} {tab['v_heat']!r} {g!r}")
        (d / "sk_limit.dat").write_text("\n".join(lines) + "\n")
        written.append(d / "sk_limit.dat")
    else:
        warnings.warn(f"no sk_limit.json in {d}; skipping the small-mass series")
    ex = d / "exit_scaling.json"
    if ex.exists():
        doc = json.loads(ex.read_text())
        lines = [f"# config_sha256 {doc.get('config_sha256', '')}",
                 "# eps  eps*log(E tau)  ci_low  ci_high  inf_dG V   (exit-time scaling)"]
        for s in doc["stats"]:
            tgt = s["target"] if s["target"] is not None else float("nan")
            lines.append(f"{s['eps']!r} {s['eps_log_mean']!r} {s['ci'][0]!r} {s['ci'][1]!r} {tgt!r}")
        (d / "exit_scaling.dat").write_text("\n".join(lines) + "\n")
        written.append(d / "exit_scaling.dat")
    else:
        warnings.warn(f"no exit_scaling.json in {d}; skipping the exit-time series")
    return written


# ---------------------------------------------------------------------------
# entry point


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="skld", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run the experiment described by a JSON config")
    p_run.add_argument("config")
    p_run.add_argument("--out", help="output directory (overrides output.dir)")
    p_ver = sub.add_parser("verify", help="run the invariant suite on the default configuration")
    p_ver.add_argument("--out", default=None)
    p_plot = sub.add_parser("emit-plots", help="write gnuplot-ready data files from a results dir")
    p_plot.add_argument("dir")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)

    if args.command == "run":
        try:
            cfg = json.loads(FsPath(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            print(f"invalid configuration: {exc}", file=sys.stderr)
            return EXIT_INVALID
        return run_config(cfg, args.out)
    if args.command == "verify":
        cfg = copy.deepcopy(DEFAULT_CONFIG)
        return run_config(cfg, args.out)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        written = emit_plots(args.dir)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    for f in written:
        print(f)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
