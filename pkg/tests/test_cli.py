import json
import subprocess
import sys

import pytest

from skld import __version__
from skld.cli import CONFIG_SCHEMA, DEFAULT_CONFIG, config_hash, emit_plots, main, validate, ConfigError


def _write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def _linear(experiment, **params):
    return {"experiment": experiment, "seed": 7, "spectral": {"n_modes": 4},
            "nonlinearity": {"kind": "zero"}, "equation": {"type": "heat"}, "params": params}


def test_verify_passes(tmp_path, capsys):
    assert main(["verify", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") >= 10
    assert (tmp_path / "verify.csv").exists()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "skld", "verify", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr


def test_quasipotential_linear(tmp_path):
    cfg = _linear("quasipotential", target="e1")
    assert main(["run", _write(tmp_path, cfg), "--out", str(tmp_path / "o")]) == 0
    doc = json.loads((tmp_path / "o" / "quasipotential.json").read_text())
    assert doc["action"] == pytest.approx(1.0, rel=0.02)
    assert doc["converged"] is True


@pytest.mark.parametrize("mutate,field", [
    (lambda c: c["spectral"].update(n_modes=-3), "spectral.n_modes"),
    (lambda c: c.update(bogus=1), "bogus"),
    (lambda c: c["equation"].update(mu=-1.0), "equation.mu"),
    (lambda c: c["params"].update(eps=-0.1), "params.eps"),
])
def test_invalid_config_names_field(tmp_path, capsys, mutate, field):
    cfg = _linear("simulate")
    mutate(cfg)
    assert main(["run", _write(tmp_path, cfg)]) == 1
    assert field in capsys.readouterr().err


def test_unreadable_config(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["run", str(bad)]) == 1
    assert main(["run", str(tmp_path / "missing.json")]) == 1


def test_wave_requires_mass():
    cfg = _linear("simulate")
    cfg["equation"] = {"type": "wave"}
    with pytest.raises(ConfigError, match="equation.mu"):
        validate(cfg)


def test_target_outside_modes(tmp_path, capsys):
    assert main(["run", _write(tmp_path, _linear("quasipotential", target="e9"))]) == 1
    assert "params.target" in capsys.readouterr().err


def test_default_config_is_valid():
    validate(DEFAULT_CONFIG)
    assert CONFIG_SCHEMA["additionalProperties"] is False


@pytest.mark.parametrize("cfg", [
    {**_linear("simulate", eps=0.2, t_end=0.5, u0="e1"), "equation": {"type": "wave", "mu": 0.1},
     "nonlinearity": {"kind": "nemytskii", "function": "sin", "amplitude": 0.5}},
    _linear("sk-converge", eps=0.1, t_end=0.2, replicas=5, mu_list=[0.1, 0.01]),
    _linear("exit", eps_ladder=[0.2], replicas=20),
    _linear("action", path="reversed_flow", target="e1"),
])
def test_reruns_are_byte_identical(tmp_path, cfg):
    path = _write(tmp_path, cfg)
    outs = []
    for name in ("a", "b"):
        assert main(["run", path, "--out", str(tmp_path / name)]) == 0
        outs.append({p.name: p.read_bytes() for p in sorted((tmp_path / name).iterdir())})
    assert outs[0] == outs[1] and outs[0]
    digest = config_hash(cfg)
    for name, data in outs[0].items():
        text = data.decode()
        assert digest in text and __version__ in text, name
        assert "\r" not in text


def test_simulate_csv_layout(tmp_path):
    cfg = _linear("simulate", t_end=0.01, dt=0.005, u0="e2")
    main(["run", _write(tmp_path, cfg), "--out", str(tmp_path / "o")])
    lines = (tmp_path / "o" / "path.csv").read_text().splitlines()
    assert lines[2] == "t,mode,u_k,v_k"
    assert len(lines) == 3 + 3 * 4


def test_non_convergence_exit_code(tmp_path):
    cfg = _linear("quasipotential", target="e1", max_iters=1)
    assert main(["run", _write(tmp_path, cfg), "--out", str(tmp_path / "o")]) == 2


def test_budget_exit_code(tmp_path):
    cfg = _linear("exit", eps_ladder=[0.01], replicas=10, max_steps=10)
    assert main(["run", _write(tmp_path, cfg), "--out", str(tmp_path / "o")]) == 3


def test_emit_plots_series(tmp_path):
    out = tmp_path / "res"
    assert main(["run", _write(tmp_path, _linear("sk-limit", target="e1", mu_list=[1.0, 0.1])),
                 "--out", str(out)]) == 0
    assert main(["run", _write(tmp_path, _linear("exit", eps_ladder=[0.2, 0.15], replicas=30,
                                                target_value=0.1225), "e.json"), "--out", str(out)]) == 0
    written = emit_plots(str(out))
    assert {p.name for p in written} == {"sk_limit.dat", "exit_scaling.dat"}
    sk = [l.split() for l in (out / "sk_limit.dat").read_text().splitlines() if not l.startswith("#")]
    assert [float(r[0]) for r in sk] == [1.0, 0.1]
    assert all(len(r) == 4 for r in sk)
    ex = [l.split() for l in (out / "exit_scaling.dat").read_text().splitlines() if not l.startswith("#")]
    assert len(ex) == 2 and all(len(r) == 5 for r in ex)
    assert float(ex[0][4]) == 0.1225
    assert float(ex[0][2]) < float(ex[0][1]) < float(ex[0][3])


def test_emit_plots_empty_dir(tmp_path, capsys):
    assert main(["emit-plots", str(tmp_path)]) == 0
    assert "warning" in capsys.readouterr().err
    assert list(tmp_path.iterdir()) == []
