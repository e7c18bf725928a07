import copy
import csv
import json

import numpy as np
import pytest

from qdiff import cli, harness
from qdiff.errors import ConfigError
from qdiff.harness import load_config, run_assumptions, run_simulate, run_verify_scaling


def _r1_dict(**over):
    data = copy.deepcopy(load_config("r1").raw)
    data.update(over)
    return data


def _run(argv):
    return cli.main([str(a) for a in argv])


def test_bundled_configs_load():
    names = harness.bundled_configs()
    assert {"r1", "d2n2", "d2n3", "r1_constant_u", "d2_axis_hopping"} <= set(names)
    for name in names:
        cfg = load_config(name)
        assert cfg.name == name
        cfg.system()
        cfg.initial_state().validate()


def test_config_from_path_and_dict(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(_r1_dict(name="copy")))
    a, b = load_config(path), load_config(_r1_dict(name="copy"))
    assert a.digest == b.digest
    assert a.digest != load_config("r1").digest
    assert a.Mp == 16 and a.profile_Mp == 64


@pytest.mark.parametrize("bad", [
    "no_such_config",
    {"hopping": [], "potential": {"U": [1, 0]}},
    _r1_dict(markov={"kind": "levy"}),
    _r1_dict(potential={"W": [1.0, 0.0, -1.0]}),
    _r1_dict(initial={"phi": []}),
])
def test_config_errors(bad):
    with pytest.raises(ConfigError):
        cfg = load_config(bad)
        cfg.system()
        cfg.initial_state()


def test_bad_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(path)


def test_assumption_examples():
    assert run_assumptions(load_config("r1")).ok
    assert run_assumptions(load_config("d2n2")).ok
    rep = run_assumptions(load_config("r1_constant_u"))
    assert {"DegeneratePotential", "SmallerPeriod"} <= set(rep.codes())
    assert "DegenerateHopping" in run_assumptions(load_config("d2_axis_hopping")).codes()
    onsite = run_assumptions(load_config(_r1_dict(hopping=[[[0], 5.0]])))
    assert "DegenerateHopping" in onsite.codes()
    r1 = run_assumptions(load_config("r1"))
    assert r1.constants["delta_bound"] == pytest.approx(1 / 123)


def test_cli_exit_codes(tmp_path, capsys):
    out = tmp_path / "o"
    assert _run(["assumptions", "--config", "r1", "--out", out]) == 0
    assert _run(["assumptions", "--config", "r1_constant_u", "--out", out]) == 1
    assert _run(["assumptions", "--config", "d2_axis_hopping", "--out", out]) == 1
    assert _run(["exact", "--config", "r1", "--out", out]) == 0
    assert _run(["diffusion", "--config", "d2n2", "--out", out]) == 2
    assert _run(["diffusion", "--config", "no_such", "--out", out]) == 2
    assert _run(["simulate", "--config", "r1_constant_u", "--out", out]) == 1
    err = capsys.readouterr().err
    assert "NotPositiveDefinite" in err


def test_cli_diffusion_and_verify_r1(tmp_path):
    out = tmp_path / "o"
    assert _run(["diffusion", "--config", "r1", "--out", out]) == 0
    with open(out / "diffusion.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 65
    assert _run(["verify", "--config", "r1", "--out", out]) == 0
    man = json.loads((out / "verify_manifest.json").read_text())
    assert man["summary"]["ok"] is True


def test_mixture_rejected_by_simulate():
    cfg = load_config(_r1_dict(initial={"mixture": [[0.5, [[[0], 1.0]]], [0.5, [[[1], 1.0]]]]}))
    with pytest.raises(ConfigError):
        run_simulate(cfg)


def test_verify_at_zero_momentum():
    rep = run_verify_scaling(load_config("r1"), ks=[[0.0]], taus=[16, 64])
    for row in rep.rows:
        assert abs(row.lhs - 1) < 1e-10 and abs(row.rhs - 1) < 1e-10


def test_verify_diagnostics_r1():
    rep = run_verify_scaling(load_config("r1"))
    assert all(e <= 1e-8 for e in rep.rhs_check.values())
    taylor = [r.taylor_err for r in rep.rows]
    assert all(b < a for a, b in zip(taylor, taylor[1:]))
    for r in rep.rows:
        assert abs(r.remainder) <= r.remainder_bound * (1 + 1e-6)
        assert abs(r.leading + r.remainder - r.lhs) < 1e-9


def _sim(samples, seed, t=2.0):
    cfg = load_config(_r1_dict(samples=samples, t=t, seed=seed))
    return run_simulate(cfg)


def test_stderr_scales_with_samples():
    small, large = _sim(100, 1), _sim(10_000, 1)
    for a, b in zip(small.rows, large.rows):
        assert 7 < a[3] / b[3] < 14


def test_seed_change_is_statistically_consistent():
    a, b = _sim(2000, 1), _sim(2000, 2)
    for ra, rb in zip(a.rows, b.rows):
        assert ra[1:3] != rb[1:3]
        diff = abs(complex(ra[1], ra[2]) - complex(rb[1], rb[2]))
        assert diff <= 5 * np.hypot(ra[3], rb[3])


def test_outputs_independent_of_workers(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(_r1_dict(samples=200, t=2.0)))
    for w in (1, 3):
        assert _run(["simulate", "--config", cfg, "--workers", w, "--out", tmp_path / f"w{w}"]) == 0
    for name in ("density.csv", "fourier.csv", "simulate_manifest.json"):
        assert (tmp_path / "w1" / name).read_bytes() == (tmp_path / "w3" / name).read_bytes()


def test_csv_round_trip_and_manifest(tmp_path):
    vals = [np.pi, 1 / 3, 1e-300, -2.5e17]
    path = harness.write_csv(tmp_path / "x.csv", ["a", "b", "c", "d"], [vals])
    with open(path) as fh:
        back = list(csv.reader(fh))[1]
    assert [float(v) for v in back] == vals
    cfg = load_config("r1")
    man = json.loads(harness.write_manifest(tmp_path, cfg, "demo", 7, {"x": 0.1}).read_text())
    assert man["config_sha256"] == cfg.digest and man["seed"] == 7
    assert {"qdiff", "numpy", "scipy", "python"} <= set(man["versions"])
    assert not any("time" in key or "date" in key for key in man)


def test_cross_check_failure_exits_2(tmp_path, monkeypatch):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(_r1_dict(samples=50, t=1.0)))
    monkeypatch.setattr(harness, "exact_fourier_density", lambda *a, **kw: 5.0 + 0j)
    assert _run(["simulate", "--config", cfg, "--cross-check", "--out", tmp_path / "o"]) == 2


def test_cross_check_passes(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(_r1_dict(samples=500, t=1.0)))
    assert _run(["simulate", "--config", cfg, "--cross-check", "--out", tmp_path / "o"]) == 0
    with open(tmp_path / "o" / "fourier.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert all(float(r["z"]) < 5 for r in rows)
