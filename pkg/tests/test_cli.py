import json

import pytest

from pointscatter.cli import SchemaError, fibonacci_sources, main, parse_config

COARSE_SET = ["solver.h=0.0625", "solver.ds=0.03125", "solver.n_zeta=6", "solver.n_psi=8",
              "solver.n_zeta_source=16", "solver.n_psi_source=8"]


def write_cfg(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def run(tmp_path, command, cfg=None, sets=(), out="out"):
    argv = [command, "--out", str(tmp_path / out)]
    if cfg is not None:
        argv += ["--config", write_cfg(tmp_path, cfg, f"{out}.json")]
    for s in sets:
        argv += ["--set", s]
    return main(argv)


def summary(tmp_path, out="out"):
    return json.loads((tmp_path / out / "summary.json").read_text())


# --- config handling -------------------------------------------------------------

def test_missing_config_file(tmp_path):
    assert main(["forward", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2


def test_unknown_key_names_path(tmp_path, capsys):
    assert run(tmp_path, "verify-prop21", {"solver": {"hh": 0.1}}) == 3
    assert "solver.hh" in capsys.readouterr().err


def test_bad_type_rejected(tmp_path):
    assert run(tmp_path, "verify-prop21", {"taus": "many"}) == 3
    assert run(tmp_path, "verify-prop21", {"solver": {"h": -1}}) == 3


def test_unknown_potential_kind(tmp_path):
    assert run(tmp_path, "verify-prop21", {"potential": {"kind": "sphere"}}) == 3


def test_command_mismatch():
    with pytest.raises(SchemaError):
        parse_config(None, ["command=forward"], "acquire")


def test_override_takes_precedence(tmp_path):
    path = write_cfg(tmp_path, {"potential": {"kind": "radial_bump", "c": 1.0, "m": 2}, "seed": 3})
    cfg = parse_config(path, ["potential.c=0.25", "seed=7"], "forward")
    assert cfg["potential"]["c"] == 0.25 and cfg["seed"] == 7


def test_override_on_default_object():
    cfg = parse_config(None, ["potential.c=0.1"], "forward")
    assert cfg["potential"] == {"kind": "radial_bump", "c": 0.1, "m": 2}


def test_defaults_filled():
    cfg = parse_config(None, [], "verify-prop21")
    assert cfg["solver"]["h"] == 1 / 32 and cfg["tolerances"]["prop22"] == 0.02


def test_fibonacci_sources_unit_and_distinct():
    srcs = fibonacci_sources(6)
    pts = {tuple(round(c, 12) for c in s.a) for s in srcs}
    assert len(pts) == 6


# --- pipelines -------------------------------------------------------------------

def test_prop21_pipeline_and_rerun_is_byte_identical(tmp_path):
    cfg = {"potential": {"kind": "radial_bump", "c": 1.0, "m": 2}, "sources": {"fibonacci": 2},
           "taus": [0.2, 0.5, 0.8]}
    assert run(tmp_path, "verify-prop21", cfg, out="a") == 0
    assert run(tmp_path, "verify-prop21", cfg, out="b") == 0
    for name in ("prop21.json", "summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    s = summary(tmp_path, "a")
    assert s["passed"] and len(s["input_sha256"]) == 64


def test_tolerance_failure_exit(tmp_path):
    cfg = {"potential": {"kind": "harmonic_modulated", "c": 1.0, "m": 2, "n": 7}, "taus": [0.5]}
    assert run(tmp_path, "verify-prop21", cfg, sets=["tolerances.prop21=1e-15"]) == 5
    assert summary(tmp_path)["passed"] is False


def test_angular_pipeline(tmp_path):
    cfg = {"potential": {"kind": "angular_mix", "weights": {"1": 1.0, "7": 1.0}}, "angular": {"expected": 3.0}}
    assert run(tmp_path, "check-angular", cfg) == 0
    assert summary(tmp_path)["constant"] == pytest.approx(3.0, abs=1e-10)
    assert (tmp_path / "out" / "harmonic_profile.csv").exists()


def test_gronwall_pipeline(tmp_path):
    assert run(tmp_path, "gronwall-report", {"potential": {"kind": "radial_bump", "c": 1.0, "m": 2}}) == 0
    rep = json.loads((tmp_path / "out" / "gronwall.json").read_text())
    assert rep["sup_ratio"] > 0 and "effective_config" in rep


def test_forward_pipeline(tmp_path):
    sets = COARSE_SET + ["solver.t_max=1.0", "times.t_max=1.0", "quadrature.n_char_samples=100",
                         "potential.c=0.5"]
    assert run(tmp_path, "forward", sets=sets) == 0
    lines = (tmp_path / "out" / "forward.csv").read_text().splitlines()
    assert lines[0] == "a_index,t,value" and len(lines) == 65


def test_nonconvergence_exit(tmp_path):
    sets = COARSE_SET + ["solver.max_iter=1", "solver.tol=1e-14", "solver.t_max=0.5", "times.t_max=0.5"]
    assert run(tmp_path, "forward", sets=sets) == 4


def test_acquire_thread_invariance(tmp_path, monkeypatch):
    cfg = {"potential": {"kind": "harmonic_modulated", "c": 0.5, "m": 2, "n": 3},
           "sources": {"fibonacci": 2}, "times": {"dt": 0.125, "t_max": 0.5}}
    sets = COARSE_SET + ["solver.t_max=0.5"]
    monkeypatch.setenv("PS_THREADS", "1")
    assert run(tmp_path, "acquire", cfg, sets, out="t1") == 0
    monkeypatch.setenv("PS_THREADS", "2")
    assert run(tmp_path, "acquire", cfg, sets, out="t2") == 0
    assert (tmp_path / "t1" / "data.csv").read_bytes() == (tmp_path / "t2" / "data.csv").read_bytes()


def test_prop22_pipeline(tmp_path):
    cfg = {"potential": {"kind": "radial_bump", "c": 0.3, "m": 2},
           "potential2": {"kind": "radial_bump", "c": 0.2, "m": 3}, "taus": [0.3]}
    assert run(tmp_path, "verify-prop22", cfg, COARSE_SET) == 0
    rep = json.loads((tmp_path / "out" / "prop22.json").read_text())
    assert rep["max_relative"] <= 0.02


def test_invert_self_closure_and_file_mode(tmp_path):
    # the coarse grid resolves the profile to a few percent
    cfg = {"potential": {"kind": "radial_bump", "c": 0.1, "m": 2}, "inversion": {"n_corr": 0},
           "tolerances": {"round_trip": 0.05}}
    assert run(tmp_path, "invert-radial", cfg, COARSE_SET, out="self") == 0
    s = summary(tmp_path, "self")
    assert s["mode"] == "self-closure" and s["round_trip_error"] <= 0.05
    cfg2 = {**cfg, "inversion": {"n_corr": 0, "data": str(tmp_path / "self" / "data.csv")}}
    assert run(tmp_path, "invert-radial", cfg2, COARSE_SET, out="file") == 0
    s2 = summary(tmp_path, "file")
    assert s2["mode"] == "file" and s2["round_trip_error"] == s["round_trip_error"]


def test_invert_rejects_nonradial_data(tmp_path):
    data = tmp_path / "d.csv"
    rows = ["a_index,a_x,a_y,a_z,t,value"]
    for k, a in enumerate(([0, 0, 1], [1, 0, 0])):
        for m in range(1, 9):
            rows.append(f"{k},{a[0]},{a[1]},{a[2]},{m / 8},{(k + 1) * m * 1e-3}")
    data.write_text("\n".join(rows) + "\n")
    cfg = {"potential": {"kind": "zero"}, "inversion": {"data": str(data)}}
    assert run(tmp_path, "invert-radial", cfg) == 5
