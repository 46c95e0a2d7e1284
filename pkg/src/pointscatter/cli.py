"""Command-line entry point.

    pointscatter <command> --config <file> [--set key=value ...] --out <dir>

Configs are JSON documents checked against a strict schema: unknown keys are
rejected with the dotted path of the offending field.  ``--set`` overrides
take precedence over file values; the value is parsed as JSON when possible
and kept as a string otherwise.

Exit codes: 0 success, 2 missing config file, 3 schema or usage error,
4 solver non-convergence, 5 tolerance failure, 6 I/O failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import math
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from .errors import ConvergenceError, DomainError, RejectionError, UsageError
from .forward_solver import BackscatterData, SolverConfig, acquire_data, picard_solve, trace_at_source
from .harmonics import HarmonicBasis, angular_condition_constant, expand
from .identity_lab import verification_report
from .inversion import InversionConfig, gronwall_report, layer_strip_radial, radial_shell_norm
from .potential import char_line_integral, potential_from_spec, shell_norm
from .sphere_geometry import SourcePoint, sphere_grid
from .spherical_means import residual_report

COMMANDS = ("forward", "acquire", "verify-prop21", "verify-prop22", "invert-radial",
            "check-angular", "gronwall-report")

EXIT_OK, EXIT_MISSING, EXIT_SCHEMA, EXIT_CONVERGENCE, EXIT_TOLERANCE, EXIT_IO = 0, 2, 3, 4, 5, 6


class SchemaError(Exception):
    """Config does not match the schema; message names the field path."""


# A schema leaf is a (type-check, default) pair; dict nodes recurse.  A
# default of None marks an optional field.
def _num(positive=False, integer=False):
    def check(v, path):
        ok = isinstance(v, (int, float)) and not isinstance(v, bool)
        if integer:
            ok = ok and float(v).is_integer()
        if not ok or not math.isfinite(float(v)):
            raise SchemaError(f"{path}: expected {'integer' if integer else 'number'}, got {v!r}")
        if positive and v <= 0:
            raise SchemaError(f"{path}: must be positive, got {v!r}")
        return int(v) if integer else float(v)
    return check


def _bool(v, path):
    if not isinstance(v, bool):
        raise SchemaError(f"{path}: expected boolean, got {v!r}")
    return v


def _choice(*options):
    def check(v, path):
        if v not in options:
            raise SchemaError(f"{path}: expected one of {list(options)}, got {v!r}")
        return v
    return check


def _num_list(positive=False):
    def check(v, path):
        if not isinstance(v, list) or not v:
            raise SchemaError(f"{path}: expected a non-empty list of numbers")
        return [_num(positive)(x, f"{path}[{i}]") for i, x in enumerate(v)]
    return check


def _potential(v, path):
    if not isinstance(v, dict):
        raise SchemaError(f"{path}: expected an object")
    kinds = {
        "radial_bump": {"c", "m"},
        "harmonic_modulated": {"c", "m", "n"},
        "angular_mix": {"c", "m", "weights"},
        "zero": set(),
        "gridded": {"path", "c"},
        "tabulated_radial": {"rho", "values"},
        "sum": {"terms"},
    }
    kind = v.get("kind")
    if kind not in kinds:
        raise SchemaError(f"{path}.kind: expected one of {sorted(kinds)}, got {kind!r}")
    for key in v:
        if key != "kind" and key not in kinds[kind]:
            raise SchemaError(f"{path}.{key}: unknown key for potential kind {kind!r}")
    for key in ("c",):
        if key in v:
            _num()(v[key], f"{path}.{key}")
    for key in ("m", "n"):
        if key in v:
            _num(positive=True, integer=True)(v[key], f"{path}.{key}")
    if kind == "sum":
        if not isinstance(v.get("terms"), list) or not v["terms"]:
            raise SchemaError(f"{path}.terms: expected a non-empty list")
        for i, t in enumerate(v["terms"]):
            _potential(t, f"{path}.terms[{i}]")
    if kind == "angular_mix":
        w = v.get("weights", {})
        if not isinstance(w, dict) or not w:
            raise SchemaError(f"{path}.weights: expected a non-empty object")
        for k, x in w.items():
            if not str(k).isdigit() or int(k) < 1:
                raise SchemaError(f"{path}.weights.{k}: harmonic index must be a positive integer")
            _num()(x, f"{path}.weights.{k}")
    if kind == "tabulated_radial":
        rho, vals = v.get("rho"), v.get("values")
        if not isinstance(rho, list) or not isinstance(vals, list) or len(rho) != len(vals) or len(rho) < 2:
            raise SchemaError(f"{path}: rho and values must be lists of equal length >= 2")
        for i, (r, x) in enumerate(zip(rho, vals)):
            _num()(r, f"{path}.rho[{i}]")
            _num()(x, f"{path}.values[{i}]")
    if kind == "gridded" and not isinstance(v.get("path"), str):
        raise SchemaError(f"{path}.path: expected a file path")
    return v


def _sources(v, path):
    if isinstance(v, list):
        if not v:
            raise SchemaError(f"{path}: expected at least one source")
        for i, p in enumerate(v):
            if not (isinstance(p, list) and len(p) == 3):
                raise SchemaError(f"{path}[{i}]: expected [x, y, z]")
            _num_list()(p, f"{path}[{i}]")
        return v
    if isinstance(v, dict):
        for key in v:
            if key not in ("fibonacci", "random"):
                raise SchemaError(f"{path}.{key}: unknown key")
        if len(v) != 1:
            raise SchemaError(f"{path}: give exactly one of 'fibonacci' or 'random'")
        for key, n in v.items():
            _num(positive=True, integer=True)(n, f"{path}.{key}")
        return v
    raise SchemaError(f"{path}: expected a list of points or {{'fibonacci': n}}")


def _optional_str(v, path):
    if v is not None and not isinstance(v, str):
        raise SchemaError(f"{path}: expected a string")
    return v


SCHEMA: Dict[str, Any] = {
    "command": (_choice(*COMMANDS), None),
    "potential": (_potential, {"kind": "radial_bump", "c": 1.0, "m": 2}),
    "potential2": (_potential, {"kind": "zero"}),
    "sources": (_sources, [[0.0, 0.0, 1.0]]),
    "seed": (_num(integer=True), 0),
    "taus": (_num_list(positive=True), [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]),
    "solver": {
        "h": (_num(positive=True), 1.0 / 32),
        "ds": (_num(positive=True), 1.0 / 64),
        "t_max": (_num(positive=True), 2.0),
        "max_iter": (_num(positive=True, integer=True), 20),
        "tol": (_num(positive=True), 1e-8),
        "n_zeta": (_num(positive=True, integer=True), 12),
        "n_psi": (_num(positive=True, integer=True), 16),
        "n_zeta_source": (_num(positive=True, integer=True), 32),
        "n_psi_source": (_num(positive=True, integer=True), 16),
        "geometry": (_choice("auto", "axisymmetric", "cartesian"), "auto"),
        "prune": (_bool, True),
    },
    "times": {
        "dt": (_num(positive=True), 1.0 / 64),
        "t_max": (_num(positive=True), 2.0),
    },
    "quadrature": {
        "n_rho": (_num(positive=True, integer=True), 64),
        "n_theta": (_num(positive=True, integer=True), 64),
        "n_mu": (_num(positive=True, integer=True), 64),
        "n_az": (_num(positive=True, integer=True), 64),
        "r_cut": (_num(), 0.02),
        "n_char_samples": (_num(positive=True, integer=True), 1000),
    },
    "inversion": {
        "data": (_optional_str, None),
        "eps": (_num(positive=True), 0.05),
        "tau_boot": (_num(), 0.05),
        "n_corr": (_num(integer=True), 1),
        "refresh_every": (_num(positive=True, integer=True), 4),
        "n_r": (_num(positive=True, integer=True), 48),
        "n_mu": (_num(positive=True, integer=True), 32),
        "variance_tol": (_num(positive=True), 1e-6),
        "kernel": (_bool, True),
    },
    "angular": {
        "max_degree": (_num(positive=True, integer=True), 8),
        "rho": (_num_list(positive=True), [0.2, 0.4, 0.6, 0.8]),
        "expected": ((lambda v, p: None if v is None else _num()(v, p)), None),
    },
    "gronwall": {
        "eps": (_num(positive=True), 0.1),
        "s_max": (_num(positive=True), 0.99),
        "n_s": (_num(positive=True, integer=True), 90),
        "n_rho": (_num(positive=True, integer=True), 400),
    },
    "tolerances": {
        "char": (_num(positive=True), 1e-3),
        "prop21": (_num(positive=True), 1e-3),
        "prop22": (_num(positive=True), 0.02),
        "round_trip": (_num(positive=True), 0.02),
        "angular": (_num(positive=True), 1e-10),
    },
}


def _fill(schema, cfg, path):
    if not isinstance(cfg, dict):
        raise SchemaError(f"{path or '<root>'}: expected an object")
    for key in cfg:
        if key not in schema:
            raise SchemaError(f"{path + '.' if path else ''}{key}: unknown key")
    out = {}
    for key, node in schema.items():
        p = f"{path}.{key}" if path else key
        if isinstance(node, dict):
            out[key] = _fill(node, cfg.get(key, {}), p)
        else:
            check, default = node
            if key in cfg:
                out[key] = check(cfg[key], p)
            else:
                out[key] = copy.deepcopy(default)
    return out


def _apply_override(cfg: dict, item: str) -> None:
    if "=" not in item:
        raise SchemaError(f"--set {item!r}: expected key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    node, schema = cfg, SCHEMA
    for part in parts[:-1]:
        sub = schema.get(part) if isinstance(schema, dict) else None
        if part not in node:
            # object-valued leaves (potentials) start from their default
            seed = sub[1] if isinstance(sub, tuple) and isinstance(sub[1], dict) else {}
            node[part] = copy.deepcopy(seed)
        node = node[part]
        schema = sub if isinstance(sub, dict) else None
        if not isinstance(node, dict):
            raise SchemaError(f"{key}: cannot set a field below a non-object")
    node[parts[-1]] = value


def parse_config(path: Optional[str], overrides: List[str] = (), command: Optional[str] = None) -> dict:
    """Load, override and validate a config; returns the effective config.

    Raises ``FileNotFoundError`` for a missing file and :class:`SchemaError`
    for any schema violation.
    """
    raw: dict = {}
    if path is not None:
        with open(path) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"<root>: malformed JSON ({exc})") from None
    for item in overrides:
        _apply_override(raw, item)
    if command is not None:
        if raw.get("command", command) != command:
            raise SchemaError(f"command: config says {raw['command']!r} but {command!r} was requested")
        raw["command"] = command
    cfg = _fill(SCHEMA, raw, "")
    if cfg["command"] is None:
        raise SchemaError("command: missing")
    return cfg


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def fibonacci_sources(n: int) -> List[SourcePoint]:
    """Deterministic, nearly uniform points on the unit sphere."""
    k = np.arange(n) + 0.5
    z = 1.0 - 2.0 * k / n
    phi = np.pi * (1.0 + 5 ** 0.5) * k
    r = np.sqrt(1.0 - z * z)
    return [SourcePoint.from_direction([r[i] * np.cos(phi[i]), r[i] * np.sin(phi[i]), z[i]]) for i in range(n)]


def _make_sources(cfg) -> List[SourcePoint]:
    spec = cfg["sources"]
    if isinstance(spec, list):
        return [SourcePoint.from_direction(p) for p in spec]
    if "fibonacci" in spec:
        return fibonacci_sources(int(spec["fibonacci"]))
    rng = np.random.default_rng(cfg["seed"])
    v = rng.normal(size=(int(spec["random"]), 3))
    return [SourcePoint.from_direction(p) for p in v]


def _solver_cfg(cfg) -> SolverConfig:
    return SolverConfig(**cfg["solver"]).validate()


def _time_grid(cfg) -> np.ndarray:
    dt, t_max = cfg["times"]["dt"], cfg["times"]["t_max"]
    n = int(round(t_max / dt))
    if abs(n * dt - t_max) > 1e-9 or n < 1:
        raise UsageError("times.t_max must be a positive multiple of times.dt")
    return dt * np.arange(1, n + 1)


def _input_files(cfg, base_dir) -> List[Path]:
    files = []

    def walk(spec):
        if spec.get("kind") == "gridded":
            p = Path(spec["path"])
            files.append(p if p.is_absolute() else Path(base_dir) / p)
        for t in spec.get("terms", []):
            walk(t)

    walk(cfg["potential"])
    walk(cfg["potential2"])
    if cfg["inversion"]["data"]:
        p = Path(cfg["inversion"]["data"])
        files.append(p if p.is_absolute() else Path(base_dir) / p)
    return files


def input_hash(cfg, base_dir) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(cfg, sort_keys=True).encode())
    for f in _input_files(cfg, base_dir):
        h.update(f.read_bytes())
    return h.hexdigest()


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _check(name, value, tol, relation="<="):
    passed = bool(value <= tol) if relation == "<=" else bool(value == tol)
    return {"name": name, "value": value, "tolerance": tol, "passed": passed}


# ---------------------------------------------------------------------------
# Pipelines; each returns (artifacts, checks, extra summary fields)
# ---------------------------------------------------------------------------

def _run_forward(cfg, q, out, base_dir):
    scfg = _solver_cfg(cfg)
    rng = np.random.default_rng(cfg["seed"])
    rows, checks, histories = [], [], []
    times = _time_grid(cfg)
    worst = 0.0
    for k, src in enumerate(_make_sources(cfg)):
        fld = picard_solve(q, src, scfg)
        tr = trace_at_source(fld, times[times <= fld.s_max + 1e-12])
        rows.extend((k, float(t), float(v)) for t, v in zip(times, tr))
        n = cfg["quadrature"]["n_char_samples"]
        v = rng.normal(size=(n, 3))
        x = v / np.linalg.norm(v, axis=1, keepdims=True) * rng.uniform(0, 1, (n, 1)) ** (1 / 3) * 0.999
        err = np.abs(fld.char_trace(x) - char_line_integral(q, src, x))
        scale = max(q.sup_norm, 1e-300)
        worst = max(worst, float(err.max()) / scale)
        histories.append(fld.residual_history)
    checks.append(_check("char_trace_over_supnorm", worst, cfg["tolerances"]["char"]))
    path = out / "forward.csv"
    with open(path, "w") as fh:
        fh.write("a_index,t,value\n")
        for k, t, v in rows:
            fh.write(f"{k},{t!r},{v!r}\n")
    return [path.name], checks, {"fixed_point_history": histories}


def _run_acquire(cfg, q, out, base_dir):
    data = acquire_data(q, _make_sources(cfg), _time_grid(cfg), _solver_cfg(cfg))
    path = out / "data.csv"
    data.to_csv(path)
    checks = [_check("failed_sources", len(data.errors), 0)]
    return [path.name], checks, {"errors": {str(k): v for k, v in data.errors.items()}}


def _run_prop21(cfg, q, out, base_dir):
    qd = cfg["quadrature"]
    rep = residual_report(q, _make_sources(cfg), cfg["taus"], n_rho=qd["n_rho"], n_theta=qd["n_theta"],
                          n_mu=qd["n_mu"], n_az=qd["n_az"])
    _write_json(out / "prop21.json", rep)
    return ["prop21.json"], [_check("prop21_max_relative", rep["max_relative"], cfg["tolerances"]["prop21"])], {}


def _run_prop22(cfg, q, out, base_dir):
    q2 = potential_from_spec(cfg["potential2"], base_dir)
    rep = verification_report(q, q2, _make_sources(cfg), cfg["taus"], _solver_cfg(cfg),
                              r_cut=cfg["quadrature"]["r_cut"],
                              inputs={"potential": cfg["potential"], "potential2": cfg["potential2"]})
    _write_json(out / "prop22.json", rep)
    return ["prop22.json"], [_check("prop22_max_relative", rep["max_relative"], cfg["tolerances"]["prop22"])], {}


def _run_invert(cfg, q, out, base_dir):
    scfg = _solver_cfg(cfg)
    inv = cfg["inversion"]
    icfg = InversionConfig(solver=scfg, **{k: v for k, v in inv.items() if k != "data"}).validate()
    artifacts = []
    if inv["data"]:
        p = Path(inv["data"])
        data = BackscatterData.from_csv(p if p.is_absolute() else Path(base_dir) / p)
        q_true = q.radial if cfg["potential"]["kind"] != "zero" and q.is_radial else None
        mode = "file"
    else:
        times = scfg.ds * np.arange(1, int(round(2.0 / scfg.ds)) + 1)
        data = acquire_data(q, _make_sources(cfg)[:1], times, scfg)
        data.to_csv(out / "data.csv")
        artifacts.append("data.csv")
        q_true = q.radial if q.is_radial else None
        mode = "self-closure"
    prof = layer_strip_radial(data, icfg, q_true=q_true)
    prof.to_csv(out / "profile.csv")
    artifacts.append("profile.csv")
    checks = []
    extra = {"mode": mode, "field_solves": prof.metadata["field_solves"]}
    if q_true is not None:
        err = prof.error()
        extra["round_trip_error"] = err
        checks.append(_check("round_trip_relative_l2", err, cfg["tolerances"]["round_trip"]))
    _write_json(out / "inversion.json", {**extra, "metadata": prof.metadata})
    artifacts.append("inversion.json")
    return artifacts, checks, extra


def _run_angular(cfg, q, out, base_dir):
    ang = cfg["angular"]
    basis = HarmonicBasis(ang["max_degree"])
    prof = expand(q, basis, np.array(ang["rho"]))
    prof.to_csv(out / "harmonic_profile.csv")
    rep = angular_condition_constant(prof)
    _write_json(out / "angular.json", {"constant": rep.constant, "rho": rep.rho_grid, "ratios":
                                       [None if np.isnan(r) else float(r) for r in rep.ratios]})
    checks = []
    if ang["expected"] is not None:
        checks.append(_check("angular_constant_error", abs(rep.constant - ang["expected"]),
                             cfg["tolerances"]["angular"]))
    return ["harmonic_profile.csv", "angular.json"], checks, {"constant": rep.constant}


def _run_gronwall(cfg, q, out, base_dir):
    g = cfg["gronwall"]
    rho = np.linspace(0.0, 1.0, g["n_rho"] + 1)
    if q.is_radial:
        P = radial_shell_norm(q.radial, rho)
    else:
        P = shell_norm(q, rho, sphere_grid(24, 48))
    rep = gronwall_report((rho, P), g["eps"], g["s_max"], g["n_s"])
    _write_json(out / "gronwall.json", {**rep.to_dict(), "rho": rho, "P": P})
    finite = bool(np.all(np.isfinite(rep.ratios)))
    return ["gronwall.json"], [{"name": "ratios_finite", "value": finite, "tolerance": True,
                                "passed": finite}], {"sup_ratio": rep.sup_ratio,
                                                     "pi_c_eps_squared": rep.pi_c_eps_squared}


PIPELINES = {
    "forward": _run_forward,
    "acquire": _run_acquire,
    "verify-prop21": _run_prop21,
    "verify-prop22": _run_prop22,
    "invert-radial": _run_invert,
    "check-angular": _run_angular,
    "gronwall-report": _run_gronwall,
}


def run(cfg: dict, out: Path, base_dir: Path) -> int:
    """Execute a validated config; writes artifacts and ``summary.json``."""
    out.mkdir(parents=True, exist_ok=True)
    q = potential_from_spec(cfg["potential"], base_dir)
    digest = input_hash(cfg, base_dir)
    artifacts, checks, extra = PIPELINES[cfg["command"]](cfg, q, out, base_dir)
    passed = all(c["passed"] for c in checks)
    summary = {"command": cfg["command"], "config": cfg, "input_sha256": digest,
               "artifacts": artifacts, "checks": checks, "passed": passed, **extra}
    _write_json(out / "summary.json", summary)
    for name in artifacts:
        p = out / name
        if p.suffix == ".json":
            obj = json.loads(p.read_text())
            obj["effective_config"] = cfg
            obj["input_sha256"] = digest
            _write_json(p, obj)
    return EXIT_OK if passed else EXIT_TOLERANCE


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pointscatter", description=__doc__.split("\n\n")[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="JSON config file")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override a config field (dotted path); may repeat")
    ap.add_argument("--out", required=True, help="output directory")
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config, args.set, args.command)
    except FileNotFoundError as exc:
        print(f"error: config file not found: {exc.filename}", file=sys.stderr)
        return EXIT_MISSING
    except SchemaError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    base_dir = Path(args.config).resolve().parent if args.config else Path.cwd()
    try:
        status = run(cfg, Path(args.out), base_dir)
    except ConvergenceError as exc:
        print(f"error: solver did not converge: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except RejectionError as exc:
        print(f"error: data rejected: {exc}", file=sys.stderr)
        return EXIT_TOLERANCE
    except (DomainError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except OSError as exc:
        print(f"error: I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    print(json.dumps({"command": cfg["command"], "exit": status, "out": str(args.out)}))
    return status


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
