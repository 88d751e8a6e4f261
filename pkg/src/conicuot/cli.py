"""Command-line front end.

    python3 -m conicuot solve    --instance inst.json [--cost ghk] [--tol 1e-6]
    python3 -m conicuot check    --instance inst.json --coupling alpha.json
    python3 -m conicuot map      --instance inst.json | --grid 8,16,32
    python3 -m conicuot metric   --cost ghk --samples 500 --seed 0
    python3 -m conicuot envelope --cost "cone_power(2,2,pi)" --distances 3.14159

Exit codes: 0 success, 1 input error, 2 numerical non-convergence,
3 verification failure.  JSON output is deterministic (sorted keys, no
timings); +inf and -inf are written as the strings "inf" and "-inf".
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import re
import sys
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from .cone import HomogeneousCoupling, homogeneous_marginal
from .costs import CostFunction, cost_from_spec, radial_cc_envelope
from .dual import DualOptions, PotentialPair, complementary_slackness, dual_ascent, duality_gap
from .metrics import metric_axioms_test
from .monge import extract_map, gaussian_grid_instance
from .optimality import SupportSet, check_connectedness, check_cyclical_monotonicity, walk_potential
from .primal import (Instance, SolveOptions, distinguished_decomposition, solve_semicoupling,
                     to_homogeneous_coupling)

EXIT_OK, EXIT_INPUT, EXIT_NONCONVERGED, EXIT_FAILED = 0, 1, 2, 3
COMMANDS = ("solve", "check", "map", "metric", "envelope")


class InputError(ValueError):
    """Bad command-line input or unreadable files (exit code 1)."""


@dataclass
class RunConfig:
    command: str
    instance: Optional[str] = None
    cost: Optional[str] = None
    tol: float = 1e-6
    max_iter: int = 5000
    seed: int = 0
    out: Optional[str] = None
    format: Optional[str] = None
    threads: int = 1
    coupling: Optional[str] = None
    samples: int = 500
    max_cycle: int = 4
    grid: Optional[str] = None
    resolution: int = 2048
    distances: Optional[str] = None
    radial_points: int = 50

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise InputError(f"unknown config fields: {', '.join(unknown)}")
        cfg = cls(**obj)
        if cfg.command not in COMMANDS:
            raise InputError(f"unknown command {cfg.command!r}")
        if cfg.format is None:
            cfg.format = "csv" if cfg.command == "envelope" else "json"
        if cfg.format not in ("json", "csv"):
            raise InputError("format must be json or csv")
        if cfg.tol <= 0 or cfg.max_iter < 1 or cfg.threads < 1:
            raise InputError("tol must be positive, max-iter and threads at least 1")
        return cfg


# --------------------------------------------------------------------------
# input helpers

_NAMED = re.compile(r"^\s*cone_power\s*\(\s*([^,]+),\s*([^,]+)(?:,\s*([^)]+))?\)\s*$")


def parse_cost(text: str) -> CostFunction:
    """ghk | hk | cone_power(p,q[,pi|pi/2]) | a JSON cost spec."""
    text = text.strip()
    try:
        if text.startswith("{"):
            return cost_from_spec(json.loads(text))
        if text in ("ghk", "hk"):
            return cost_from_spec({"kind": text})
        m = _NAMED.match(text)
        if m:
            return cost_from_spec({"kind": "cone_power", "p": float(m.group(1)), "q": float(m.group(2)),
                                   "truncation": (m.group(3) or "pi/2").strip()})
    except (ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise InputError(f"bad cost {text!r}: {exc}") from exc
    raise InputError(f"unknown cost {text!r}")


def _read_json(path: Optional[str], what: str) -> dict:
    if not path:
        raise InputError(f"--{what} is required")
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read {what} file: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"malformed JSON in {path}: {exc}") from exc


def load_instance(cfg: RunConfig) -> Instance:
    obj = _read_json(cfg.instance, "instance")
    cost = parse_cost(cfg.cost) if cfg.cost else None
    try:
        return Instance.from_json(obj, cost)
    except (ValueError, KeyError, TypeError) as exc:
        raise InputError(f"malformed instance: {exc}") from exc


def _floats(text: Optional[str], name: str) -> list:
    if not text:
        raise InputError(f"--{name} is required")
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise InputError(f"--{name} must be a comma separated list of numbers") from exc


# --------------------------------------------------------------------------
# output helpers

def _clean(obj):
    """Recursively convert numpy types and non-finite floats for JSON."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2) + "\n"


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(float(v)) if isinstance(v, (float, np.floating)) else v
                             for k, v in row.items()})
    return buf.getvalue()


def _emit(cfg: RunConfig, payload, rows: Optional[list] = None):
    text = rows_to_csv(rows) if (cfg.format == "csv" and rows is not None) else dumps(payload)
    if cfg.out:
        with open(cfg.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _options(cfg: RunConfig) -> SolveOptions:
    return SolveOptions(tol=cfg.tol, max_iter=cfg.max_iter, seed=cfg.seed)


# --------------------------------------------------------------------------
# commands

def cmd_solve(cfg: RunConfig) -> int:
    inst = load_instance(cfg)
    rep = solve_semicoupling(inst, _options(cfg))
    dual = dual_ascent(inst, DualOptions(max_iter=min(cfg.max_iter, 100)),
                       init=rep.phi1 if rep.phi1 is not None and np.all(np.isfinite(rep.phi1)) else None)
    try:
        cert = duality_gap(rep, dual)
        gap = cert.gap
    except ArithmeticError as exc:
        print(f"error: {exc}", file=sys.stderr)
        gap = math.nan
    alpha = to_homogeneous_coupling(rep.coupling, inst)
    payload = {
        "primal": rep.summary(),
        "dual": {"value": dual.value, "iterations": dual.iterations, "converged": dual.converged,
                 "potentials": dual.pair.to_json()},
        "gap": gap,
        "coupling": {"A": rep.coupling.A, "B": rep.coupling.B, "destroyed": rep.coupling.destroyed,
                     "created": rep.coupling.created, "homogeneous": alpha.to_json()},
        "decomposition": distinguished_decomposition(alpha, inst).to_json(),
        "instance_fingerprint": inst.fingerprint,
    }
    _emit(cfg, payload)
    if not rep.converged:
        print(f"solver did not converge: {rep.message}", file=sys.stderr)
        return EXIT_NONCONVERGED
    if not gap <= cfg.tol * (1.0 + abs(rep.value)):
        print(f"duality gap {gap} exceeds tolerance {cfg.tol}", file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


def cmd_check(cfg: RunConfig) -> int:
    inst = load_instance(cfg)
    obj = _read_json(cfg.coupling, "coupling")
    try:
        alpha = HomogeneousCoupling.from_json(obj, dims=(inst.space.dim, inst.space.dim))
    except (ValueError, TypeError) as exc:
        raise InputError(str(exc)) from exc
    if alpha.p != 1.0:
        raise InputError("check expects a 1-homogeneous coupling")
    payload: dict = {"atoms": len(alpha)}
    # marginals
    err = 0.0
    for side, mu in ((1, inst.mu1), (2, inst.mu2)):
        marg = homogeneous_marginal(alpha, side, inst.space)
        idx = mu.index_of(marg.positions) if len(marg) else np.zeros(0, int)
        if np.any(idx < 0):
            err = math.inf
            break
        total = np.zeros(len(mu))
        np.add.at(total, idx, marg.masses)
        if len(mu):
            err = max(err, float(np.max(np.abs(total - mu.masses) / mu.masses)))
    marginals_ok = err <= cfg.tol
    payload["marginals"] = {"passed": marginals_ok, "relative_error": err}
    if len(alpha) == 0:
        ok = marginals_ok
        payload.update({"monotonicity": {"passed": True}, "connectedness": {"passed": True},
                        "slackness": {"passed": True, "violations": []}, "passed": ok})
        _emit(cfg, payload)
        return EXIT_OK if ok else EXIT_FAILED
    G = SupportSet.from_coupling(alpha)
    mono = check_cyclical_monotonicity(G, inst.cost, cfg.max_cycle, tol=1e-8, space=inst.space,
                                       threads=cfg.threads)
    conn = check_connectedness(G, inst.cost, inst.space)
    violations: list = []
    slack_ok = False
    try:
        pot = walk_potential(G, inst.cost, space=inst.space)
        pair = pot.on_instance(inst)
        violations = complementary_slackness(alpha, pair, inst, tol=cfg.tol)
        slack_ok = not violations
        payload["potentials"] = pair.to_json()
    except (ValueError, ArithmeticError) as exc:
        violations = [{"kind": "potential", "message": str(exc)}]
    conn_json = conn.to_json()
    conn_json.pop("witness", None)
    ok = marginals_ok and mono.monotone and conn.connected and slack_ok
    payload.update({
        "monotonicity": dict(mono.to_json(), passed=mono.monotone),
        "connectedness": dict(conn_json, passed=conn.connected),
        "slackness": {"passed": slack_ok, "violations": violations},
        "passed": ok,
    })
    _emit(cfg, payload)
    return EXIT_OK if ok else EXIT_FAILED


def cmd_map(cfg: RunConfig) -> int:
    opts = _options(cfg)
    if cfg.grid:
        cost = parse_cost(cfg.cost or "ghk")
        rows = []
        for res in _floats(cfg.grid, "grid"):
            if res != int(res) or res < 2:
                raise InputError("grid resolutions must be integers >= 2")
            inst = gaussian_grid_instance(int(res), cost)
            rep = solve_semicoupling(inst, opts)
            _, mrep = extract_map(inst, PotentialPair(rep.phi1, rep.phi2), value=rep.value,
                                  coupling=rep.coupling)
            rows.append({"resolution": int(res), "uot_value": rep.value, "monge_cost": mrep.monge_cost,
                         "gap": mrep.gap, "marginal_error": mrep.marginal_error,
                         "converged": rep.converged})
        _emit(cfg, {"cost": cost.name, "refinement": rows}, rows)
        return EXIT_OK if all(r["converged"] for r in rows) else EXIT_NONCONVERGED
    inst = load_instance(cfg)
    if inst.cost.partial_inverse is None:
        raise InputError(f"{inst.cost.name} has no invertible partial map")
    rep = solve_semicoupling(inst, opts)
    try:
        tmap, mrep = extract_map(inst, PotentialPair(rep.phi1, rep.phi2), value=rep.value,
                                 coupling=rep.coupling)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    _emit(cfg, {"map": tmap.to_json(), "report": mrep.to_json()})
    if not rep.converged:
        return EXIT_NONCONVERGED
    return EXIT_FAILED if mrep.flagged else EXIT_OK


def cmd_metric(cfg: RunConfig) -> int:
    cost = parse_cost(cfg.cost or "ghk")
    if cost.metric_power is None:
        raise InputError(f"{cost.name} is not a power of a cone metric")
    rep = metric_axioms_test(cost, None, cfg.samples, cfg.seed, cfg.threads, opts=_options(cfg))
    _emit(cfg, rep.to_json(), [rep.to_json()])
    return EXIT_OK if rep.passed else EXIT_FAILED


def cmd_envelope(cfg: RunConfig) -> int:
    cost = parse_cost(cfg.cost or "cone_power(2,2,pi)")
    dists = _floats(cfg.distances or "3.141592653589793", "distances")
    if cfg.resolution < 2 or cfg.radial_points < 2:
        raise InputError("resolution and radial-points must be at least 2")
    radii = np.linspace(0.0, 2.0, cfg.radial_points)
    R1, R2 = np.meshgrid(radii, radii, indexing="ij")
    rows = []
    for d in dists:
        env = radial_cc_envelope(cost, [0.0], [d], cfg.resolution)
        H = np.asarray(cost.radial(R1, R2, np.full_like(R1, d)), float)
        E = np.asarray(env(R1, R2), float)
        for r1, r2, h, e in zip(R1.ravel(), R2.ravel(), H.ravel(), E.ravel()):
            rows.append({"d": d, "r1": float(r1), "r2": float(r2), "H": float(h), "ccH": float(e)})
    _emit(cfg, {"cost": cost.name, "resolution": cfg.resolution, "grid": rows}, rows)
    return EXIT_OK


HANDLERS = {"solve": cmd_solve, "check": cmd_check, "map": cmd_map, "metric": cmd_metric,
            "envelope": cmd_envelope}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="conicuot", description="Unbalanced optimal transport on the cone.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--instance", help="instance JSON: {mu1, mu2, cost}")
    ap.add_argument("--cost", help="ghk | hk | cone_power(p,q[,pi|pi/2]) | JSON spec (overrides the instance)")
    ap.add_argument("--tol", type=float, default=1e-6)
    ap.add_argument("--max-iter", type=int, default=5000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", help="output file (default stdout)")
    ap.add_argument("--format", choices=("json", "csv"), help="json (default) or csv (default for envelope)")
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--coupling", help="homogeneous coupling JSON (check)")
    ap.add_argument("--samples", type=int, default=500, help="random triples (metric)")
    ap.add_argument("--max-cycle", type=int, default=4, help="longest cycle checked (check)")
    ap.add_argument("--grid", help="comma separated grid resolutions for a refinement study (map)")
    ap.add_argument("--resolution", type=int, default=2048, help="envelope directions (envelope)")
    ap.add_argument("--distances", help="comma separated ground distances (envelope)")
    ap.add_argument("--radial-points", type=int, default=50, help="radii per axis (envelope)")
    return ap


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    try:
        cfg = RunConfig.from_dict(vars(ns))
        return HANDLERS[cfg.command](cfg)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
