"""Configuration-driven batch driver.

Every verb reads one or more versioned JSON configs, runs one experiment per
config and writes into ``--out``:

    <name>.json          deterministic report (no timestamps)
    <name>.meta.json     sidecar with timestamps, runtime and versions
    <name>.checks.csv    one row per check: value, tolerance, pass/fail

The conformal verb also writes ``<name>.trajectory.jsonl`` and
``<name>.trajectory.csv``.  ``summary`` condenses reports into one CSV row per
experiment.  Exit codes: 0 success, 2 validation error, 3 convergence error.
"""
from __future__ import annotations

import copy
import csv
import io
import json
import math
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import click
import numpy as np

SCHEMA_VERSION = 1
EXIT_OK, EXIT_VALIDATION, EXIT_CONVERGENCE = 0, 2, 3
VERBS = ("mesh", "vhs", "nhc", "slice", "transversality", "conformal")
EXPERIMENTS = {"mesh": ("mesh",), "vhs": ("vhs",), "nhc": ("nhc",),
               "slice": ("slice", "kuranishi"), "transversality": ("transversality",),
               "conformal": ("conformal",)}

DEFAULT_PARAMETERS = {
    "mesh": {"kahler_tol": None, "holomorphic_weights": [2], "write_mesh": False},
    "vhs": {"residual_factor": 10.0},
    "nhc": {"q_norms": [0.1], "q_index": 0, "first_variation": False,
            "t_list": [0.05, 0.1, 0.2], "exponent_min": 1.8, "diagonal_tol": 1e-6},
    "slice": {"n_random": 5, "coefficient_norm": 1.0, "gauge_scale": 0.3,
              "equivariance_tol": 1e-10, "roundtrip_tol": 1e-6, "gauge_tol": 1e-6},
    "transversality": {"t_list": [0.05, 0.1], "finite_differences": True,
                       "fd_slope_min": 0.8, "rank_tol": 1e-8},
    "conformal": {"q_norms": [0.1], "q_index": 0, "hbar": 1.0,
                  "R_list": [1.0, 0.5, 0.25, 0.16, 0.08, 0.04, 0.02],
                  "slope_R": [0.02, 0.04, 0.08, 0.16], "distance_tol": 1e-4,
                  "slope_min": 1.8, "solver_tol": None},
}
_TOP_KEYS = {"schema_version", "experiment", "name", "surface", "vhs", "parameters", "seed"}


class ConfigError(ValueError):
    """Malformed or unsupported configuration."""


# ---------------------------------------------------------------------------
# Config handling
# ---------------------------------------------------------------------------

def _positive(x, what):
    if not isinstance(x, (int, float)) or isinstance(x, bool) or not x > 0 or not math.isfinite(x):
        raise ConfigError(f"{what} must be a positive number, got {x!r}")


def _complex(x, what):
    if isinstance(x, (int, float)) and not isinstance(x, bool):
        return complex(x)
    if isinstance(x, list) and len(x) == 2 and all(isinstance(t, (int, float)) for t in x):
        return complex(x[0], x[1])
    raise ConfigError(f"{what} must be a number or [re, im]")


def normalize_config(raw, verb, seed=None, source=None):
    """Validate a raw config dict and fill defaults. Raises ConfigError."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}")
    exp = raw.get("experiment", verb)
    if exp not in EXPERIMENTS[verb]:
        raise ConfigError(f"experiment {exp!r} does not match verb {verb!r}")

    surf = dict(raw.get("surface", {"kind": "bolza"}))
    kind = surf.get("kind")
    if kind == "torus":
        surf.setdefault("N", 16)
        N = surf["N"]
        if not isinstance(N, int) or N < 4 or N % 2:
            raise ConfigError("torus N must be an even integer >= 4")
        if set(surf) - {"kind", "N"}:
            raise ConfigError(f"unknown surface keys: {sorted(set(surf) - {'kind', 'N'})}")
    elif kind == "bolza":
        surf.setdefault("h", 0.05)
        surf.setdefault("degree", 4)
        _positive(surf["h"], "surface.h")
        if not isinstance(surf["degree"], int) or surf["degree"] < 1:
            raise ConfigError("surface.degree must be a positive integer")
        if set(surf) - {"kind", "h", "degree"}:
            raise ConfigError(f"unknown surface keys: {sorted(set(surf) - {'kind', 'h', 'degree'})}")
    else:
        raise ConfigError("surface.kind must be 'torus' or 'bolza'")
    if verb != "mesh" and kind != "bolza":
        raise ConfigError(f"verb {verb!r} needs a genus-2 surface (kind 'bolza')")

    vhs = dict(raw.get("vhs", {}))
    vhs.setdefault("kind", "fuchsian" if kind == "bolza" else "chain")
    vhs.setdefault("n", 2)
    vhs.setdefault("twist", None)
    if set(vhs) - {"kind", "n", "twist"}:
        raise ConfigError(f"unknown vhs keys: {sorted(set(vhs) - {'kind', 'n', 'twist'})}")
    if vhs["kind"] not in ("fuchsian", "chain") or (vhs["kind"] == "fuchsian") != (kind == "bolza"):
        raise ConfigError("vhs.kind must be 'fuchsian' on bolza and 'chain' on the torus")
    if not isinstance(vhs["n"], int) or not 2 <= vhs["n"] <= 4:
        raise ConfigError("vhs.n must be an integer in [2, 4]")
    tw = vhs["twist"]
    if tw is not None and (not isinstance(tw, list) or len(tw) != 4
                           or not all(isinstance(t, int) for t in tw)):
        raise ConfigError("vhs.twist must be null or a list of 4 integers")

    params = copy.deepcopy(DEFAULT_PARAMETERS[verb])
    given = raw.get("parameters", {})
    if not isinstance(given, dict):
        raise ConfigError("parameters must be an object")
    unknown = set(given) - set(params)
    if unknown:
        raise ConfigError(f"unknown parameters for {verb}: {sorted(unknown)}")
    params.update(copy.deepcopy(given))
    _validate_parameters(verb, params, vhs["n"])

    s = raw.get("seed", 0) if seed is None else seed
    if not isinstance(s, int) or isinstance(s, bool) or s < 0:
        raise ConfigError("seed must be a non-negative integer")
    name = raw.get("name") or (Path(source).stem if source else exp)
    if not isinstance(name, str) or not name or any(c in name for c in "/\\"):
        raise ConfigError("name must be a plain non-empty string")
    return {"schema_version": SCHEMA_VERSION, "experiment": exp, "name": name,
            "surface": surf, "vhs": vhs, "parameters": params, "seed": s}


def _validate_parameters(verb, p, n):
    for key in ("kahler_tol", "residual_factor", "exponent_min", "diagonal_tol",
                "coefficient_norm", "gauge_scale", "equivariance_tol", "roundtrip_tol",
                "gauge_tol", "fd_slope_min", "rank_tol", "distance_tol", "slope_min",
                "solver_tol"):
        if key in p and p[key] is not None:
            _positive(p[key], f"parameters.{key}")
    for key in ("t_list", "R_list", "slope_R"):
        if key in p:
            if not isinstance(p[key], list) or not p[key]:
                raise ConfigError(f"parameters.{key} must be a non-empty list")
            for t in p[key]:
                _positive(t, f"parameters.{key} entries")
    if "t_list" in p and any(t > 0.2 for t in p["t_list"]):
        raise ConfigError("parameters.t_list entries must lie in (0, 0.2]")
    if "R_list" in p:
        R = p["R_list"]
        if any(r > 1 for r in R) or any(b >= a for a, b in zip(R, R[1:])):
            raise ConfigError("parameters.R_list must be strictly decreasing in (0, 1]")
    if "q_norms" in p:
        q = p["q_norms"]
        if not isinstance(q, list) or len(q) > n - 1:
            raise ConfigError(f"parameters.q_norms must be a list of at most {n - 1} numbers")
        for x in q:
            if not isinstance(x, (int, float)) or x < 0:
                raise ConfigError("parameters.q_norms entries must be non-negative")
    if "q_index" in p and (not isinstance(p["q_index"], int) or p["q_index"] < 0):
        raise ConfigError("parameters.q_index must be a non-negative integer")
    if "hbar" in p:
        hb = _complex(p["hbar"], "parameters.hbar")
        if not 0.1 <= abs(hb) <= 10:
            raise ConfigError("parameters.hbar must satisfy 0.1 <= |hbar| <= 10")
    if "n_random" in p and (not isinstance(p["n_random"], int) or p["n_random"] < 1):
        raise ConfigError("parameters.n_random must be a positive integer")
    if "holomorphic_weights" in p:
        w = p["holomorphic_weights"]
        if not isinstance(w, list) or not all(isinstance(x, int) and x >= 1 for x in w):
            raise ConfigError("parameters.holomorphic_weights must be positive integers")
    for key in ("write_mesh", "first_variation", "finite_differences"):
        if key in p and not isinstance(p[key], bool):
            raise ConfigError(f"parameters.{key} must be a boolean")


def load_config(path, verb, seed=None):
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read {path}: {err}") from err
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON ({err})") from err
    return normalize_config(raw, verb, seed=seed, source=path)


# ---------------------------------------------------------------------------
# JSON helpers
# ---------------------------------------------------------------------------

def jsonable(x):
    """Plain-JSON form: complex -> [re, im], non-finite floats -> strings."""
    if isinstance(x, dict):
        return {str(k): jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return jsonable(x.tolist())
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (complex, np.complexfloating)):
        return [jsonable(float(x.real)), jsonable(float(x.imag))]
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else ("inf" if x > 0 else "-inf" if x < 0 else "nan")
    return x


def dumps(obj):
    return json.dumps(jsonable(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _check(name, value, tol, op="<"):
    ops = {"<": lambda a, b: a < b, "<=": lambda a, b: a <= b, ">=": lambda a, b: a >= b,
           "==": lambda a, b: a == b}
    v = value if isinstance(value, (int, np.integer)) and op == "==" else float(value)
    return {"name": name, "value": v, "tolerance": tol, "comparison": op,
            "passed": bool(ops[op](v, tol))}


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

def build_surface(cfg):
    from .surface import build_bolza_octagon, build_torus_spectral
    s = cfg["surface"]
    if s["kind"] == "torus":
        return build_torus_spectral(s["N"])
    return build_bolza_octagon(s["h"], degree=s["degree"])


def build_vhs(cfg, mesh, harmonic=True):
    from .bundle import make_chain, make_fuchsian
    n = cfg["vhs"]["n"]
    if cfg["vhs"]["kind"] == "chain":
        return make_chain(mesh, [0] * n, [1.0] * (n - 1))
    return make_fuchsian(mesh, n, twist=cfg["vhs"]["twist"], harmonic=harmonic)


def _differentials(v, norms, index):
    from .surface import TwistedSection, canonical_holomorphic_basis
    norms = list(norms) + [0.0] * (v.rank - 1 - len(norms))
    qs = []
    for k, nrm in enumerate(norms):
        w = k + 2
        B = canonical_holomorphic_basis(v.mesh, w)
        q = B[:, index % B.shape[1]]
        qs.append(q * nrm / TwistedSection(v.mesh, float(w), q).norm())
    return qs


def _test_fields(ctx, rng):
    """Random smooth master fields (dz-bar and dz coefficients) of the right weights."""
    from .surface import smooth_section
    n, mesh = ctx.n, ctx.mesh
    mb = np.zeros((mesh.n_nodes, n, n), complex)
    mp = np.zeros_like(mb)
    for k in range(n):
        for i in range(n):
            w = int(ctx.wts[k, i])
            cb, cp = rng.normal(size=2) + 1j * rng.normal(size=2)
            mb[:, k, i] = cb * smooth_section(mesh, w, 1, k + i)
            mp[:, k, i] = cp * smooth_section(mesh, w + 1, 0, k + 2 * i)
    return mb, mp


def run_mesh(cfg, rng, out):
    from .surface import dbar_kernel
    mesh = build_surface(cfg)
    p = cfg["parameters"]
    area_ref = 1.0 if mesh.genus == 1 else 4 * np.pi * (mesh.genus - 1)
    res = {"genus": mesh.genus, "kind": mesh.kind, "h": mesh.h, "n_nodes": mesh.n_nodes,
           "area": mesh.area, "area_reference": area_ref}
    checks = [_check("area_relative_error", abs(mesh.area - area_ref) / area_ref, 1e-3)]
    v = build_vhs(cfg, mesh)
    ctx = v.context
    if mesh.genus == 1:
        L = mesh.n_nodes
        mb = rng.normal(size=(L, ctx.n, ctx.n)) + 1j * rng.normal(size=(L, ctx.n, ctx.n))
        mp = rng.normal(size=(L, ctx.n, ctx.n)) + 1j * rng.normal(size=(L, ctx.n, ctx.n))
    else:
        mb, mp = _test_fields(ctx, rng)
    d, r = ctx.kahler_discrepancy(mb, mp)
    tol = p["kahler_tol"] or (1e-10 if mesh.genus == 1 else 10 * mesh.h ** 2)
    res["kahler"] = {"discrepancy": d, "reference_norm": r, "relative": d / r}
    checks.append(_check("kahler_identity_relative", d / r, tol))
    if mesh.genus >= 2:
        res["holomorphic_dimensions"] = {}
        for w in p["holomorphic_weights"]:
            rep = dbar_kernel(mesh, w, want_basis=False)
            expect = (2 * w - 1) * (mesh.genus - 1) if w >= 2 else mesh.genus
            res["holomorphic_dimensions"][str(w)] = {"dimension": rep.dimension, "expected": expect,
                                                      "gap": rep.gap}
            checks.append(_check(f"holomorphic_dimension_w{w}", rep.dimension, expect, "=="))
    files = {}
    if p["write_mesh"]:
        files["mesh.json"] = mesh.to_json()
    return res, checks, files


def run_vhs(cfg, rng, out):
    from .bundle import HiggsPoint, check_vhs_stability_chain, with_harmonic_metric
    from .nahc import residual_norm, zero_scale
    from .strata import expected_dimension
    mesh = build_surface(cfg)
    raw = build_vhs(cfg, mesh, harmonic=False)
    n = raw.rank
    z = np.zeros((raw.context.L, n, n), complex)
    r0 = residual_norm(HiggsPoint(raw, z, z.copy()), zero_scale(raw))
    v = with_harmonic_metric(raw)
    r1 = residual_norm(HiggsPoint(v, z, z.copy()), zero_scale(v))
    tol = cfg["parameters"]["residual_factor"] * mesh.h ** 2
    res = {"vhs": v.summary(), "h": mesh.h, "n_nodes": mesh.n_nodes,
           "stable": check_vhs_stability_chain(v),
           "hyperbolic_metric_residual": r0, "corrected_metric_residual": r1,
           "correction_sup": float(np.abs(v.metric_correction).max()),
           "expected_dim_H1_plus": expected_dimension(v)}
    checks = [_check("hyperbolic_metric_residual", r0, tol),
              _check("stable", int(bool(res["stable"])), 1, "==")]
    return res, checks, {}


def _section_point(cfg, v):
    from .bundle import hitchin_section
    p = cfg["parameters"]
    qs = _differentials(v, p["q_norms"], p["q_index"])
    return hitchin_section(v, qs)


def run_nhc(cfg, rng, out):
    from .bundle import make_fuchsian
    from .nahc import flatness_residual, flatness_tolerance, first_variation_check, nhc_map, solve_harmonic_metric
    from .strata import SliceVector
    mesh = build_surface(cfg)
    v = make_fuchsian(mesh, cfg["vhs"]["n"], twist=cfg["vhs"]["twist"])
    p = cfg["parameters"]
    pt = _section_point(cfg, v)
    m = solve_harmonic_metric(pt)
    D = nhc_map(pt, m)
    flat = flatness_residual(D)
    ftol = flatness_tolerance(pt, m)
    from .nahc import default_tolerance
    res = {"q_norms": p["q_norms"], "residual": m.residual, "iterations": m.iterations,
           "history": m.history, "sup_norm_f": m.sup_norm(),
           "off_diagonal": float(np.abs(m.f * (1 - np.eye(v.rank))).max()),
           "flatness": flat, "flatness_tolerance": ftol}
    checks = [_check("harmonic_residual", m.residual, default_tolerance(mesh), "<="),
              _check("flatness", flat, ftol)]
    if v.rank == 2:
        checks.append(_check("diagonal_preserved", res["off_diagonal"], p["diagonal_tol"]))
    if p["first_variation"]:
        u = SliceVector(v, pt.beta, pt.phi)
        expo, norms = first_variation_check(v, u, tuple(p["t_list"]), return_norms=True)
        res["first_variation"] = {"t_list": p["t_list"], "norms": norms, "exponent": expo}
        checks.append(_check("first_variation_exponent", expo, p["exponent_min"], ">="))
    return res, checks, {}


def run_slice(cfg, rng, out):
    from .bundle import make_fuchsian
    from .strata import (classify, cstar_on_slice, expected_dimension, gauge_action, gauge_fix_to_slice,
                         harmonic_basis, kuranishi, kuranishi_inverse, stabilizer_check)
    from .surface import smooth_section
    mesh = build_surface(cfg)
    v = make_fuchsian(mesh, cfg["vhs"]["n"], twist=cfg["vhs"]["twist"])
    ctx = v.context
    p = cfg["parameters"]
    hb = harmonic_basis(v)
    G = np.array([[ctx.ip1(a.pair, b.pair) for b in hb.flat()] for a in hb.flat()])
    res = {"dims": hb.dims, "dimension": hb.dimension, "expected": expected_dimension(v),
           "fingerprint": hb.fingerprint(),
           "gaps": {j: r.gap for j, r in hb.reports.items()},
           "orthonormality": float(np.abs(G - np.eye(len(G))).max())}
    checks = [_check("dim_H1_plus", hb.dimension, expected_dimension(v), "=="),
              _check("orthonormality", res["orthonormality"], 1e-10)]
    rt, eq, gauge, idem = [], [], [], []
    n = v.rank
    for _ in range(p["n_random"]):
        c = rng.normal(size=hb.dimension) + 1j * rng.normal(size=hb.dimension)
        c *= p["coefficient_norm"] / np.linalg.norm(c)
        u = kuranishi_inverse(v, c, hb)
        rt.append(float(np.abs(kuranishi(v, u, hb) - c).max()))
        xi = complex(np.exp(rng.uniform(-1, 0.5) + 1j * rng.uniform(0, 2 * np.pi)))
        k0 = kuranishi(v, u, hb, check=False)
        k1 = kuranishi(v, cstar_on_slice(u, xi), hb, check=False)
        eq.append(float(np.abs(k1 - xi ** hb.grades * k0).max()))
        classify(v, u)
        u0, g0 = gauge_fix_to_slice(v, u.beta, u.phi)
        idem.append(float(np.abs(g0 - np.eye(n)).max()))
        f0 = np.zeros((ctx.Nm, n, n), complex)
        for k in range(n):
            for i in range(k + 1, n):
                coef = p["gauge_scale"] * (rng.normal() + 1j * rng.normal())
                f0[:, k, i] = coef * smooth_section(mesh, int(ctx.wts[k, i]), 0, k + i)
        bb, pp = gauge_action(v, u0.beta, u0.phi, f0)
        rep = {}
        u1, _ = gauge_fix_to_slice(v, bb, pp, report=rep)
        gauge.append({"relative_error": float((u1 - u0).norm() / u0.norm()),
                      "grade_steps": len(rep["steps"])})
    res["kuranishi_roundtrip"] = rt
    res["equivariance"] = eq
    res["gauge_roundtrip"] = gauge
    res["idempotence"] = idem
    stab = stabilizer_check(v)
    res["stabilizer"] = stab
    checks += [_check("kuranishi_roundtrip", max(rt), p["roundtrip_tol"]),
               _check("kuranishi_equivariance", max(eq), p["equivariance_tol"]),
               _check("gauge_roundtrip", max(g["relative_error"] for g in gauge), p["gauge_tol"]),
               _check("gauge_idempotence", max(idem), p["gauge_tol"])]
    return res, checks, {}


def run_transversality(cfg, rng, out):
    from .bundle import make_fuchsian
    from .strata import harmonic_basis
    from .twistor import transversality_check
    mesh = build_surface(cfg)
    v = make_fuchsian(mesh, cfg["vhs"]["n"], twist=cfg["vhs"]["twist"])
    p = cfg["parameters"]
    rep = transversality_check(v, harmonic_basis(v), t_list=tuple(p["t_list"]),
                               finite_differences=p["finite_differences"], rank_tol=p["rank_tol"])
    checks = [_check("rank", rep["rank"], rep["expected_rank"], "==")]
    if p["finite_differences"] and len(p["t_list"]) > 1:
        worst = min(d["slope"] for d in rep["directions"])
        checks.append(_check("fd_slope", worst, p["fd_slope_min"], ">="))
    return rep, checks, {}


def run_conformal(cfg, rng, out):
    from .bundle import make_fuchsian, oper_point
    from .conformal import conformal_trajectory
    from .strata import SliceVector
    from .twistor import hod_cstar, p_lambda
    mesh = build_surface(cfg)
    v = make_fuchsian(mesh, cfg["vhs"]["n"], twist=cfg["vhs"]["twist"])
    p = cfg["parameters"]
    hbar = _complex(p["hbar"], "hbar")
    pt = _section_point(cfg, v)
    u = SliceVector(v, pt.beta, pt.phi)
    traj = conformal_trajectory(v, u, hbar, p["R_list"], tol=p["solver_tol"])
    recs = traj.records()
    lim = traj.limit
    ph = hod_cstar(p_lambda(v, u, hbar), 1 / hbar)
    limit_vs_p = max(float(np.abs(lim.a_z - ph.nabla_op).max()),
                     float(np.abs(lim.a_zb - ph.dbar_op).max()))
    res = {"hbar": hbar, "samples": recs, "failure": traj.failure,
           "largest_solved_R": recs[0]["R"] if recs else None,
           "smallest_solved_R": recs[-1]["R"] if recs else None,
           "distance_slope": traj.distance_slope(p["slope_R"]),
           "monotone_below": traj.monotone_below() if recs else None,
           "limit_vs_p_hbar": limit_vs_p}
    if cfg["vhs"]["n"] == 2 and abs(hbar - 1) == 0:
        op = oper_point(v, _differentials(v, p["q_norms"], p["q_index"]))
        res["limit_vs_oper"] = max(float(np.abs(lim.a_z - op.nabla_op).max()),
                                   float(np.abs(lim.a_zb - op.dbar_op).max()))
    final = recs[-1]["distance"] if recs else np.inf
    checks = [_check("final_distance", final, p["distance_tol"]),
              _check("distance_slope", res["distance_slope"], p["slope_min"], ">="),
              _check("limit_vs_p_hbar", limit_vs_p, p["distance_tol"])]
    if recs and recs[-1]["R"] != p["R_list"][-1]:
        checks.append(_check("reached_R_min", recs[-1]["R"], p["R_list"][-1], "=="))
    files = {"trajectory.jsonl": "".join(json.dumps(jsonable(r), sort_keys=True) + "\n"
                                         for r in recs),
             "trajectory.csv": _csv(recs, ["R", "residual", "flatness", "distance",
                                           "iterations", "scale_norm"])}
    if traj.failure is not None:
        res["_exit"] = EXIT_CONVERGENCE
    return res, checks, files


RUNNERS = {"mesh": run_mesh, "vhs": run_vhs, "nhc": run_nhc, "slice": run_slice,
           "kuranishi": run_slice, "transversality": run_transversality, "conformal": run_conformal}


def _csv(rows, fields):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: jsonable(r.get(k)) for k in fields})
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------

def _exit_for(err):
    from .bundle import DomainError, UnsupportedError, ValidationError
    from .surface import ConfigurationError, ConvergenceError
    if isinstance(err, (ValidationError, DomainError, UnsupportedError, ConfigurationError,
                        ConfigError)):
        return EXIT_VALIDATION
    if isinstance(err, (ConvergenceError, FloatingPointError, np.linalg.LinAlgError)):
        return EXIT_CONVERGENCE
    raise err


def run(cfg, out):
    """Run one normalized config, write its files into ``out``; return the exit code."""
    out = Path(out)
    rng = np.random.default_rng(cfg["seed"])
    started = datetime.now(timezone.utc)
    t0 = time.perf_counter()
    results, checks, files, error = {}, [], {}, None
    code = EXIT_OK
    try:
        results, checks, files = RUNNERS[cfg["experiment"]](cfg, rng, out)
        code = results.pop("_exit", EXIT_OK)
    except Exception as err:  # noqa: BLE001 - mapped to exit codes, unknown errors re-raised
        code = _exit_for(err)
        error = {"type": type(err).__name__, "message": str(err)}
    if error is not None:
        status = "error"
    else:
        status = "pass" if checks and all(c["passed"] for c in checks) else "fail"
    report = {"schema_version": SCHEMA_VERSION, "experiment": cfg["experiment"],
              "name": cfg["name"], "config": cfg, "status": status, "exit_code": code,
              "checks": checks, "results": results, "error": error}
    out.mkdir(parents=True, exist_ok=True)
    stem = out / cfg["name"]
    Path(f"{stem}.json").write_text(dumps(report))
    Path(f"{stem}.checks.csv").write_text(
        _csv(checks, ["name", "value", "comparison", "tolerance", "passed"]))
    for suffix, text in files.items():
        Path(f"{stem}.{suffix}").write_text(text)
    meta = {"started": started.isoformat(), "finished": datetime.now(timezone.utc).isoformat(),
            "runtime_seconds": time.perf_counter() - t0, "python": platform.python_version(),
            "numpy": np.__version__, "host": platform.node(), "pid": os.getpid()}
    Path(f"{stem}.meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    return code


def _run_path(args):
    cfg, out = args
    return run(cfg, out)


def run_many(configs, out, jobs=1):
    if jobs > 1 and len(configs) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            codes = list(ex.map(_run_path, [(c, out) for c in configs]))
    else:
        codes = [run(c, out) for c in configs]
    return max(codes, default=EXIT_OK)


# ---------------------------------------------------------------------------
# Summary
# ---------------------------------------------------------------------------

SUMMARY_FIELDS = ["experiment", "name", "status", "exit_code", "n_checks", "n_failed",
                  "failed_checks", "largest_solved_R", "error"]


def report_summary(paths):
    """One row per report, sorted by (experiment, name). Raises ConfigError on bad input."""
    rows = []
    for path in paths:
        try:
            rep = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read report {path}: {err}") from err
        if not isinstance(rep, dict) or rep.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(f"{path} is not a report of schema version {SCHEMA_VERSION}")
        checks = rep.get("checks", [])
        failed = [c["name"] for c in checks if not c["passed"]]
        res = rep.get("results") or {}
        largest = res.get("smallest_solved_R") if rep.get("experiment") == "conformal" else None
        err = rep.get("error")
        rows.append({"experiment": rep["experiment"], "name": rep["name"],
                     "status": rep["status"], "exit_code": rep["exit_code"],
                     "n_checks": len(checks), "n_failed": len(failed),
                     "failed_checks": ";".join(failed), "largest_solved_R": largest,
                     "error": "" if err is None else f"{err['type']}: {err['message']}"})
    rows.sort(key=lambda r: (r["experiment"], r["name"]))
    return rows


# ---------------------------------------------------------------------------
# Click interface
# ---------------------------------------------------------------------------

@click.group()
def main():
    """Numerical experiments on Higgs bundles, slices and conformal limits."""


def _make_verb(verb):
    @click.option("--config", "configs", multiple=True, required=True,
                  type=click.Path(dir_okay=False), help="JSON config (repeatable).")
    @click.option("--out", required=True, type=click.Path(file_okay=False),
                  help="Output directory.")
    @click.option("--jobs", default=1, show_default=True, type=click.IntRange(1),
                  help="Run independent configs in parallel processes.")
    @click.option("--seed", default=None, type=click.IntRange(0), help="Override the config seed.")
    def cmd(configs, out, jobs, seed):
        try:
            cfgs = [load_config(p, verb, seed) for p in configs]
        except ConfigError as err:
            click.echo(f"error: {err}", err=True)
            sys.exit(EXIT_VALIDATION)
        names = [c["name"] for c in cfgs]
        if len(set(names)) != len(names):
            click.echo("error: config names must be distinct", err=True)
            sys.exit(EXIT_VALIDATION)
        code = run_many(cfgs, out, jobs)
        for c in cfgs:
            rep = json.loads((Path(out) / f"{c['name']}.json").read_text())
            click.echo(f"{c['name']}: {rep['status']}")
        sys.exit(code)

    cmd.__doc__ = f"Run the {verb} experiment for each config."
    main.command(name=verb)(cmd)


for _verb in VERBS:
    _make_verb(_verb)


@main.command()
@click.argument("reports", nargs=-1, required=True, type=click.Path(dir_okay=False))
@click.option("--out", default=None, type=click.Path(dir_okay=False),
              help="CSV file to write (stdout when omitted).")
def summary(reports, out):
    """Condense report JSON files into one CSV row per experiment."""
    try:
        rows = report_summary(reports)
    except ConfigError as err:
        click.echo(f"error: {err}", err=True)
        sys.exit(EXIT_VALIDATION)
    text = _csv(rows, SUMMARY_FIELDS)
    if out:
        Path(out).write_text(text)
    else:
        click.echo(text, nl=False)


if __name__ == "__main__":
    main()
