"""Batch driver: ``resona <command> --config <path> [--out <dir>] [--threads <n>]``.

Configs are JSON, validated against :data:`CONFIG_SCHEMA` before any
computation. Every artifact carries the SHA-256 digest of the canonical
config (sorted keys, compact separators), which is also written next to the
results as ``config.json`` so the digest can be re-checked. CSV floats use
17 significant digits and rows are emitted in a fixed order, so repeated
runs produce identical files.

Exit codes: 0 success, 2 config error, 3 solver non-convergence, 4
precondition violation. Failures print one JSON object to stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import jsonschema
import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .bie3d import NearBoundaryError, SphereScene, assemble_A
from .capmat import PreconditionError, capacitance_matrix, leading_resonances, loglog_slope
from .nep import ConvergenceError, det_scan, find_resonance_cluster, hausdorff, scan_minima
from .oned import (
    Layout1D,
    RunConditionError,
    SingularDtNError,
    regular_case_residual,
    residue_extraction_1d,
    singular_case_split,
)
from .periodic import (
    Lattice3D,
    QuasiPeriodicContext,
    ThresholdError,
    band_sweep,
    bandgap_report,
    c_infinity,
    honeycomb_cone,
    honeycomb_dimer,
    neumann_branches,
    qp_residue_connection,
    sector_traces,
    tune_case2,
)
from .specfun import neumann_zeros

COMMANDS = (
    "scan-det",
    "cluster",
    "capmat",
    "converge",
    "oned-regular",
    "oned-singular",
    "oned-residue",
    "bands",
    "bandgap",
    "case2-residue",
    "honeycomb",
    "c-infinity",
)

_pos = {"type": "number", "exclusiveMinimum": 0}
_num_or_list = lambda item: {"oneOf": [item, {"type": "array", "items": item, "minItems": 1}]}  # noqa: E731
_vec3 = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}

CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "scene": {
            "type": "object",
            "properties": {
                "centers": {"type": "array", "items": _vec3, "minItems": 1},
                "radii": _num_or_list(_pos),
                "interior_speeds": _num_or_list(_pos),
                "background_speed": _pos,
                "contrasts": _num_or_list({"type": "number"}),
            },
            "required": ["centers", "radii"],
            "additionalProperties": False,
        },
        "lattice": {
            "type": "object",
            "properties": {
                "kind": {"enum": ["cubic", "hexagonal_prism", "general"]},
                "a": _pos,
                "height": _pos,
                "generators": {"type": "array", "items": _vec3, "minItems": 3, "maxItems": 3},
            },
            "required": ["kind"],
            "additionalProperties": False,
        },
        "oned": {
            "type": "object",
            "properties": {
                "lengths": {"type": "array", "items": _pos, "minItems": 1},
                "spacings": {"type": "array", "items": _pos},
                "interior_speeds": _num_or_list(_pos),
                "background_speed": _pos,
                "start": {"type": "number"},
            },
            "required": ["lengths", "spacings"],
            "additionalProperties": False,
        },
        "honeycomb": {
            "type": "object",
            "properties": {
                "radius": _pos,
                "a": _pos,
                "interior_speed": _pos,
                "background_speed": _pos,
            },
            "additionalProperties": False,
        },
        "L": {"type": "integer", "minimum": 1, "maximum": 16},
        "omega0": _pos,
        "branch": {"type": "integer", "minimum": 0},
        "delta": {"type": "number", "minimum": 0},
        "deltas": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
        "window": {
            "type": "object",
            "properties": {"start": {"type": "number"}, "stop": {"type": "number"},
                           "points": {"type": "integer", "minimum": 2}, "imag": {"type": "number"}},
            "required": ["start", "stop", "points"],
            "additionalProperties": False,
        },
        "radius": _pos,
        "alphas": {"type": "array", "items": _vec3, "minItems": 1},
        "alpha": _vec3,
        "path": {
            "type": "object",
            "properties": {"points": {"type": "array", "items": {"type": "string"}, "minItems": 2},
                           "count": {"type": "integer", "minimum": 2}},
            "required": ["points", "count"],
            "additionalProperties": False,
        },
        "grid": {"type": "integer", "minimum": 1},
        "J": {"type": "integer", "minimum": 2},
        "sector": {"enum": ["group", "a1g"]},
        "labelling": {"enum": ["sorted", "continuity"]},
        "run": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 2, "maxItems": 2},
        "k_window": {"type": "array", "items": _pos, "minItems": 2, "maxItems": 2},
        "xi_fractions": {"type": "array", "items": _pos, "minItems": 2},
        "direction": _vec3,
        "mu": _pos,
        "r_values": {"type": "array", "items": _pos, "minItems": 1},
        "v_b": _pos,
        "harmonic": {"type": "integer"},
        "quadrature_nodes": {"type": "integer", "minimum": 8},
        "ewald_tol": {"type": "number", "exclusiveMinimum": 0, "maximum": 1e-3},
        "threads": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "label": {"type": "string"},
    },
    "additionalProperties": False,
}

REQUIRED = {
    "scan-det": ["scene", "window"],
    "cluster": ["scene", "deltas"],
    "capmat": ["scene"],
    "converge": ["scene", "deltas"],
    "oned-regular": ["oned", "deltas"],
    "oned-singular": ["oned", "deltas", "run"],
    "oned-residue": ["oned", "run", "delta"],
    "bands": ["scene", "lattice", "delta"],
    "bandgap": ["scene", "lattice", "deltas"],
    "case2-residue": ["scene", "lattice"],
    "honeycomb": [],
    "c-infinity": ["mu", "r_values"],
}

EXIT_OK, EXIT_CONFIG, EXIT_CONVERGENCE, EXIT_PRECONDITION = 0, 2, 3, 4


class ConfigError(ValueError):
    """The run configuration is unreadable, invalid or inconsistent."""


# ---------------------------------------------------------------------------
# config handling


def canonical_config(config: dict) -> bytes:
    return json.dumps(config, sort_keys=True, separators=(",", ":")).encode()


def config_digest(config: dict) -> str:
    return hashlib.sha256(canonical_config(config)).hexdigest()


def load_config(path, command: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            config = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    validate_config(config, command)
    return config


def validate_config(config: dict, command: str) -> None:
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    schema = dict(CONFIG_SCHEMA, required=REQUIRED[command])
    try:
        jsonschema.validate(config, schema)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from exc


def build_scene(spec: dict) -> SphereScene:
    try:
        return SphereScene(
            np.asarray(spec["centers"], dtype=float),
            spec["radii"],
            spec.get("interior_speeds", 1.0),
            spec.get("contrasts", 0.0),
            spec.get("background_speed", 1.0),
        )
    except ValueError as exc:
        raise ConfigError(f"scene: {exc}") from exc


def build_lattice(spec: dict) -> Lattice3D:
    kind = spec["kind"]
    try:
        if kind == "cubic":
            return Lattice3D.cubic(spec.get("a", 1.0))
        if kind == "hexagonal_prism":
            a = spec.get("a", 1.0)
            return Lattice3D.hexagonal_prism(a, spec.get("height", a))
        if "generators" not in spec:
            raise ConfigError("lattice of kind 'general' needs generators")
        return Lattice3D(np.asarray(spec["generators"], dtype=float))
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise ConfigError(f"lattice: {exc}") from exc


def build_layout(spec: dict) -> Layout1D:
    try:
        return Layout1D.from_lengths(
            spec["lengths"],
            spec["spacings"],
            spec.get("interior_speeds", 1.0),
            0.0,
            spec.get("background_speed", 1.0),
            spec.get("start", 0.0),
        )
    except ValueError as exc:
        raise ConfigError(f"oned: {exc}") from exc


def _omega0(config: dict, scene: SphereScene, L: int) -> float:
    if "omega0" in config:
        return float(config["omega0"])
    return neumann_branches(scene, config.get("branch", 0) + 1, L)[config.get("branch", 0)]


def _context(config: dict, lattice: Lattice3D) -> QuasiPeriodicContext:
    return QuasiPeriodicContext(lattice, tol=config.get("ewald_tol", 1e-15))


def thread_count(cli_value: int | None, config: dict) -> int:
    """--threads wins over RESONA_THREADS, which wins over the config knob."""
    if cli_value is not None:
        return cli_value
    env = os.environ.get("RESONA_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError as exc:
            raise ConfigError(f"RESONA_THREADS must be a positive integer, got {env!r}") from exc
        if n < 1:
            raise ConfigError(f"RESONA_THREADS must be a positive integer, got {env!r}")
        return n
    return int(config.get("threads", 1))


# ---------------------------------------------------------------------------
# output


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return "%.17g" % float(x)


class Writer:
    """Writes digest-stamped artifacts into one output directory."""

    def __init__(self, out: Path, config: dict):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.digest = config_digest(config)
        self.files: list[str] = []
        (self.out / "config.json").write_bytes(canonical_config(config))

    def csv(self, name: str, header: list[str], rows) -> Path:
        path = self.out / name
        lines = [f"# config_sha256={self.digest}", ",".join(header)]
        lines += [",".join(_fmt(v) for v in row) for row in rows]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        self.files.append(name)
        return path

    def json(self, name: str, payload: dict) -> Path:
        path = self.out / name
        body = {"config_sha256": self.digest, **payload}
        path.write_text(json.dumps(body, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")
        self.files.append(name)
        return path


def _json_default(obj):
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _pair(z) -> list[float]:
    z = complex(z)
    return [z.real, z.imag]


# ---------------------------------------------------------------------------
# commands


def cmd_scan_det(config: dict, w: Writer) -> dict:
    scene = build_scene(config["scene"]).with_delta(config.get("delta", 0.0))
    L = config.get("L", 6)
    win = config["window"]
    grid = np.linspace(win["start"], win["stop"], win["points"]) + 1j * win.get("imag", 0.0)
    scan = det_scan(lambda z: assemble_A(z, scene, L).entries, grid)
    w.csv("scan.csv", ["omega_re", "omega_im", "log_abs_det"], [(z.real, z.imag, v) for z, v in scan])
    minima = sorted(scan_minima(scan), key=lambda z: z.real)
    w.json("minima.json", {"minima": [_pair(z) for z in minima]})
    return {"minima": len(minima)}


def _cluster_radius(config, omega0, delta):
    return config.get("radius", 10 * delta * omega0 + 1e-3)


def cmd_cluster(config: dict, w: Writer) -> dict:
    scene = build_scene(config["scene"])
    L = config.get("L", 6)
    omega0 = _omega0(config, scene, L)
    rows = []
    for d in config["deltas"]:
        res = find_resonance_cluster(omega0, d, scene, L, radius=_cluster_radius(config, omega0, d))
        for i, (z, r) in enumerate(zip(res.values, res.residual_norms)):
            rows.append((d, i, z.real, z.imag, r))
    w.csv("cluster.csv", ["delta", "root_index", "omega_re", "omega_im", "residual"], rows)
    return {"omega0": omega0, "roots": len(rows)}


def cmd_capmat(config: dict, w: Writer) -> dict:
    delta = config.get("delta", 1e-3)
    scene = build_scene(config["scene"]).with_delta(delta)
    L = config.get("L", 6)
    omega0 = _omega0(config, scene, L)
    cap = capacitance_matrix(omega0, scene, L)
    pred = leading_resonances(cap)
    payload = cap.to_dict()
    payload.update({
        "delta": delta,
        "predictions": [_pair(z) for z in pred.frequencies],
        "jordan_sizes": [int(q) for q in pred.jordan_sizes],
    })
    w.json("capmat.json", payload)
    return {"omega0": omega0, "modes": cap.C.shape[0], "symmetry_defect": cap.symmetry_defect}


def cmd_converge(config: dict, w: Writer) -> dict:
    scene = build_scene(config["scene"])
    L = config.get("L", 6)
    omega0 = _omega0(config, scene, L)
    unit = capacitance_matrix(omega0, scene.with_delta(1.0), L)
    lam = np.linalg.eigvals(unit.C)
    rows, ds, hs = [], [], []
    for d in config["deltas"]:
        lead = omega0 + d * lam
        exact = find_resonance_cluster(omega0, d, scene, L, radius=_cluster_radius(config, omega0, d)).values
        if exact.size == 0:
            raise ConvergenceError(f"no exact resonance found near omega0={omega0} at delta={d}")
        h = hausdorff(lead, exact)
        rows.append((d, h, lead.size, exact.size))
        ds.append(d)
        hs.append(h)
    w.csv("converge.csv", ["delta", "hausdorff", "lead_count", "exact_count"], rows)
    slope = loglog_slope(ds, hs) if len(ds) >= 2 else float("nan")
    w.json("converge.json", {"omega0": omega0, "slope": slope})
    return {"slope": slope}


def _oned_omega0(config: dict, layout: Layout1D) -> float:
    if "omega0" in config:
        return float(config["omega0"])
    return float(np.min(np.pi * layout.interior_speeds / layout.lengths))


_ONED_HEADER = ["delta", "regular_residual", "split_plus", "split_minus", "oracle_plus", "oracle_minus"]


def cmd_oned_regular(config: dict, w: Writer) -> dict:
    layout = build_layout(config["oned"])
    omega0 = _oned_omega0(config, layout)
    nan = float("nan")
    rows = []
    for d in config["deltas"]:
        resid, _, _ = regular_case_residual(layout, omega0, d)
        rows.append((d, resid, nan, nan, nan, nan))
    w.csv("oned.csv", _ONED_HEADER, rows)
    slope = loglog_slope([r[0] for r in rows], [r[1] for r in rows]) if len(rows) >= 2 else float("nan")
    w.json("oned_regular.json", {"omega0": omega0, "slope": slope})
    return {"slope": slope}


def cmd_oned_singular(config: dict, w: Writer) -> dict:
    layout = build_layout(config["oned"])
    omega0 = _oned_omega0(config, layout)
    run = tuple(config["run"])
    nan = float("nan")
    rows = []
    for d in config["deltas"]:
        (pp, pm), (op, om) = singular_case_split(layout, omega0, run, d)
        rows.append((d, nan, pp, pm, op.real, om.real))
    w.csv("oned.csv", _ONED_HEADER, rows)
    return {"omega0": omega0, "rows": len(rows)}


def cmd_oned_residue(config: dict, w: Writer) -> dict:
    layout = build_layout(config["oned"]).with_delta(config["delta"])
    omega0 = _oned_omega0(config, layout)
    numerical, formula, err = residue_extraction_1d(omega0, layout, tuple(config["run"]))
    w.json("oned_residue.json", {
        "omega0": omega0,
        "numerical": [[_pair(z) for z in row] for row in numerical],
        "formula": [[_pair(z) for z in row] for row in formula],
        "relative_error": err,
    })
    return {"relative_error": err}


def _alpha_list(config: dict, lattice: Lattice3D) -> np.ndarray:
    if "alphas" in config:
        return np.asarray(config["alphas"], dtype=float)
    if "path" in config:
        try:
            return lattice.path(config["path"]["points"], config["path"]["count"])
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"path: {exc}") from exc
    return lattice.brillouin_grid(config.get("grid", 7))


def cmd_bands(config: dict, w: Writer) -> dict:
    scene = build_scene(config["scene"])
    lattice = build_lattice(config["lattice"])
    L = config.get("L", 4)
    omega0 = _omega0(config, scene, L)
    ctx = _context(config, lattice)
    traces = sector_traces(scene, omega0, L, config.get("sector", "group"))
    sweep = band_sweep(_alpha_list(config, lattice), omega0, config["delta"], scene, L, ctx, traces,
                       config.get("labelling", "sorted"))
    w.csv("bands.csv", ["alpha_index", "alpha_x", "alpha_y", "alpha_z", "band_index", "omega"], sweep.rows())
    return {"omega0": omega0, "notes": sweep.notes, "max_hermiticity_defect": float(sweep.hermiticity_defects.max())}


def cmd_bandgap(config: dict, w: Writer) -> dict:
    scene = build_scene(config["scene"])
    lattice = build_lattice(config["lattice"])
    L = config.get("L", 4)
    ctx = _context(config, lattice)
    grid = np.asarray(config["alphas"], dtype=float) if "alphas" in config else config.get("grid", 7)
    report = bandgap_report(scene, lattice, config.get("J", 2), config["deltas"], grid, L, ctx,
                            config.get("sector", "group"))
    w.json("bandgap.json", report.to_dict())
    return {"delta_threshold": report.delta_threshold, "gamma": report.gamma}


def cmd_case2_residue(config: dict, w: Writer) -> dict:
    scene = build_scene(config["scene"])
    lattice = build_lattice(config["lattice"])
    L = config.get("L", 4)
    ctx = _context(config, lattice)
    alpha = np.asarray(config.get("alpha", [0.0, 0.0, 0.0]), dtype=float)
    tuned, k_d, omega0 = tune_case2(alpha, scene, L, ctx, tuple(config.get("k_window", (0.5, 3.0))),
                                    config.get("branch", 0))
    res = qp_residue_connection(alpha, omega0, tuned, L, ctx)
    w.json("case2_residue.json", {
        "alpha": alpha,
        "omega0": omega0,
        "k_dirichlet": k_d,
        "tuned_background_speed": tuned.background_speed,
        "numerical": [[_pair(z) for z in row] for row in res.numerical],
        "formula": [[_pair(z) for z in row] for row in res.formula],
        "relative_error": res.relative_error,
        "gamma": [[_pair(z) for z in row] for row in res.gamma],
    })
    return {"relative_error": res.relative_error}


def cmd_honeycomb(config: dict, w: Writer) -> dict:
    spec = config.get("honeycomb", {})
    scene, lattice = honeycomb_dimer(spec.get("radius", 0.15), spec.get("a", 1.0),
                                     spec.get("interior_speed", 1.0), spec.get("background_speed", 30.0))
    L = config.get("L", 4)
    if "omega0" in config:
        omega0 = float(config["omega0"])
    else:
        # lowest simple branch (ell = 0); every higher degree is degenerate
        omega0 = float(neumann_zeros(0, 1)[0]) * scene.interior_speeds[0] / scene.radii[0]
    ctx = _context(config, lattice)
    K = lattice.high_symmetry_point("K")
    fractions = np.asarray(config.get("xi_fractions", np.linspace(0.01, 0.1, 6)), dtype=float)
    cone = honeycomb_cone(scene, omega0, fractions * np.linalg.norm(K), L, ctx,
                          tuple(config.get("direction", (1.0, 0.0, 0.0))))
    w.json("honeycomb.json", cone.to_dict())
    return {"c_K": cone.c_K, "v_K": cone.v_K, "fit_r2": cone.fit_r2, "degeneracy_defect": cone.degeneracy_defect}


def cmd_c_infinity(config: dict, w: Writer) -> dict:
    harmonic = config.get("harmonic")
    v_b = config.get("v_b", 1.0)
    nodes = config.get("quadrature_nodes", 200)
    rows = []
    for r in config["r_values"]:
        a = c_infinity(config["mu"], r, v_b, harmonic, "analytic")
        q = c_infinity(config["mu"], r, v_b, harmonic, "quadrature", nodes)
        rows.append((r, a.real, a.imag, q.real, q.imag, abs(a - q)))
    w.csv("c_infinity.csv", ["r", "analytic_re", "analytic_im", "quadrature_re", "quadrature_im", "difference"], rows)
    return {"all_imag_positive": all(row[2] > 0 for row in rows)}


HANDLERS = {
    "scan-det": cmd_scan_det,
    "cluster": cmd_cluster,
    "capmat": cmd_capmat,
    "converge": cmd_converge,
    "oned-regular": cmd_oned_regular,
    "oned-singular": cmd_oned_singular,
    "oned-residue": cmd_oned_residue,
    "bands": cmd_bands,
    "bandgap": cmd_bandgap,
    "case2-residue": cmd_case2_residue,
    "honeycomb": cmd_honeycomb,
    "c-infinity": cmd_c_infinity,
}


# ---------------------------------------------------------------------------
# entry point


def _fail(code: int, exc: BaseException, command: str | None) -> int:
    payload = {"status": "error", "exit_code": code, "command": command, "error": type(exc).__name__, "message": str(exc)}
    trace = getattr(exc, "trace", None)
    if trace:
        payload["trace"] = [_pair(z) for z in trace[-10:]]
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


def run(command: str, config_path, out=None, threads: int | None = None) -> int:
    """Run one command; returns the process exit status."""
    try:
        config = load_config(config_path, command)
        n_threads = thread_count(threads, config)
        out_dir = Path(out) if out is not None else Path("results") / command
        writer = Writer(out_dir, config)
        start = time.perf_counter()
        with threadpool_limits(limits=n_threads):
            summary = HANDLERS[command](config, writer)
        record = {
            "experiment": command,
            "config_sha256": writer.digest,
            "tool_version": __version__,
            "threads": n_threads,
            "wall_clock_seconds": time.perf_counter() - start,
            "files": writer.files,
            "summary": summary,
        }
        (out_dir / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True, default=_json_default) + "\n")
        print(json.dumps({"status": "ok", "command": command, "out": str(out_dir), "summary": summary},
                         sort_keys=True, default=_json_default))
        return EXIT_OK
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc, command)
    except ConvergenceError as exc:
        return _fail(EXIT_CONVERGENCE, exc, command)
    except (PreconditionError, ThresholdError, SingularDtNError, RunConditionError, NearBoundaryError) as exc:
        return _fail(EXIT_PRECONDITION, exc, command)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="resona", description="Fabry-Perot resonance experiments.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--out", default=None, help="output directory (default results/<command>)")
    parser.add_argument("--threads", type=int, default=None, help="BLAS threads (overrides RESONA_THREADS)")
    args = parser.parse_args(argv)
    if args.threads is not None and args.threads < 1:
        parser.error("--threads must be positive")
    return run(args.command, args.config, args.out, args.threads)


if __name__ == "__main__":
    sys.exit(main())
