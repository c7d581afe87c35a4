"""Batch front end: reproducible experiment runs driven by JSON configs.

Each subcommand reads one strict config file (unknown keys are errors),
resolves defaults, and stamps every output with the schema version, the
sha256 digest of the resolved config, and the config itself.  Outputs are
written atomically and contain nothing nondeterministic; wall-clock timing
goes to stderr only, so identical config plus seed gives identical bytes.

Exit codes: 0 ok, 1 verification failure, 2 config error, 3 renormalization
trajectory not converged, 4 solver iteration cap, 5 grid too coarse.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from conelab.blowup import (
    CONE_INCREMENT,
    DegenerateFit,
    EmptySurface,
    blowup_sequence,
    cone_fit,
    free_boundary,
    project,
    projection_laws_check,
    sublevel_measure,
    to_ply,
)
from conelab.grids import ScalarGrid, TooCoarse, _write_atomic, load_grid, save_grid
from conelab.pde import (
    AffineSource,
    BallDomain,
    BoxDomain,
    ConstantBoundary,
    ConstantSource,
    GridObstacle,
    ManufacturedField,
    MaxIterations,
    ProblemSpec,
    ProfileObstacle,
    QuadraticObstacle,
    RadialSource,
    ZeroObstacle,
    manufactured,
    residual_potential,
    solve,
    solve_interval,
)
from conelab.potential import (
    growth_margin,
    indicator_moments,
    kappa,
    potential_projection,
)
from conelab.quadform import (
    QuadraticForm,
    canonicalize,
    diagonal_profile,
    random_form,
    rotate,
    sup_distance,
)
from conelab.renorm import BoundedNoise, NotConverged, increment_bounds, rate_fit, simulate
from conelab.sphere import build_quadrature, degree2_form, expand

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """The config file is missing, malformed, or violates the schema."""


# ---------------------------------------------------------------------------
# config plumbing

def _load_json(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(
            f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return data


def _command_block(path: str | None, command: str) -> dict:
    """Extract and envelope-check the command's parameter block."""
    if path is None:
        return {}
    data = _load_json(path)
    unknown = set(data) - {"schema_version", command}
    if unknown:
        raise ConfigError(
            f"unknown top-level key(s) for '{command}': {sorted(unknown)}")
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(
            f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    block = data.get(command, {})
    if not isinstance(block, dict):
        raise ConfigError(f"'{command}' must be a JSON object")
    return block


class _Schema:
    """Strict key-by-key consumption of one config block."""

    def __init__(self, name: str, block: dict):
        self.name = name
        self.left = dict(block)

    def take(self, key, default):
        return self.left.pop(key, default)

    def real(self, key, default, lo=None, hi=None):
        v = self.take(key, default)
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{self.name}.{key} must be a number")
        v = float(v)
        if lo is not None and v < lo:
            raise ConfigError(f"{self.name}.{key} must be >= {lo}")
        if hi is not None and v > hi:
            raise ConfigError(f"{self.name}.{key} must be <= {hi}")
        return v

    def integer(self, key, default, lo=None):
        v = self.take(key, default)
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(f"{self.name}.{key} must be an integer")
        if lo is not None and v < lo:
            raise ConfigError(f"{self.name}.{key} must be >= {lo}")
        return int(v)

    def text(self, key, default, choices=None):
        v = self.take(key, default)
        if not isinstance(v, str):
            raise ConfigError(f"{self.name}.{key} must be a string")
        if choices is not None and v not in choices:
            raise ConfigError(
                f"{self.name}.{key} must be one of {sorted(choices)}")
        return v

    def real_list(self, key, default, lo=None, hi=None):
        v = self.take(key, default)
        if isinstance(v, (int, float)) and not isinstance(v, bool):
            v = [v]
        if not isinstance(v, list):
            raise ConfigError(f"{self.name}.{key} must be a number or list")
        out = []
        for item in v:
            if isinstance(item, bool) or not isinstance(item, (int, float)):
                raise ConfigError(
                    f"{self.name}.{key} must contain numbers only")
            item = float(item)
            if lo is not None and item < lo or hi is not None and item > hi:
                raise ConfigError(
                    f"{self.name}.{key} entries must lie in [{lo}, {hi}]")
            out.append(item)
        return out

    def block(self, key, default):
        v = self.take(key, default)
        if not isinstance(v, dict):
            raise ConfigError(f"{self.name}.{key} must be a JSON object")
        return v

    def done(self):
        if self.left:
            raise ConfigError(
                f"unknown key(s) in {self.name}: {sorted(self.left)}")


def _digest(resolved: dict) -> str:
    blob = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _stamp_comment(resolved: dict, digest: str) -> str:
    compact = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return (f"schema_version={SCHEMA_VERSION} "
            f"config_digest={digest} config={compact}")


# ---------------------------------------------------------------------------
# serialization

def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return repr(float(v))


def _write_csv(path: str, header, rows, resolved: dict, digest: str) -> None:
    buf = io.StringIO()
    buf.write("# " + _stamp_comment(resolved, digest) + "\r\n")
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    _write_atomic(path, buf.getvalue().encode())


def _jsonsafe(v):
    if isinstance(v, dict):
        return {k: _jsonsafe(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonsafe(x) for x in v]
    if isinstance(v, np.ndarray):
        return [_jsonsafe(x) for x in v.tolist()]
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else None
    return v


def _write_json(path: str, payload: dict, resolved: dict, digest: str) -> None:
    body = {
        "schema_version": SCHEMA_VERSION,
        "config_digest": digest,
        "config": resolved,
    }
    body.update(_jsonsafe(payload))
    _write_atomic(path, (json.dumps(body, sort_keys=True, indent=2)
                         + "\n").encode())


def _pmap(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# coeffs

def _coeff_row(task):
    delta, level = task
    m = indicator_moments(delta, level=level)
    return (m.delta, m.mx, m.my, m.mz, m.total, m.kappa,
            4.0 * m.delta - m.kappa, m.kappa - 2.0 * m.delta)


def cmd_coeffs(args) -> int:
    s = _Schema("coeffs", _command_block(args.config, "coeffs"))
    deltas = s.real_list("deltas", np.linspace(0.0, 0.5, 101).tolist(),
                         lo=0.0, hi=0.5)
    level = s.integer("level", 64, lo=8)
    filename = s.text("filename", "coeffs.csv")
    s.done()
    if not deltas:
        raise ConfigError("coeffs.deltas is empty")
    resolved = {"schema_version": SCHEMA_VERSION,
                "coeffs": {"deltas": deltas, "level": level,
                           "filename": filename}}
    digest = _digest(resolved)

    rows = _pmap(_coeff_row, [(d, level) for d in deltas], args.workers)
    path = os.path.join(args.out, filename)
    header = ["delta", "Ax", "Ay", "Az", "A", "kappa",
              "four_delta_minus_kappa", "kappa_minus_two_delta"]
    _write_csv(path, header, rows, resolved, digest)
    print(f"wrote {path} ({len(rows)} rows)")
    return 0


# ---------------------------------------------------------------------------
# zp

def cmd_zp(args) -> int:
    from conelab.potential import build_potential, eval_potential

    s = _Schema("zp", _command_block(args.config, "zp"))
    delta = s.real("delta", 0.0, lo=0.0, hi=0.5)
    sign = s.integer("sign", 1)
    if sign not in (1, -1):
        raise ConfigError("zp.sign must be 1 or -1")
    amplitude = s.real("amplitude", 1.0)
    lmax = s.integer("lmax", 24, lo=2)
    level = s.integer("level", 64, lo=8)
    dims = s.integer("dims", 33, lo=5)
    radius = s.real("radius", 1.0)
    fmt = s.text("format", "csv", choices={"csv", "raw"})
    filename = s.text("filename", "zp.csv" if fmt == "csv" else "zp.f64")
    s.done()
    resolved = {"schema_version": SCHEMA_VERSION,
                "zp": {"delta": delta, "sign": sign, "amplitude": amplitude,
                       "lmax": lmax, "level": level, "dims": dims,
                       "radius": radius, "format": fmt,
                       "filename": filename}}
    digest = _digest(resolved)

    zp = build_potential(float(sign) * diagonal_profile(delta),
                         amplitude=amplitude, lmax=lmax, level=level)
    spacing = 2.0 * radius / (dims - 1)
    grid = ScalarGrid.sample(lambda p: eval_potential(zp, p),
                             (-radius,) * 3, spacing, (dims,) * 3)
    path = os.path.join(args.out, filename)
    if fmt == "csv":
        xs, ys, zs = grid.axes()
        gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
        rows = zip(gx.ravel(), gy.ravel(), gz.ravel(), grid.values.ravel())
        _write_csv(path, ["x", "y", "z", "value"], rows, resolved, digest)
    else:
        save_grid(grid, path, extra={"schema_version": SCHEMA_VERSION,
                                     "config_digest": digest,
                                     "config": resolved})
    print(f"wrote {path} ({dims}^3 nodes)")
    return 0


# ---------------------------------------------------------------------------
# renorm

def _renorm_run(task):
    index, delta0, tau0, seed, amplitude, steps, alpha, c1 = task
    noise = BoundedNoise(alpha=alpha, c1=c1) if c1 > 0.0 else None
    tr = simulate(tau0 * diagonal_profile(delta0), amplitude=amplitude,
                  steps=steps, noise=noise, seed=seed)
    rows = tr.as_array()
    incs = rows[:-1, 3] if len(rows) > 1 else np.array([])
    try:
        c, big_k, resid = rate_fit(tr)
        # the pinned ray reports the degenerate fit; nothing decays there
        rate = None if math.isinf(c) else {"c": c, "K": big_k,
                                           "log_residual": resid}
        rate_error = None
    except NotConverged as e:
        rate = None
        rate_error = str(e)
    summary = {
        "index": index,
        "delta0": delta0,
        "tau0": tau0,
        "seed": seed,
        "label": tr.convergence_class,
        "stopped_early": tr.stopped_early,
        "steps_recorded": len(rows),
        "final_tau": float(rows[-1, 1]),
        "final_delta": float(rows[-1, 2]),
        "increment_min": float(incs.min()) if len(incs) else None,
        "increment_max": float(incs.max()) if len(incs) else None,
        "rate": rate,
        "rate_error": rate_error,
    }
    return rows, summary


def cmd_renorm(args) -> int:
    s = _Schema("renorm", _command_block(args.config, "renorm"))
    delta0 = s.real_list("delta0", [0.25], lo=0.0, hi=0.5)
    tau0 = s.real_list("tau0", [30.0], lo=0.0)
    amplitude = s.real("amplitude", 1.0)
    steps = s.integer("steps", 1000, lo=1)
    noise_cfg = s.take("noise", 0.0)
    if isinstance(noise_cfg, dict):
        ns = _Schema("renorm.noise", noise_cfg)
        alpha = ns.real("alpha", 0.2)
        c1 = ns.real("c1", 0.0, lo=0.0)
        ns.done()
    elif isinstance(noise_cfg, (int, float)) and not isinstance(noise_cfg, bool):
        alpha, c1 = 0.2, float(noise_cfg)
        if c1 < 0.0:
            raise ConfigError("renorm.noise must be >= 0")
    else:
        raise ConfigError("renorm.noise must be a number or an object")
    seeds = s.take("seeds", [0])
    if not isinstance(seeds, list) or not all(
            isinstance(x, int) and not isinstance(x, bool) for x in seeds):
        raise ConfigError("renorm.seeds must be a list of integers")
    if args.seed is not None:
        seeds = [args.seed]
    s.done()
    matrix = [(d, t, sd) for d in delta0 for t in tau0 for sd in seeds]
    if not matrix:
        raise ConfigError("renorm run matrix is empty")
    resolved = {"schema_version": SCHEMA_VERSION,
                "renorm": {"delta0": delta0, "tau0": tau0,
                           "amplitude": amplitude, "steps": steps,
                           "noise": {"alpha": alpha, "c1": c1},
                           "seeds": seeds}}
    digest = _digest(resolved)

    tasks = [(i, d, t, sd, amplitude, steps, alpha, c1)
             for i, (d, t, sd) in enumerate(matrix)]
    results = _pmap(_renorm_run, tasks, args.workers)

    failures = [r[1] for r in results if r[1]["rate_error"] is not None]
    if failures and not args.allow_unconverged:
        worst = failures[0]
        raise NotConverged(
            f"trajectory {worst['index']} (delta0={worst['delta0']}): "
            f"{worst['rate_error']}")

    header = ["k", "tau", "delta", "increment", "alignment",
              "q11", "q12", "q13", "q21", "q22", "q23", "q31", "q32", "q33"]
    files = []
    for index, (rows, _) in enumerate(results):
        name = f"renorm_{index:03d}.csv"
        _write_csv(os.path.join(args.out, name), header, rows,
                   resolved, digest)
        files.append(name)
    mn, mx = increment_bounds(amplitude)
    payload = {
        "trajectories": [summary for _, summary in results],
        "trajectory_files": files,
        "increment_bounds": {"min": mn, "max": mx},
    }
    report = os.path.join(args.out, "renorm_summary.json")
    _write_json(report, payload, resolved, digest)
    labels = [summary["label"] for _, summary in results]
    print(f"wrote {report} ({len(results)} trajectories: "
          + ", ".join(labels) + ")")
    return 0


# ---------------------------------------------------------------------------
# solve

def _build_source(block):
    s = _Schema("solve.source", block)
    kind = s.text("kind", "constant",
                  choices={"constant", "affine", "radial"})
    if kind == "constant":
        src = ConstantSource(s.real("value", -1.0))
        resolved = {"kind": kind, "value": src.value}
    elif kind == "affine":
        constant = s.real("constant", -1.0)
        gradient = s.real_list("gradient", [0.0, 0.0, 0.0])
        if len(gradient) != 3:
            raise ConfigError("solve.source.gradient needs 3 entries")
        src = AffineSource(constant, tuple(gradient))
        resolved = {"kind": kind, "constant": constant, "gradient": gradient}
    else:
        constant = s.real("constant", -1.0)
        slope = s.real("slope", 0.0)
        src = RadialSource(constant, slope)
        resolved = {"kind": kind, "constant": constant, "slope": slope}
    s.done()
    return src, resolved


def _build_obstacle(block):
    s = _Schema("solve.obstacle", block)
    kind = s.text("kind", "zero",
                  choices={"zero", "quadratic", "profile", "grid"})
    if kind == "zero":
        obstacle, resolved = ZeroObstacle(), {"kind": kind}
    elif kind == "quadratic":
        coeffs = s.real_list("coeffs", [0.0] * 6)
        if len(coeffs) != 6:
            raise ConfigError(
                "solve.obstacle.coeffs needs 6 entries (m11,m22,m33,m12,m13,m23)")
        obstacle = QuadraticObstacle(QuadraticForm.from_coeffs(*coeffs))
        resolved = {"kind": kind, "coeffs": coeffs}
    elif kind == "profile":
        coefficient = s.real("coefficient", 1.0)
        alpha = s.real("alpha", 0.5)
        obstacle = ProfileObstacle(coefficient, alpha)
        resolved = {"kind": kind, "coefficient": coefficient, "alpha": alpha}
    else:
        path = s.text("path", "")
        if not path:
            raise ConfigError("solve.obstacle.path is required for kind=grid")
        try:
            obstacle = GridObstacle(load_grid(path))
        except OSError as e:
            raise ConfigError(f"cannot read obstacle grid {path}: {e}") from e
        resolved = {"kind": kind, "path": path}
    s.done()
    return obstacle, resolved


def _build_boundary(block):
    s = _Schema("solve.boundary", block)
    kind = s.text("kind", "manufactured",
                  choices={"constant", "manufactured"})
    if kind == "constant":
        value = s.real("value", -1.0)
        boundary, resolved = ConstantBoundary(value), {"kind": kind,
                                                       "value": value}
    else:
        tau = s.real("tau", 30.0)
        delta = s.real("delta", 0.0, lo=0.0, hi=0.5)
        amplitude = s.real("amplitude", 1.0)
        lmax = s.integer("lmax", 40, lo=2)
        sign = s.integer("sign", 1)
        rotation_cfg = s.take("rotation", None)
        rotation = None
        if rotation_cfg is not None:
            rotation = np.asarray(rotation_cfg, dtype=float)
            if rotation.shape != (3, 3):
                raise ConfigError("solve.boundary.rotation must be 3x3")
        boundary = ManufacturedField(tau, delta, rotation=rotation,
                                     amplitude=amplitude, lmax=lmax,
                                     sign=sign)
        resolved = {"kind": kind, "tau": tau, "delta": delta,
                    "amplitude": amplitude, "lmax": lmax, "sign": sign,
                    "rotation": None if rotation is None
                    else rotation.tolist()}
    s.done()
    return boundary, resolved


def _build_domain(block):
    s = _Schema("solve.domain", block)
    kind = s.text("kind", "box", choices={"box", "ball"})
    if kind == "box":
        half_width = s.real("half_width", 1.0)
        domain, resolved = BoxDomain(half_width), {"kind": kind,
                                                   "half_width": half_width}
    else:
        radius = s.real("radius", 1.0)
        half_width = s.take("half_width", None)
        if half_width is not None:
            half_width = float(half_width)
        domain = BallDomain(radius, half_width)
        resolved = {"kind": kind, "radius": radius,
                    "half_width": domain.half_width}
    s.done()
    return domain, resolved


def cmd_solve(args) -> int:
    s = _Schema("solve", _command_block(args.config, "solve"))
    source, r_source = _build_source(s.block("source", {}))
    obstacle, r_obstacle = _build_obstacle(s.block("obstacle", {}))
    boundary, r_boundary = _build_boundary(s.block("boundary", {}))
    domain, r_domain = _build_domain(s.block("domain", {}))
    dims = s.integer("dims", 65, lo=5)
    tol_outer = s.real("tol_outer", 1e-6)
    tol_inner = s.real("tol_inner", 1e-8)
    max_outer = s.integer("max_outer", 200, lo=1)
    damping = s.real("damping", 0.6)
    c_psi = s.real("c_psi", 1.0)
    singular_study = s.take("singular_study", True)
    if not isinstance(singular_study, bool):
        raise ConfigError("solve.singular_study must be true or false")
    grid_file = s.text("grid_file", "solution.f64")
    report_file = s.text("report_file", "solve_report.json")
    s.done()
    resolved = {"schema_version": SCHEMA_VERSION,
                "solve": {"source": r_source, "obstacle": r_obstacle,
                          "boundary": r_boundary, "domain": r_domain,
                          "dims": dims, "tol_outer": tol_outer,
                          "tol_inner": tol_inner, "max_outer": max_outer,
                          "damping": damping, "c_psi": c_psi,
                          "singular_study": singular_study,
                          "grid_file": grid_file,
                          "report_file": report_file}}
    digest = _digest(resolved)

    spec = ProblemSpec(source=source, obstacle=obstacle, boundary=boundary,
                       domain=domain, dims=dims, tol_outer=tol_outer,
                       tol_inner=tol_inner, max_outer=max_outer,
                       damping=damping, c_psi=c_psi,
                       singular_study=singular_study)
    grid, report = solve(spec, allow_unconverged=args.allow_unconverged)

    payload = {"report": report.as_dict()}
    if r_boundary["kind"] == "manufactured":
        xs, ys, zs = spec.grid_axes()
        gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
        pts = np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])
        exact = boundary.values(pts).reshape(grid.dims)
        scale = getattr(domain, "radius", None) or domain.half_width
        inner = (gx ** 2 + gy ** 2 + gz ** 2) <= (0.8 * scale) ** 2
        err = np.abs(grid.values - exact)[inner].max()
        payload["relative_error"] = float(err / np.abs(exact[inner]).max())

    grid_path = os.path.join(args.out, grid_file)
    save_grid(grid, grid_path, extra={"schema_version": SCHEMA_VERSION,
                                      "config_digest": digest,
                                      "config": resolved})
    report_path = os.path.join(args.out, report_file)
    _write_json(report_path, payload, resolved, digest)
    print(f"wrote {grid_path} and {report_path} "
          f"(converged={report.converged}, outer={report.outer_iterations})")
    return 0


# ---------------------------------------------------------------------------
# blowup

def cmd_blowup(args) -> int:
    s = _Schema("blowup", _command_block(args.config, "blowup"))
    grid_path = s.text("grid", "")
    if not grid_path:
        raise ConfigError("blowup.grid (path to a stored grid) is required")
    x0 = s.real_list("x0", [0.0, 0.0, 0.0])
    if len(x0) != 3:
        raise ConfigError("blowup.x0 needs 3 entries")
    r0 = s.real("r0", 0.5)
    levels = s.integer("levels", 2, lo=0)
    k_bound = s.real("k_bound", 100.0)
    delta_s1 = s.real("delta_s1", 0.15)
    delta_s2 = s.real("delta_s2", 0.35)
    fit_mode = s.text("fit_mode", "auto",
                      choices={"auto", "cone", "cross", "none"})
    c_region = s.real("c_region", 0.5)
    obstacle_path = s.text("obstacle", "")
    s.done()
    resolved = {"schema_version": SCHEMA_VERSION,
                "blowup": {"grid": grid_path, "x0": x0, "r0": r0,
                           "levels": levels, "k_bound": k_bound,
                           "delta_s1": delta_s1, "delta_s2": delta_s2,
                           "fit_mode": fit_mode, "c_region": c_region,
                           "obstacle": obstacle_path}}
    digest = _digest(resolved)

    try:
        u = load_grid(grid_path)
    except OSError as e:
        raise ConfigError(f"cannot read grid {grid_path}: {e}") from e
    if obstacle_path:
        try:
            psi = load_grid(obstacle_path)
        except OSError as e:
            raise ConfigError(
                f"cannot read obstacle grid {obstacle_path}: {e}") from e
    else:
        psi = ScalarGrid(u.origin, u.spacing, np.zeros(u.dims))

    records, cls = blowup_sequence(u, x0, r0, levels, k_bound=k_bound,
                                   delta_s1=delta_s1, delta_s2=delta_s2)

    rows = [rec.to_row() for rec in records]
    traj_path = os.path.join(args.out, "blowup_trajectory.csv")
    _write_csv(traj_path, ["j", "r", "tau", "delta", "sign", "sup_u",
                           "residue"], rows, resolved, digest)

    mesh_name = None
    mesh_error = None
    fit_payload = None
    fit_error = None
    try:
        mesh = free_boundary(u, psi)
    except EmptySurface as e:
        mesh, mesh_error = None, str(e)
    if mesh is not None:
        mesh_name = "free_boundary.ply"
        text = to_ply(mesh, comments=(
            f"schema_version {SCHEMA_VERSION}",
            f"config_digest {digest}",
        ))
        _write_atomic(os.path.join(args.out, mesh_name), text.encode())
        mode = fit_mode
        if mode == "auto":
            if cls.label in ("S1_plus", "S1_minus"):
                mode = "cone"
            elif cls.label == "S2":
                mode = "cross"
            else:
                mode = "none"
        if mode != "none":
            try:
                fit = cone_fit(mesh, apex=x0, mode=mode, c_region=c_region)
                fit_payload = {
                    "mode": fit.mode,
                    "rotation": fit.rotation,
                    "residual_rms": fit.residual_rms,
                    "graph_c1_defect": fit.graph_c1_defect,
                    "defect_ladder": fit.defect_ladder,
                    "axis_angle_deg": fit.axis_angle_deg,
                    "plane_angles_deg": fit.plane_angles_deg,
                    "dihedral_deg": fit.dihedral_deg,
                    "vertex_count": fit.vertex_count,
                }
            except DegenerateFit as e:
                fit_error = str(e)

    payload = {
        "classification": cls.as_dict(),
        "records": rows,
        "trajectory_file": "blowup_trajectory.csv",
        "mesh_file": mesh_name,
        "mesh_error": mesh_error,
        "fit": fit_payload,
        "fit_error": fit_error,
    }
    report = os.path.join(args.out, "blowup_report.json")
    _write_json(report, payload, resolved, digest)
    print(f"wrote {report} (label={cls.label})")
    return 0


# ---------------------------------------------------------------------------
# verify

def _check_quadform_roundtrip(tol_scale, seed):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(20):
        form = random_form(rng)
        can = canonicalize(form)
        worst = max(worst, sup_distance(form, can.reconstruct()))
    tol = 1e-10 * tol_scale
    return worst <= tol, f"max roundtrip dev {worst:.3e}", f"<= {tol:.3e}"


def _check_sphere_covariance(tol_scale, seed):
    rng = np.random.default_rng(seed + 1)
    quad = build_quadrature(48)
    form = QuadraticForm.from_coeffs(0.4, -0.1, -0.3, 0.2, 0.05, -0.15)
    worst = 0.0
    for _ in range(3):
        q, r = np.linalg.qr(rng.normal(size=(3, 3)))
        q = (q * np.sign(np.diag(r))).T
        if np.linalg.det(q) < 0:
            q[[0, 1]] = q[[1, 0]]
        rotated = expand(lambda pts: form(pts @ q.T), 4, quad)
        target = rotate(form, q)
        worst = max(worst, sup_distance(degree2_form(rotated), target))
    tol = 1e-8 * tol_scale
    return worst <= tol, f"max covariance dev {worst:.3e}", f"<= {tol:.3e}"


def _check_coeff_goldens(tol_scale, seed):
    sqrt3 = math.sqrt(3.0)
    m0 = indicator_moments(0.0)
    mh = indicator_moments(0.5)
    devs = [abs(m0.total + 4.0 * math.pi / sqrt3),
            abs(m0.mz + 4.0 * math.pi / (9.0 * sqrt3)),
            abs(mh.total + 2.0 * math.pi),
            abs(mh.my + 2.0 * math.pi / 3.0)]
    worst = max(devs)
    tol = 1e-6 * tol_scale
    return worst <= tol, f"max golden dev {worst:.3e}", f"<= {tol:.3e}"


def _check_kappa_endpoints(tol_scale, seed):
    worst = max(abs(kappa(0.0)), abs(kappa(0.5)))
    tol = 1e-9 * tol_scale
    return worst <= tol, f"|kappa| at endpoints {worst:.3e}", f"<= {tol:.3e}"


def _check_kappa_upper(tol_scale, seed):
    grid = np.arange(0.005, 0.5, 0.005)
    worst = max(kappa(float(d)) - 4.0 * float(d) for d in grid)
    tol = 1e-4 * tol_scale
    return worst <= tol, f"max(kappa - 4 delta) {worst:.3e}", f"<= {tol:.3e}"


def _check_kappa_lower(tol_scale, seed):
    # the ratio kappa/(2 delta) approaches 1 from below, so the empirical
    # domain of the lower bound at slack 1e-4 is just the first grid point
    c0 = 0.005
    worst = max(2.0 * float(d) - kappa(float(d))
                for d in np.arange(0.005, c0 + 1e-12, 0.005))
    tol = 1e-4 * tol_scale
    return (worst <= tol,
            f"max(2 delta - kappa) {worst:.3e} on (0, {c0}]",
            f"<= {tol:.3e}")


def _check_zp_pi_identity(tol_scale, seed):
    target = CONE_INCREMENT * diagonal_profile(0.0)
    got = potential_projection(diagonal_profile(0.0), 0.5)
    dev = sup_distance(got, target)
    tol = 1e-6 * tol_scale
    return dev <= tol, f"sup dev {dev:.3e}", f"<= {tol:.3e}"


def _check_zp_eta0(tol_scale, seed):
    margin = growth_margin(10.0)
    return margin >= 0.05, f"eta0 estimate {margin:.4f}", ">= 0.05"


def _check_zp_grid_projection(tol_scale, seed):
    from conelab.potential import build_potential, eval_potential
    zp = build_potential(diagonal_profile(0.0), lmax=40)
    g = ScalarGrid.sample(lambda p: eval_potential(zp, p),
                          (-1.0,) * 3, 1.0 / 64, (129,) * 3)
    got = project(g, 0.5, trace_free=True)
    dev = sup_distance(got, CONE_INCREMENT * diagonal_profile(0.0))
    tol = 1e-2 * tol_scale
    return dev <= tol, f"sup dev {dev:.3e}", f"<= {tol:.3e}"


def _check_renorm_increments(tol_scale, seed):
    tr = simulate(30.0 * diagonal_profile(0.3), steps=300)
    incs = tr.increments[:-1]
    lo = 0.9 * growth_margin(10.0) / 2.0
    hi = 1.1 * increment_bounds()[1]
    ok = bool(np.all(incs >= lo) and np.all(incs <= hi))
    return (ok,
            f"increments in [{float(incs.min()):.5f}, "
            f"{float(incs.max()):.5f}]",
            f"within [{lo:.5f}, {hi:.5f}]")


def _check_renorm_tau_monotone(tol_scale, seed):
    worst = math.inf
    for d0 in (0.0, 0.2, 0.4, 0.5):
        tr = simulate(10.0 * diagonal_profile(d0), steps=50)
        worst = min(worst, float(np.diff(tr.taus).min()))
    return worst > 0.0, f"min tau step {worst:.3e}", "> 0"


def _check_renorm_ray(tol_scale, seed):
    tr = simulate(30.0 * diagonal_profile(0.5), steps=100)
    worst = float(np.abs(tr.deltas - 0.5).max())
    tol = 1e-10 * tol_scale
    return worst <= tol, f"max |delta - 1/2| {worst:.3e}", f"<= {tol:.3e}"


def _check_renorm_decay_envelope(tol_scale, seed):
    mn = increment_bounds()[0]
    worst = -math.inf
    for d0 in (0.1, 0.25, 0.4):
        tr = simulate(30.0 * diagonal_profile(d0), steps=300)
        for k in range(0, len(tr.records) - 1, 10):
            r = tr.records[k]
            if r.tau < 30.0:
                continue
            dec = r.delta - tr.records[k + 1].delta
            worst = max(worst, 0.25 * kappa(r.delta) * (mn / r.tau) - dec)
    return worst <= 1e-12, f"max envelope violation {worst:.3e}", "<= 1e-12"


def _check_renorm_rate_fit(tol_scale, seed):
    tr = simulate(30.0 * diagonal_profile(0.25), steps=2000)
    c, _, resid = rate_fit(tr)
    tol = 0.01 * tol_scale
    return (c > 0.0 and resid <= tol,
            f"c {c:.3f}, log residual {resid:.3e}",
            f"c > 0 and residual <= {tol:.3e}")


def _check_pde_interval(tol_scale, seed):
    _, u, iters = solve_interval(257, initial=lambda t: 0.5 * t * (1.0 - t))
    _, u0, iters0 = solve_interval(257)
    ok = iters == 1 and iters0 == 1 and float(u.max()) > 0.0 \
        and float(np.abs(u0).max()) == 0.0
    return (ok,
            f"outer iterations {iters} and {iters0}, distinct fixed points",
            "one outer step each")


def _check_pde_manufactured(tol_scale, seed):
    boundary = ManufacturedField(30.0, 0.0, lmax=24)
    spec = ProblemSpec(source=ConstantSource(-1.0), obstacle=ZeroObstacle(),
                       boundary=boundary, dims=33)
    grid, report = solve(spec)
    xs, ys, zs = spec.grid_axes()
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])
    exact = boundary.values(pts).reshape(grid.dims)
    inner = (gx ** 2 + gy ** 2 + gz ** 2) <= 0.64
    rel = float(np.abs(grid.values - exact)[inner].max()
                / np.abs(exact[inner]).max())
    tol = 5e-4 * tol_scale
    return (report.converged and rel <= tol,
            f"relative error {rel:.3e}", f"<= {tol:.3e}")


def _check_pde_residual_decay(tol_scale, seed):
    g = manufactured(30.0, 0.0, dims=65)
    spec = ProblemSpec(source=ConstantSource(-1.0), obstacle=ZeroObstacle(),
                       boundary=ManufacturedField(30.0, 0.0), dims=65)
    norms = [residual_potential(g, 2.0 ** (-k), spec)[1] for k in (1, 2)]
    ok = norms[0] <= 0.5 and norms[1] <= norms[0] + 1e-15
    return (ok, f"d2 norms {norms[0]:.4f} -> {norms[1]:.4f}",
            "non-increasing, first <= 0.5")


def _check_blowup_laws(tol_scale, seed):
    report = projection_laws_check()
    ok = (report["idempotence_max_dev"] <= 1e-10 * tol_scale
          and report["harmonic_r_invariance_max_dev"] <= 1e-8 * tol_scale)
    return (ok,
            f"idempotence {report['idempotence_max_dev']:.3e}, "
            f"r-invariance {report['harmonic_r_invariance_max_dev']:.3e}",
            f"<= {1e-10 * tol_scale:.3e} and {1e-8 * tol_scale:.3e}")


def _rotation_from(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = (q * np.sign(np.diag(r))).T
    if np.linalg.det(q) < 0:
        q[[0, 1]] = q[[1, 0]]
    return q


def _check_blowup_extraction(tol_scale, seed):
    rng = np.random.default_rng(seed + 2)
    worst_delta = 0.0
    worst_axis = 0.0
    for _ in range(2):
        q = _rotation_from(rng)
        g = manufactured(30.0, 0.25, rotation=q, lmax=24, dims=65)
        can = canonicalize(project(g, 0.5))
        worst_delta = max(worst_delta, abs(can.delta - 0.25))
        for k in range(3):
            cosang = min(1.0, abs(float(np.dot(can.rotation[k], q[k]))))
            worst_axis = max(worst_axis, math.degrees(math.acos(cosang)))
    tol_d = 0.02 * tol_scale
    tol_a = 2.0 * tol_scale
    return (worst_delta <= tol_d and worst_axis <= tol_a,
            f"delta dev {worst_delta:.4f}, axis dev {worst_axis:.3f} deg",
            f"<= {tol_d:.3g} and {tol_a:.3g} deg")


def _check_blowup_classifier(tol_scale, seed):
    rng = np.random.default_rng(seed + 3)
    q = _rotation_from(rng)
    got = []
    for sign, delta, want in ((1, 0.0, "S1_plus"), (-1, 0.0, "S1_minus"),
                              (1, 0.5, "S2")):
        g = manufactured(30.0, delta, rotation=q, lmax=24, dims=65, sign=sign)
        _, cls = blowup_sequence(g, (0.0, 0.0, 0.0), 0.5, 1)
        got.append((want, cls.label))
    ok = all(w == g for w, g in got)
    return ok, "labels " + ", ".join(f"{g}" for _, g in got), \
        "S1_plus, S1_minus, S2"


def _check_blowup_free_boundary(tol_scale, seed):
    n = 65
    h = 2.0 / (n - 1)
    p0 = QuadraticForm(np.diag([0.5, 0.5, -1.0]))
    g = ScalarGrid.sample(lambda p: p0(p), (-1.0,) * 3, h, (n,) * 3)
    zero = ScalarGrid((-1.0,) * 3, h, np.zeros((n,) * 3))
    mesh = free_boundary(g, zero)
    v = mesh.vertices
    keep = np.linalg.norm(v, axis=1) >= 0.05
    vals = np.abs(p0(v[keep]))
    grad = np.linalg.norm(v[keep] @ (2.0 * p0.m), axis=1)
    worst = float((vals / grad).max())
    tol = 2.0 * h * tol_scale
    return worst <= tol, f"max cone distance {worst:.4f}", f"<= {tol:.4f}"


def _check_sublevel(tol_scale, seed):
    p0 = QuadraticForm(np.diag([0.5, 0.5, -1.0]))
    measures = [sublevel_measure(p0, eps, samples=200_000, seed=seed).measure
                for eps in (1e-4, 1e-3, 1e-2, 1e-1)]
    monotone = all(a <= b for a, b in zip(measures, measures[1:]))
    c = max(m / eps ** 0.25
            for m, eps in zip(measures, (1e-4, 1e-3, 1e-2, 1e-1)))
    return (monotone and c <= 10.0,
            f"envelope constant {c:.3f}, monotone {monotone}",
            "C <= 10 and non-decreasing")


_CHECKS = [
    ("quadform.canonical_roundtrip", _check_quadform_roundtrip),
    ("sphere.rotation_covariance", _check_sphere_covariance),
    ("coeffs.golden_values", _check_coeff_goldens),
    ("kappa.endpoints_zero", _check_kappa_endpoints),
    ("kappa.upper_bound_4delta", _check_kappa_upper),
    ("kappa.lower_bound_2delta", _check_kappa_lower),
    ("zp.pi_identity", _check_zp_pi_identity),
    ("zp.eta0_margin", _check_zp_eta0),
    ("zp.grid_projection", _check_zp_grid_projection),
    ("renorm.increment_window", _check_renorm_increments),
    ("renorm.tau_monotone", _check_renorm_tau_monotone),
    ("renorm.ray_hold", _check_renorm_ray),
    ("renorm.decay_envelope", _check_renorm_decay_envelope),
    ("renorm.rate_fit", _check_renorm_rate_fit),
    ("pde.interval_one_shot", _check_pde_interval),
    ("pde.manufactured_33", _check_pde_manufactured),
    ("pde.residual_decay", _check_pde_residual_decay),
    ("blowup.projection_laws", _check_blowup_laws),
    ("blowup.delta_extraction", _check_blowup_extraction),
    ("blowup.classifier", _check_blowup_classifier),
    ("blowup.free_boundary_cone", _check_blowup_free_boundary),
    ("sublevel.envelope", _check_sublevel),
]


def cmd_verify(args) -> int:
    s = _Schema("verify", _command_block(args.config, "verify"))
    tol_scale = s.real("tol_scale", 1.0)
    if tol_scale <= 0.0:
        raise ConfigError("verify.tol_scale must be positive")
    name_filter = s.text("filter", "")
    seed = s.integer("seed", 0)
    s.done()
    if args.filter is not None:
        name_filter = args.filter
    if args.seed is not None:
        seed = args.seed
    resolved = {"schema_version": SCHEMA_VERSION,
                "verify": {"tol_scale": tol_scale, "filter": name_filter,
                           "seed": seed}}
    digest = _digest(resolved)

    selected = [(name, fn) for name, fn in _CHECKS if name_filter in name]
    if not selected:
        raise ConfigError(f"no checks match filter {name_filter!r}")

    results = []
    for name, fn in selected:
        try:
            ok, measured, tolerance = fn(tol_scale, seed)
        except Exception as e:  # a crashed check is a failed check
            ok, measured, tolerance = False, f"raised {type(e).__name__}: {e}", ""
        results.append({"name": name, "passed": bool(ok),
                        "measured": measured, "tolerance": tolerance})
        print(f"{'PASS' if ok else 'FAIL'} {name}: {measured}"
              + (f" (want {tolerance})" if tolerance else ""))

    all_passed = all(r["passed"] for r in results)
    payload = {
        "all_passed": all_passed,
        "checks": results,
        "counts": {"passed": sum(r["passed"] for r in results),
                   "failed": sum(not r["passed"] for r in results)},
    }
    report = os.path.join(args.out, "verify_report.json")
    _write_json(report, payload, resolved, digest)
    print(f"wrote {report} "
          f"({payload['counts']['passed']}/{len(results)} passed)")
    return 0 if all_passed else 1


# ---------------------------------------------------------------------------
# entry point

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="conelab",
        description="Batch experiments on the unstable obstacle problem: "
                    "coefficient tables, log-potential fields, "
                    "renormalization trajectories, PDE solves, blow-up "
                    "analysis, and the invariant verification suite.")
    sub = parser.add_subparsers(dest="command", required=True)
    specs = [
        ("coeffs", cmd_coeffs, "coefficient table over a delta grid", False),
        ("zp", cmd_zp, "sample a log-potential field", False),
        ("renorm", cmd_renorm, "renormalization trajectory batch", True),
        ("solve", cmd_solve, "finite-difference obstacle solve", True),
        ("blowup", cmd_blowup, "blow-up analysis of a stored grid", True),
        ("verify", cmd_verify, "run the invariant check suite", False),
    ]
    for name, fn, help_text, unconverged in specs:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, metavar="PATH",
                       help="JSON config file (defaults apply without one)")
        p.add_argument("--out", default=".", metavar="DIR",
                       help="output directory")
        p.add_argument("--workers", type=int, default=1, metavar="N",
                       help="worker processes for independent runs")
        p.add_argument("--seed", type=int, default=None, metavar="S",
                       help="override the config seed(s)")
        if unconverged:
            p.add_argument("--allow-unconverged", action="store_true",
                           help="report unconverged runs instead of failing")
        if name == "verify":
            p.add_argument("--filter", default=None, metavar="SUBSTRING",
                           help="run only checks whose name contains this")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    os.makedirs(args.out, exist_ok=True)
    started = time.perf_counter()
    try:
        code = args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except NotConverged as e:
        print(f"not converged: {e}", file=sys.stderr)
        return 3
    except MaxIterations as e:
        print(f"solver did not converge: {e}", file=sys.stderr)
        return 4
    except TooCoarse as e:
        print(f"grid too coarse: {e}", file=sys.stderr)
        return 5
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    finally:
        elapsed = time.perf_counter() - started
        print(f"conelab {args.command}: {elapsed:.2f}s", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
