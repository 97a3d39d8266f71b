"""Configuration-driven experiment runner.

Usage::

    neumc <command> --config <path> [--seed S] [--out DIR] [--threads T]

Commands:

* ``solve``       solve the configured problem, write ``solution.csv``,
                  ``diagnostics.csv`` and ``manifest.json``
* ``convergence`` sweep step size and path count, write an error-vs-cost
                  table (``convergence.csv``)
* ``diagnose``    run the gauge / decay / local-time / drift-reweighting
                  health checks without solving
* ``calibrate``   run the boundary-weight calibration and print the value
* ``selftest``    run a fast suite of exact cases; nonzero exit on failure

Configs are TOML with three tables, all keys validated strictly (unknown
keys are rejected): ``[problem]`` names a preset or spells out constant
coefficients inline, ``[mc]`` mirrors :class:`neumc.pde.McConfig`, and
``[run]`` holds seed, evaluation points and solver tolerances.  A
``manifest.json`` written by a previous run is also accepted as
``--config``; its recorded resolved configuration replays the run and
reproduces the CSV outputs byte for byte.

Exit codes: 0 success, 2 configuration error, 3 a standing hypothesis of
the probabilistic representation failed (gauge divergence, no decay),
4 numerical failure (stalled iteration, singular regression, ...).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import __version__, fields, functionals, geometry, pde, presets
from . import reference, rsde
from .errors import ConfigError, HypothesisFailure, SolverError

_PROBLEM_KEYS = {
    "preset", "domain", "center", "radius", "lower", "upper",
    "a", "b", "bhat", "q", "form", "source", "feedback", "boundary",
}
_MC_KEYS = {f.name for f in dataclasses.fields(pde.McConfig)}
_RUN_KEYS = {"seed", "eval_points", "picard_tol", "eps_cfg"}
_TOP_KEYS = {"problem", "mc", "run"}


# ---------------------------------------------------------------------------
# config loading

def _reject_unknown(table: str, given: dict, allowed: set) -> None:
    unknown = sorted(set(given) - allowed)
    if unknown:
        raise ConfigError(
            f"unknown key(s) in [{table}]: {', '.join(unknown)}; "
            f"allowed: {', '.join(sorted(allowed))}")


def _load_raw_config(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    if p.suffix == ".json":
        with open(p, "rb") as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ConfigError("JSON config must be an object")
        # manifests wrap the config under 'resolved_config'
        if "resolved_config" in data:
            data = data["resolved_config"]
        return data
    try:
        with open(p, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error: {exc}") from exc


def _validate_config(raw: dict) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a table")
    _reject_unknown("<root>", raw, _TOP_KEYS)
    out = {}
    for name, allowed in (("problem", _PROBLEM_KEYS), ("mc", _MC_KEYS),
                          ("run", _RUN_KEYS)):
        table = raw.get(name, {})
        if not isinstance(table, dict):
            raise ConfigError(f"[{name}] must be a table")
        _reject_unknown(name, table, allowed)
        out[name] = dict(table)
    return out


def _vector(val, name: str) -> np.ndarray:
    arr = np.asarray(val, dtype=float)
    if arr.shape != (2,):
        raise ConfigError(f"problem.{name} must be a 2-vector")
    return arr


def _build_domain(prob: dict):
    kind = prob.get("domain", "disk")
    if kind == "disk":
        center = _vector(prob.get("center", [0.0, 0.0]), "center")
        radius = float(prob.get("radius", 1.0))
        if radius <= 0:
            raise ConfigError("problem.radius must be positive")
        return geometry.ball(center, radius)
    if kind == "box":
        if "lower" not in prob or "upper" not in prob:
            raise ConfigError("box domains need problem.lower and problem.upper")
        lo = _vector(prob["lower"], "lower")
        hi = _vector(prob["upper"], "upper")
        if np.any(hi <= lo):
            raise ConfigError("problem.upper must exceed problem.lower")
        return geometry.box(lo, hi)
    raise ConfigError(f"unknown domain kind {kind!r} (disk or box)")


def _build_inline_problem(prob: dict) -> pde.ProblemSpec:
    dom = _build_domain(prob)
    if "q" not in prob:
        raise ConfigError("inline problems must set problem.q")
    amat = np.asarray(prob.get("a", [[1.0, 0.0], [0.0, 1.0]]), dtype=float)
    if amat.shape != (2, 2):
        raise ConfigError("problem.a must be a 2x2 matrix")
    b = _vector(prob["b"], "b") if "b" in prob else None
    bhat = _vector(prob["bhat"], "bhat") if "bhat" in prob else None
    coeffs = fields.CoefficientSet(A=amat, B=b, Bhat=bhat,
                                   Q=float(prob["q"]))
    form = prob.get("form", "linear")
    if "source" in prob and "feedback" in prob:
        raise ConfigError("problem.source and problem.feedback are exclusive")
    source = None
    if "source" in prob:
        source = float(prob["source"])
    elif "feedback" in prob:
        fb = prob["feedback"]
        if not isinstance(fb, (list, tuple)) or len(fb) != 2:
            raise ConfigError("problem.feedback must be [c0, c1]")
        c0, c1 = float(fb[0]), float(fb[1])
        if c1 > 0:
            raise ConfigError("problem.feedback slope c1 must be <= 0 "
                              "(monotone feedback)")
        source = fields.Nonlinearity(
            fn=lambda x, y, z=None: c0 + c1 * np.asarray(y, dtype=float),
            d1=-c1, bound=abs(c0), name=f"{c0:+g}{c1:+g}*u")
    boundary = float(prob["boundary"]) if "boundary" in prob else None
    return pde.ProblemSpec(dom=dom, coeffs=coeffs, source=source,
                           boundary_data=boundary, form=form)


def _build_problem(prob: dict) -> Tuple[pde.ProblemSpec, Optional[presets.Preset]]:
    if "preset" in prob:
        extra = sorted(set(prob) - {"preset"})
        if extra:
            raise ConfigError(
                f"problem.preset excludes inline keys: {', '.join(extra)}")
        pr = presets.get(str(prob["preset"]))
        return pr.spec, pr
    return _build_inline_problem(prob), None


def _build_mc(mc: dict) -> pde.McConfig:
    kwargs = {}
    for f in dataclasses.fields(pde.McConfig):
        if f.name not in mc:
            continue
        val = mc[f.name]
        if f.name in ("n_paths", "workers", "chunk", "mesh_nodes",
                      "field_paths", "gauge_paths", "max_picard"):
            kwargs[f.name] = int(val) if val is not None else None
        elif f.name == "scheme":
            kwargs[f.name] = str(val)
        else:
            kwargs[f.name] = float(val) if val is not None else None
    try:
        return pde.McConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad [mc] settings: {exc}") from exc


def _eval_points(run: dict, spec: pde.ProblemSpec,
                 preset: Optional[presets.Preset]) -> List[Tuple[float, float]]:
    if "eval_points" in run:
        pts = run["eval_points"]
        out = []
        for p in pts:
            arr = np.asarray(p, dtype=float)
            if arr.shape != (2,):
                raise ConfigError("run.eval_points must be a list of 2-vectors")
            out.append((float(arr[0]), float(arr[1])))
        if not out:
            raise ConfigError("run.eval_points must not be empty")
        return out
    if preset is not None:
        return [tuple(map(float, p)) for p in preset.eval_points]
    return [tuple(map(float, p)) for p in pde.default_eval_points(spec.dom)]


@dataclasses.dataclass
class ResolvedRun:
    config: dict                      # normalized three-table config
    spec: pde.ProblemSpec
    preset: Optional[presets.Preset]
    cfg: pde.McConfig
    seed: int
    points: List[Tuple[float, float]]
    picard_tol: float
    eps_cfg: float


def _resolve(args) -> ResolvedRun:
    raw = _load_raw_config(args.config) if args.config else {}
    cfgd = _validate_config(raw)
    if not cfgd["problem"] and args.command in ("solve", "convergence",
                                                "diagnose"):
        raise ConfigError(f"{args.command} needs a [problem] table")
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfgd["mc"]["workers"] = int(args.threads)
    cfg = _build_mc(cfgd["mc"])
    seed = int(args.seed if args.seed is not None
               else cfgd["run"].get("seed", 0))
    picard_tol = float(cfgd["run"].get("picard_tol", 2e-3))
    eps_cfg = float(cfgd["run"].get("eps_cfg", 0.5))
    if cfgd["problem"]:
        spec, preset = _build_problem(cfgd["problem"])
        points = _eval_points(cfgd["run"], spec, preset)
    else:
        spec, preset, points = None, None, []
    resolved = {
        "problem": dict(cfgd["problem"]),
        "mc": dataclasses.asdict(cfg),
        "run": {"seed": seed, "eval_points": [list(p) for p in points],
                "picard_tol": picard_tol, "eps_cfg": eps_cfg},
    }
    return ResolvedRun(config=resolved, spec=spec, preset=preset, cfg=cfg,
                       seed=seed, points=points, picard_tol=picard_tol,
                       eps_cfg=eps_cfg)


# ---------------------------------------------------------------------------
# output helpers

def _fmt(x) -> str:
    """Full-precision, round-trippable text for CSV cells."""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(c) for c in row])


def _write_manifest(out_dir: Path, command: str, rr: ResolvedRun,
                    diagnostics: dict, outputs: List[str],
                    wall: float) -> Path:
    manifest = {
        "package_version": __version__,
        "command": command,
        "seed": rr.seed,
        "kappa_l": rr.cfg.kappa_l,
        "workers": rr.cfg.workers,
        "wall_time_s": wall,
        "outputs": outputs,
        "diagnostics": diagnostics,
        "resolved_config": rr.config,
    }
    path = out_dir / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=_json_safe)
        fh.write("\n")
    return path


def _json_safe(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    raise TypeError(f"not JSON serializable: {type(obj)!r}")


def _meta_diagnostics(meta: dict) -> dict:
    out = {}
    gauge = meta.get("gauge")
    if gauge:
        out["gauge"] = {k: gauge[k] for k in
                        ("value", "tail", "tail_bound", "beta_hat",
                         "visit_rate", "divergent") if k in gauge}
    # wall time stays out: it goes to the manifest, and the CSVs must be
    # reproducible byte for byte under replay
    for key in ("iterations", "picard_history", "field_range", "v_range",
                "transformed_q_range"):
        if key in meta:
            out[key] = meta[key]
    if "smallness" in meta:
        out["smallness"] = meta["smallness"]
    if "per_point" in meta:
        out["per_point"] = meta["per_point"]
    return out


def _diag_rows(diag: dict) -> List[Tuple[str, object, str]]:
    rows: List[Tuple[str, object, str]] = []

    def walk(prefix: str, val):
        if isinstance(val, dict):
            for k in val:
                walk(f"{prefix}.{k}" if prefix else str(k), val[k])
        elif isinstance(val, (list, tuple)):
            if any(isinstance(v, (dict, list, tuple)) for v in val):
                for i, v in enumerate(val):
                    walk(f"{prefix}[{i}]", v)
            else:
                rows.append((prefix, "", " ".join(_fmt(v) for v in val)))
        else:
            rows.append((prefix, val, ""))

    walk("", diag)
    return rows


# ---------------------------------------------------------------------------
# commands

def _solve_spec(rr: ResolvedRun) -> pde.SolutionField:
    spec = rr.spec
    if spec.form == "linear":
        return pde.solve_linear(spec, rr.points, rr.cfg, seed=rr.seed)
    if spec.form == "semilinear":
        return pde.solve_semilinear(spec, rr.points, rr.cfg, seed=rr.seed,
                                    picard_tol=rr.picard_tol)
    return pde.solve_mixed_full(spec, rr.points, rr.cfg, seed=rr.seed,
                                picard_tol=rr.picard_tol, eps_cfg=rr.eps_cfg)


def _cmd_solve(args, rr: ResolvedRun, out_dir: Path) -> int:
    t0 = time.perf_counter()
    sol = _solve_spec(rr)
    wall = time.perf_counter() - t0
    _write_csv(out_dir / "solution.csv",
               ("point_x1", "point_x2", "value", "stderr", "n_paths",
                "t_max"), sol.rows())
    diag = _meta_diagnostics(sol.meta)
    _write_csv(out_dir / "diagnostics.csv", ("name", "value", "detail"),
               _diag_rows(diag))
    _write_manifest(out_dir, "solve", rr, diag,
                    ["solution.csv", "diagnostics.csv"], wall)
    if rr.preset is not None and rr.preset.targets:
        tmap = {tuple(p): t for p, t in rr.preset.targets}
        for pt, est in zip(sol.points, sol.values):
            tgt = tmap.get(tuple(pt))
            if tgt is not None:
                print(f"u({pt[0]:g},{pt[1]:g}) = {est.value:.6g} "
                      f"+- {est.stderr:.2g}  (exact {tgt:g})")
            else:
                print(f"u({pt[0]:g},{pt[1]:g}) = {est.value:.6g} "
                      f"+- {est.stderr:.2g}")
    else:
        for pt, est in zip(sol.points, sol.values):
            print(f"u({pt[0]:g},{pt[1]:g}) = {est.value:.6g} "
                  f"+- {est.stderr:.2g}")
    print(f"wrote {out_dir / 'solution.csv'}  [{wall:.1f}s]")
    return 0


def _fd_reference(rr: ResolvedRun) -> Optional[Dict[Tuple[float, float], float]]:
    if rr.spec.form == "mixed":
        return None
    try:
        grid = reference.fd_solve(rr.spec)
    except SolverError:
        return None
    pts = np.asarray(rr.points, dtype=float)
    vals = np.asarray(grid.value(pts), dtype=float)
    return {tuple(p): float(v) for p, v in zip(rr.points, vals)}


def _cmd_convergence(args, rr: ResolvedRun, out_dir: Path) -> int:
    t0 = time.perf_counter()
    ref = _fd_reference(rr)
    base = rr.cfg
    grid = [(f_dt, f_n) for f_dt in (4.0, 2.0, 1.0) for f_n in (0.25, 1.0)]
    rows = []
    finest: Dict[Tuple[float, float], float] = {}
    for f_dt, f_n in grid:
        cfg = dataclasses.replace(base, dt=base.dt * f_dt,
                                  n_paths=max(int(base.n_paths * f_n), 100))
        rcopy = dataclasses.replace(rr, cfg=cfg)
        sol = _solve_spec(rcopy)
        for pt, est in zip(sol.points, sol.values):
            key = (float(pt[0]), float(pt[1]))
            if (f_dt, f_n) == (1.0, 1.0):
                finest[key] = est.value
            rows.append((cfg.dt, cfg.n_paths, key[0], key[1], est.value,
                         est.stderr,
                         int(round(cfg.t_max / cfg.dt)) * cfg.n_paths))
    header = ("dt", "n_paths", "point_x1", "point_x2", "value", "stderr",
              "cost_path_steps")
    table = ref if ref is not None else finest
    rows = [r + (abs(r[4] - table[(r[2], r[3])]),) for r in rows]
    header = header + ("abs_err_vs_ref" if ref is not None
                       else "abs_err_vs_finest",)
    _write_csv(out_dir / "convergence.csv", header, rows)
    wall = time.perf_counter() - t0
    diag = {"reference": "finite-difference oracle" if ref is not None
            else "finest Monte-Carlo run"}
    _write_manifest(out_dir, "convergence", rr, diag, ["convergence.csv"],
                    wall)
    print(f"wrote {out_dir / 'convergence.csv'} ({len(rows)} rows) "
          f"[{wall:.1f}s]")
    return 0


def _cmd_diagnose(args, rr: ResolvedRun, out_dir: Path) -> int:
    t0 = time.perf_counter()
    spec, cfg = rr.spec, rr.cfg
    dom, coeffs = spec.dom, spec.coeffs
    # health checks run on the raw process; a divergence-form drift is not
    # part of the simulated dynamics, so it is dropped here
    tc = fields.plain_coefficients(dataclasses.replace(coeffs, Bhat=None))
    failures: List[str] = []
    rows: List[Tuple[str, object, str]] = []
    x0 = np.asarray(rr.points[0], dtype=float)
    n_diag = min(cfg.n_paths, cfg.gauge_paths)
    dt_diag = max(cfg.dt, 1e-3)

    gauge = functionals.gauge_estimate(
        dom, tc, x0, T_max=min(max(cfg.t_max, 2.0), 12.0), dt=dt_diag,
        n_paths=n_diag, seed=rr.seed, workers=cfg.workers,
        scheme=cfg.scheme)
    rows += [("gauge.total", gauge.estimate.value, ""),
             ("gauge.half", gauge.half.value, ""),
             ("gauge.tail", gauge.tail.value,
              f"stderr {_fmt(gauge.tail.stderr)}"),
             ("gauge.beta_hat", gauge.beta_hat, ""),
             ("gauge.divergent", gauge.divergent, "")]
    if gauge.divergent:
        failures.append("GaugeDiverges: weighted boundary local time is not "
                        f"summable (half {gauge.half.value:.3g}, tail "
                        f"{gauge.tail.value:.3g})")

    t_hi = min(max(cfg.t_max / 2.0, 2.0), 6.0)
    decay = functionals.decay_rate_estimate(
        dom, tc, [x0], t_grid=(t_hi / 4.0, t_hi / 2.0, t_hi),
        dt=dt_diag, n_paths=n_diag, seed=rr.seed, workers=cfg.workers,
        scheme=cfg.scheme)
    rows += [("decay.beta_hat", decay.beta_hat, ""),
             ("decay.k_hat", decay.k_hat, ""),
             ("decay.residual", decay.residual, "")]
    if decay.beta_hat <= cfg.beta_min:
        failures.append("NoDecay: fitted decay rate "
                        f"{decay.beta_hat:.3g} <= {cfg.beta_min:g}")

    bpt = geometry.boundary_grid(dom, 8)[0]
    times = (0.0025, 0.01, 0.04)
    lt_dt = min(dt_diag, 1e-4)
    moments = [rsde.estimate_local_time_moment(
        dom, tc, bpt, 1, t, lt_dt, n_paths=n_diag, seed=rr.seed + 1,
        workers=cfg.workers, scheme=cfg.scheme) for t in times]
    logs = np.log([m.value for m in moments])
    slope = float(np.polyfit(np.log(times), logs, 1)[0])
    pref = moments[1].value / np.sqrt(2.0 * times[1] / np.pi)
    rows += [("localtime.slope", slope, "expected 0.5"),
             ("localtime.prefactor", pref, "expected 1")]

    probe = tc.b if not fields.is_zero_field(tc.b) else np.array([1.0, 0.0])
    gir_coeffs = fields.CoefficientSet(A=coeffs.A, B=probe, Q=coeffs.Q)
    gir = functionals.girsanov_consistency(
        dom, gir_coeffs, x0, lambda x: x[:, 0], t=0.5, dt=dt_diag,
        n_paths=max(n_diag, 4000), seed=rr.seed + 2, workers=cfg.workers,
        scheme=cfg.scheme)
    rows += [("girsanov.gap", gir.gap, ""),
             ("girsanov.gap_over_se", gir.gap_over_se, "expected <= 3")]

    _write_csv(out_dir / "diagnostics.csv", ("name", "value", "detail"),
               rows)
    wall = time.perf_counter() - t0
    diag = {name: val for name, val, _ in rows}
    _write_manifest(out_dir, "diagnose", rr, diag, ["diagnostics.csv"], wall)
    for name, val, detail in rows:
        print(f"{name:<26} {_fmt(val)}" + (f"  ({detail})" if detail else ""))
    if failures:
        for msg in failures:
            print(msg, file=sys.stderr)
        return 3
    print(f"all diagnostics healthy  [{wall:.1f}s]")
    return 0


def _cmd_calibrate(args, rr: ResolvedRun, out_dir: Path) -> int:
    t0 = time.perf_counter()
    cfg = rr.cfg if args.config else None
    cal = pde.calibrate_kappa(cfg, seed=rr.seed)
    wall = time.perf_counter() - t0
    print("source sign errors:",
          {k: round(v, 6) for k, v in cal["source_sign_errors"].items()})
    print("boundary weight errors:",
          {k: round(v, 6) for k, v in cal["kappa_errors"].items()})
    print(f"calibrated boundary weight kappa_l = {cal['chosen']:g} "
          f"(source sign {cal['chosen_source_sign']:g})  [{wall:.1f}s]")
    diag = {"kappa_errors": cal["kappa_errors"],
            "source_sign_errors": cal["source_sign_errors"],
            "chosen": cal["chosen"],
            "chosen_source_sign": cal["chosen_source_sign"]}
    _write_manifest(out_dir, "calibrate", rr, diag, [], wall)
    return 0


def _selftest_cases():
    dom = geometry.ball((0.0, 0.0), 1.0)
    eye = np.eye(2)

    def zero_data():
        spec = pde.ProblemSpec(
            dom=dom, coeffs=fields.CoefficientSet(A=eye, Q=-1.0),
            source=0.0, form="linear")
        sol = pde.solve_linear(spec, [(0.0, 0.0)],
                               pde.McConfig(n_paths=200, dt=5e-3, t_max=2.0),
                               seed=0)
        v = sol.values[0]
        return v.value == 0.0 and v.stderr == 0.0, f"u(0) = {v.value}"

    def constant_solution():
        pr = presets.get("constant_disk")
        sol = pde.solve_linear(pr.spec, [(0.0, 0.0)],
                               pde.McConfig(n_paths=600, dt=5e-3, t_max=8.0),
                               seed=0)
        v = sol.values[0]
        return abs(v.value + 1.0) < 0.05, f"u(0) = {v.value:.5f} (exact -1)"

    def fd_constant():
        pr = presets.get("constant_disk")
        grid = reference.fd_solve(pr.spec, resolution=(24, 48))
        err = float(np.max(np.abs(grid.values + 1.0)))
        return err < 1e-6, f"max |u + 1| = {err:.2e}"

    def weak_solver_zero():
        v = reference.solve_v(dom, eye, np.zeros(2), resolution=(20, 40))
        err = float(np.max(np.abs(v.values)))
        return err < 1e-10, f"max |v| = {err:.2e}"

    def determinism():
        pr = presets.get("quadratic_disk")
        cfg1 = pde.McConfig(n_paths=400, dt=5e-3, t_max=4.0, workers=1)
        cfg2 = dataclasses.replace(cfg1, workers=2)
        a = pde.solve_linear(pr.spec, [(0.0, 0.0)], cfg1, seed=123)
        b = pde.solve_linear(pr.spec, [(0.0, 0.0)], cfg2, seed=123)
        same = (a.values[0].value == b.values[0].value
                and a.values[0].stderr == b.values[0].stderr)
        return same, f"workers 1 vs 2: {a.values[0].value!r} vs " \
                     f"{b.values[0].value!r}"

    def boundary_local_time():
        c = fields.CoefficientSet(A=eye, Q=-1.0)
        est = rsde.estimate_local_time_moment(
            dom, c, np.array([1.0, 0.0]), 1, t=0.01, dt=1e-4, n_paths=3000,
            seed=5)
        target = np.sqrt(2.0 * 0.01 / np.pi)
        ok = abs(est.value - target) < 0.3 * target
        return ok, f"E[L] = {est.value:.4f} (target {target:.4f})"

    return [("zero data is exactly zero", zero_data),
            ("constant problem solves to -1", constant_solution),
            ("finite-difference oracle constant", fd_constant),
            ("weak potential solver zero case", weak_solver_zero),
            ("worker-count determinism", determinism),
            ("boundary local time accrual", boundary_local_time)]


def _cmd_selftest(args, rr: ResolvedRun, out_dir: Path) -> int:
    t0 = time.perf_counter()
    n_fail = 0
    for name, fn in _selftest_cases():
        try:
            ok, detail = fn()
        except SolverError as exc:
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        status = "PASS" if ok else "FAIL"
        if not ok:
            n_fail += 1
        print(f"{status}  {name}: {detail}")
    print(f"selftest {'passed' if n_fail == 0 else 'FAILED'} "
          f"({time.perf_counter() - t0:.1f}s)")
    return 0 if n_fail == 0 else 1


# ---------------------------------------------------------------------------
# entry point

def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="neumc",
        description="Monte-Carlo solver for semilinear elliptic problems "
                    "with Neumann and mixed boundary conditions")
    parser.add_argument("command",
                        choices=("solve", "convergence", "diagnose",
                                 "calibrate", "selftest"))
    parser.add_argument("--config", help="TOML config or a manifest.json "
                                         "from a previous run")
    parser.add_argument("--seed", type=int, default=None,
                        help="override run.seed")
    parser.add_argument("--out", default=".",
                        help="output directory (created if missing)")
    parser.add_argument("--threads", type=int, default=None,
                        help="override mc.workers")
    return parser


_COMMANDS = {
    "solve": _cmd_solve,
    "convergence": _cmd_convergence,
    "diagnose": _cmd_diagnose,
    "calibrate": _cmd_calibrate,
    "selftest": _cmd_selftest,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command in ("solve", "convergence", "diagnose") \
                and not args.config:
            raise ConfigError(f"{args.command} requires --config")
        rr = _resolve(args)
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        return _COMMANDS[args.command](args, rr, out_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except HypothesisFailure as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    except SolverError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
