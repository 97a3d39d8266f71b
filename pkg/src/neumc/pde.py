"""User-facing solvers on reflecting domains.

Three entry points, one shared probabilistic engine:

* :func:`solve_linear` -- linear source + boundary-flux problems, estimated
  pointwise as the expectation of a discounted running source integral plus
  a discounted boundary local-time integral.
* :func:`solve_semilinear` -- semilinear Neumann problems, realized as a
  damped fixed-point loop whose iterates are regression fits of the linear
  solver's per-path functionals, stored on a structured interpolation mesh.
* :func:`solve_mixed_full` -- problems whose drift enters as the divergence
  of a rough vector field.  The field is absorbed by an exponential change
  of unknown: solve the potential from its weak equation, fold it into
  regular drift/potential coefficients, tilt the data, run the semilinear
  solver, and untilt the answer.

Estimates carry standard errors; hypothesis failures surface as typed
errors (GaugeDiverges, NoDecay, PicardStalled), never as silent junk.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import bsde, fields, functionals, geometry, reference
from .bsde import KAPPA_L
from .errors import (ConfigError, GaugeDiverges, NoDecay, PicardStalled,
                     SmallnessViolated)
from .estimates import Estimate
from .functionals import EnsembleRequest, run_ensemble
from .seeding import TAG_INNER, TAG_PICARD, TAG_POINT

# Scale fixing the potential's weak equation against the operator split
# used by the simulation engine.  The literal weak form determines the
# potential only up to this constant factor; the value is frozen by the
# same calibration family that fixes KAPPA_L and is asserted by a
# regression test.
H_TRANSFORM_SCALE = -2.0

# Damping of the semilinear fixed-point loop.  The undamped map
# u -> solve(-G(u)) oscillates with period two already for G(y) = c - y;
# mixing with weight 0.7 turns a y-monotone G with rate 1 into a
# contraction of factor |1 - 2*0.7| = 0.4 per sweep.
PICARD_DAMPING = 0.7

FORMS = ("linear", "semilinear", "mixed")


# ---------------------------------------------------------------------------
# problem description

@dataclass(frozen=True)
class ProblemSpec:
    """A full problem statement: geometry, coefficients, data, and which
    of the three equation conventions the source uses.

    form "linear":     (operator) u = source,  source a scalar field.
    form "semilinear": (operator) u = -source(x, u),  source a Nonlinearity.
    form "mixed":      same sign convention as "semilinear" but the
                       coefficients may carry the rough divergence drift;
                       source may be a plain scalar field (no u-dependence)
                       or a Nonlinearity.

    ``boundary_data`` is the flux datum of the oblique boundary operator
    (1/2) du/dconormal - <Bhat, n> u with the inward normal convention;
    scalar constants, callables of boundary points, or None (== 0).
    """

    dom: object
    coeffs: fields.CoefficientSet
    source: object = None
    boundary_data: object = None
    form: str = "linear"

    def __post_init__(self):
        if self.form not in FORMS:
            raise ConfigError(f"unknown problem form {self.form!r}; "
                              f"expected one of {FORMS}")
        if self.form != "mixed" and not fields.is_zero_field(self.coeffs.Bhat):
            raise ConfigError("a rough divergence drift requires form='mixed'")
        if self.form == "semilinear" and self.source is not None \
                and not isinstance(self.source, fields.Nonlinearity):
            raise ConfigError("semilinear form expects a Nonlinearity source")
        if self.form == "linear" and isinstance(self.source, fields.Nonlinearity):
            raise ConfigError("linear form expects a plain scalar source")

    @property
    def nonlinearity(self):
        return self.source


@dataclass(frozen=True)
class McConfig:
    """Monte-Carlo settings shared by the pointwise solvers.

    The ``field_*`` entries control the cheaper ensembles used for the
    semilinear fixed-point iterates (path count, horizon, step); ``None``
    derives them from the final-evaluation settings.
    """

    n_paths: int = 20000
    dt: float = 1e-3
    t_max: float = 15.0
    workers: int = 1
    chunk: int = 4096
    scheme: str = "mirror"
    kappa_l: float = KAPPA_L
    mesh_nodes: int = 61
    field_paths: Optional[int] = None
    field_t_max: Optional[float] = None
    field_dt: Optional[float] = None
    gauge_paths: int = 2000
    beta_min: float = 1e-3
    max_picard: int = 24

    def __post_init__(self):
        if self.n_paths < 1 or self.dt <= 0 or self.t_max <= 0:
            raise ConfigError("n_paths, dt and t_max must be positive")
        if self.mesh_nodes < 3:
            raise ConfigError("field mesh needs at least 3 nodes per axis")

    def field_settings(self) -> Tuple[int, float, float]:
        n = self.field_paths or max(4000, self.n_paths // 4)
        T = self.field_t_max or min(self.t_max, 8.0)
        dt = self.field_dt or max(self.dt, 2e-3)
        return int(n), float(T), float(dt)


@dataclass
class SolutionField:
    """Pointwise solution estimates plus the run's diagnostics."""

    points: np.ndarray
    values: List[Estimate]
    meta: Dict[str, object]

    def __len__(self) -> int:
        return len(self.values)

    def value_array(self) -> np.ndarray:
        return np.array([e.value for e in self.values])

    def stderr_array(self) -> np.ndarray:
        return np.array([e.stderr for e in self.values])

    def rows(self):
        """(x1, x2, value, stderr, n_paths, t_max) per evaluation point."""
        for p, e in zip(self.points, self.values):
            yield (float(p[0]), float(p[1]), e.value, e.stderr,
                   e.n_paths, e.horizon)


def default_eval_points(dom) -> np.ndarray:
    """Center of the bounding box plus four axis-aligned offsets at 45%
    of the half-span; all five land inside balls and boxes alike."""
    lo, hi = geometry.bounding_box(dom)
    c = 0.5 * (lo + hi)
    h = 0.45 * 0.5 * (hi - lo)
    pts = [c]
    for k in range(len(c)):
        for s in (+1.0, -1.0):
            p = c.copy()
            p[k] += s * h[k]
            pts.append(p)
    return np.asarray(pts)


# ---------------------------------------------------------------------------
# shared engine pieces

def _phi_closure(boundary_data) -> Optional[Callable]:
    if fields.is_zero_field(boundary_data):
        return None
    if callable(boundary_data):
        fn = boundary_data
        return lambda p: np.asarray(fn(np.atleast_2d(p)), dtype=float)
    c = float(boundary_data)
    return lambda p: np.full(np.atleast_2d(p).shape[0], c)


def _source_closure(source) -> Optional[Callable]:
    if fields.is_zero_field(source):
        return None
    return lambda x: fields.eval_scalar(source, x)


def _check_points(dom, eval_points) -> np.ndarray:
    if eval_points is None:
        return default_eval_points(dom)
    pts = np.atleast_2d(np.asarray(eval_points, dtype=float))
    if not np.all(geometry.contains(dom, pts)):
        raise ConfigError("evaluation points must lie inside the domain")
    return pts


def _gauge_check(dom, tc, x0, cfg: McConfig, stream) -> functionals.GaugeReport:
    """Solvability pre-check: the weighted boundary local-time integral
    must look summable, otherwise the representation has no finite value.
    Runs on a reduced path count and a dedicated diagnostic stream."""
    weight = "zhat" if tc.v is not None else "z"
    # The tail-fraction rule needs a horizon of several decay times to
    # separate a decaying gauge from a divergent one, even when the solve
    # itself runs on a short horizon; floor the check at 6 time units.
    T_g = float(min(max(2.0 * cfg.t_max / 3.0, 6.0), 10.0))
    dt_g = max(cfg.dt, 1e-3)
    n_g = min(cfg.n_paths, cfg.gauge_paths)
    rep = functionals.gauge_estimate(dom, tc, x0, T_g, dt_g, n_g, stream,
                                     workers=cfg.workers, scheme=cfg.scheme,
                                     v=tc.v, weight=weight, chunk=cfg.chunk)
    if rep.divergent:
        raise GaugeDiverges(
            "weighted boundary local time is not summable: first half "
            f"{rep.half.value:.4g}, added tail {rep.tail.value:.4g} "
            f"(beta_hat={rep.beta_hat:.3g}); the solvability hypothesis "
            "fails at this configuration")
    return rep


def _point_estimates(dom, tc, F_fn, phi_fn, points, cfg: McConfig, stream,
                     *, check_decay: bool = True
                     ) -> Tuple[List[Estimate], List[Dict]]:
    """One independent ensemble per evaluation point.

    Per path the engine accumulates W = -I_F + kappa_l * I_phi where I_F
    is the discounted running source integral and I_phi the discounted
    boundary integral against local time; the estimate is mean(W) with
    the spread of W as its standard error.  Half/full-horizon weight
    snapshots give the empirical decay rate and a geometric tail bound;
    a rate at or below ``cfg.beta_min`` with nonzero data means the
    infinite-horizon integral cannot be truncated (NoDecay).
    """
    n_steps = int(round(cfg.t_max / cfg.dt))
    half = n_steps // 2
    req = EnsembleRequest(
        mode="L1", weight="eta", source=F_fn, boundary=phi_fn,
        combo=(-1.0, cfg.kappa_l), snapshots=(half, n_steps),
        half_boundary=phi_fn is not None, v=tc.v,
        track_sup_source=F_fn is not None)
    values: List[Estimate] = []
    diags: List[Dict] = []
    for i, p in enumerate(points):
        if F_fn is None and phi_fn is None:
            values.append(Estimate(0.0, 0.0, cfg.n_paths, cfg.t_max))
            diags.append({"beta_hat": float("inf"), "tail_bound": 0.0})
            continue
        res = run_ensemble(dom, tc, p, cfg.t_max, cfg.dt, cfg.n_paths,
                           stream.child(TAG_POINT, i), req,
                           workers=cfg.workers, chunk=cfg.chunk,
                           scheme=cfg.scheme)
        m_half = res[f"snap_{half}"].value
        m_full = res[f"snap_{n_steps}"].value
        if m_half > 0.0 and m_full > 0.0:
            beta_hat = 2.0 / cfg.t_max * np.log(m_half / m_full)
        else:
            beta_hat = 0.0
        if check_decay and beta_hat <= cfg.beta_min:
            raise NoDecay(
                f"weight mean decays at rate {beta_hat:.3g} over "
                f"[0, {cfg.t_max:g}] (snapshots {m_half:.3g} -> "
                f"{m_full:.3g}); the time integral cannot be truncated")
        r = min(m_full / m_half, 0.999) if m_half > 0 else 0.999
        tail = 0.0
        if F_fn is not None and beta_hat > 0:
            tail += res.sup_source * m_full / beta_hat
        if phi_fn is not None:
            bt = res["boundary_tail"]
            tail += abs(cfg.kappa_l) * (abs(bt.value) + 3.0 * bt.stderr) \
                * r / (1.0 - r)
        values.append(res["combo"])
        diags.append({"beta_hat": float(beta_hat), "tail_bound": float(tail),
                      "weight_half": float(m_half), "weight_full": float(m_full)})
    return values, diags


# ---------------------------------------------------------------------------
# linear solver

def solve_linear(spec: ProblemSpec, eval_points=None,
                 cfg: Optional[McConfig] = None, seed=0) -> SolutionField:
    """Pointwise solution of (operator) u = source with flux data.

    The estimator is linear in (source, boundary_data) path by path, so
    under a shared seed doubling both exactly doubles every value.
    """
    if spec.form != "linear":
        raise ConfigError("solve_linear expects a spec with form='linear'")
    cfg = cfg or McConfig()
    t0 = time.perf_counter()
    tc = functionals.as_transformed(spec.coeffs)
    points = _check_points(spec.dom, eval_points)
    F_fn = _source_closure(spec.source)
    phi_fn = _phi_closure(spec.boundary_data)
    stream = functionals._as_stream(seed)

    gauge = None
    if F_fn is not None or phi_fn is not None:
        gauge = _gauge_check(spec.dom, tc, points[0], cfg, stream)
    values, diags = _point_estimates(spec.dom, tc, F_fn, phi_fn, points,
                                     cfg, stream)
    meta = {
        "form": "linear",
        "seed": seed,
        "kappa_l": cfg.kappa_l,
        "n_paths": cfg.n_paths,
        "dt": cfg.dt,
        "t_max": cfg.t_max,
        "gauge": _gauge_meta(gauge),
        "per_point": diags,
        "wall_time": time.perf_counter() - t0,
    }
    return SolutionField(points=points, values=values, meta=meta)


def _gauge_meta(rep: Optional[functionals.GaugeReport]) -> Optional[Dict]:
    if rep is None:
        return None
    return {"value": rep.estimate.value, "stderr": rep.estimate.stderr,
            "tail": rep.tail.value, "tail_bound": rep.tail_bound,
            "beta_hat": rep.beta_hat, "visit_rate": rep.visit_rate,
            "divergent": rep.divergent}


# ---------------------------------------------------------------------------
# semilinear solver

def _regress(basis: bsde.RegressionBasis, x: np.ndarray,
             targets: np.ndarray) -> Callable:
    """Least-squares fit on the basis returning a predictor usable at new
    points; mirrors the backward solver's fit (degenerate columns dropped,
    rest standardized, explicit intercept)."""
    X = basis.design(x)
    std = X.std(axis=0)
    mean = X.mean(axis=0)
    keep = std > 1e-10 * np.maximum(1.0, np.abs(mean))
    mk, sk = mean[keep], std[keep]
    D = np.column_stack([np.ones(len(x)), (X[:, keep] - mk) / sk])
    beta, *_ = np.linalg.lstsq(D, targets, rcond=None)

    def predict(pts):
        P = basis.design(np.atleast_2d(pts))
        Dp = np.column_stack([np.ones(len(P)), (P[:, keep] - mk) / sk])
        return Dp @ beta

    return predict


def _field_mesh(dom, cfg: McConfig) -> reference.CartesianMesh:
    lo, hi = geometry.bounding_box(dom)
    return reference.CartesianMesh(lo=np.asarray(lo, dtype=float),
                                   hi=np.asarray(hi, dtype=float),
                                   nx=cfg.mesh_nodes, ny=cfg.mesh_nodes)


def _semilinear_engine(dom, tc, gen: Optional[fields.Nonlinearity], phi_fn,
                       points, cfg: McConfig, stream,
                       picard_tol: float) -> SolutionField:
    """Damped fixed-point loop over regression-fitted solution fields.

    Every sweep runs one ensemble from uniform interior starts with the
    source frozen at the current field, F_m(x) = -G(x, u_m(x)), fits the
    per-path functionals on the regression basis, evaluates the fit on
    the interpolation mesh, and mixes it into the previous field with
    weight PICARD_DAMPING.  All sweeps reuse the same starts and the same
    random increments (common random numbers), which makes the sweep a
    deterministic contraction of the field; with fresh noise per sweep
    the sup-change would plateau at the fit-noise floor instead of
    converging.  A source without u-feedback needs exactly one sweep.

    The field only fixes the source; the reported values come from
    dedicated per-point ensembles afterwards, so their standard errors
    are honest Monte-Carlo errors.
    """
    t0 = time.perf_counter()
    if geometry.dim(dom) != 2:
        raise ConfigError("the field fixed point is implemented for d=2")
    basis = bsde.default_basis(dom)
    mesh = _field_mesh(dom, cfg)
    nodes = mesh.node_coords()
    inside = geometry.contains(dom, nodes)
    n_fit, T_f, dt_f = cfg.field_settings()
    use_z = gen is not None and gen.d2 > 0

    gauge = None
    if gen is not None or phi_fn is not None:
        gauge = _gauge_check(dom, tc, points[0], cfg, stream)

    u_vals = np.zeros(len(nodes))
    u_field = reference.GridFunction(mesh, u_vals)
    history: List[float] = []
    converged = gen is None and phi_fn is None
    iterations = 0

    def probe_feedback() -> bool:
        """Does the generator actually read its value slot?  Declared
        monotonicity constants force the damped loop; otherwise compare
        evaluations at two value levels on a few interior nodes."""
        if gen is None:
            return False
        if gen.d1 != 0.0 or gen.d2 != 0.0:
            return True
        xp = nodes[inside][:5]
        za = np.zeros_like(xp) if use_z else None
        fa = np.asarray(gen.fn(xp, np.zeros(len(xp)), za), dtype=float)
        fb = np.asarray(gen.fn(xp, np.full(len(xp), 0.7731), za), dtype=float)
        return not np.array_equal(fa, fb)

    has_feedback = probe_feedback()
    # without feedback the sweep map is constant, so take it undamped
    # and stop after the single sweep it needs
    damping = PICARD_DAMPING if has_feedback else 1.0

    def frozen_source(field_now) -> Optional[Callable]:
        if gen is None:
            return None

        def F_fn(x):
            x = np.atleast_2d(np.asarray(x, dtype=float))
            y = field_now.value(x)
            z = field_now.gradient(x) if use_z else None
            return -np.asarray(gen.fn(x, y, z), dtype=float)

        return F_fn

    sub = stream.child(TAG_PICARD, 0)
    starts = geometry.sample_interior(
        dom, sub.child(TAG_INNER, 0).generator(), n_fit) \
        if not converged else None
    while not converged and iterations < cfg.max_picard:
        req = EnsembleRequest(mode="L1", weight="eta",
                              source=frozen_source(u_field), boundary=phi_fn,
                              combo=(-1.0, cfg.kappa_l), v=tc.v,
                              keep_samples=("combo",))
        res = run_ensemble(dom, tc, starts, T_f, dt_f, n_fit, sub, req,
                           workers=cfg.workers, chunk=cfg.chunk,
                           scheme=cfg.scheme)
        predict = _regress(basis, starts, res.samples["combo"])
        new_vals = (1.0 - damping) * u_vals + damping * predict(nodes)
        delta = float(np.max(np.abs((new_vals - u_vals)[inside])))
        history.append(delta)
        u_vals = new_vals
        u_field = reference.GridFunction(mesh, u_vals)
        iterations += 1
        if gen is None or not has_feedback or delta <= picard_tol:
            converged = True
        elif len(history) >= 4 and history[-1] > 0.5 * history[-4]:
            raise PicardStalled(
                f"sup-change failed to halve over 3 iterations "
                f"({history[-4]:.4g} -> {history[-1]:.4g} at iteration "
                f"{iterations}); the fixed-point map is not contracting "
                "at these settings")
    if not converged:
        raise PicardStalled(
            f"no convergence after {cfg.max_picard} iterations "
            f"(last sup-change {history[-1]:.4g} > tol {picard_tol:g})")
    iterations = max(iterations, 1)

    values, diags = _point_estimates(dom, tc, frozen_source(u_field), phi_fn,
                                     points, cfg, stream)
    meta = {
        "form": "semilinear",
        "kappa_l": cfg.kappa_l,
        "n_paths": cfg.n_paths,
        "dt": cfg.dt,
        "t_max": cfg.t_max,
        "iterations": iterations,
        "picard_history": history,
        "picard_tol": picard_tol,
        "field": u_field,
        "field_range": (float(u_vals[inside].min()),
                        float(u_vals[inside].max())),
        "gauge": _gauge_meta(gauge),
        "per_point": diags,
        "wall_time": time.perf_counter() - t0,
    }
    return SolutionField(points=np.asarray(points), values=values, meta=meta)


def solve_semilinear(spec: ProblemSpec, eval_points=None,
                     cfg: Optional[McConfig] = None, seed=0,
                     picard_tol: float = 2e-3) -> SolutionField:
    """Semilinear Neumann problem (operator) u = -G(x, u, grad u).

    A trivial spec (source None or the zero field, no boundary data)
    short-circuits to the exact zero field after one sweep.  Gradient
    coupling (d2 > 0) runs through mesh-interpolated gradients and is
    experimental.
    """
    if spec.form != "semilinear":
        raise ConfigError("solve_semilinear expects form='semilinear'")
    cfg = cfg or McConfig()
    tc = functionals.as_transformed(spec.coeffs)
    points = _check_points(spec.dom, eval_points)
    gen = None
    if spec.source is not None and not fields.is_zero_field(spec.source):
        gen = spec.source
    phi_fn = _phi_closure(spec.boundary_data)
    stream = functionals._as_stream(seed)
    out = _semilinear_engine(spec.dom, tc, gen, phi_fn, points, cfg, stream,
                             picard_tol)
    out.meta["seed"] = seed
    return out


# ---------------------------------------------------------------------------
# mixed problem: potential transform round trip

def _as_generator(source) -> Optional[fields.Nonlinearity]:
    """Lift a plain scalar source into the u-independent Nonlinearity it is."""
    if source is None or fields.is_zero_field(source):
        return None
    if isinstance(source, fields.Nonlinearity):
        return source
    fn = source

    def wrapped(x, y, z=None):
        vals = np.asarray(fields.eval_scalar(fn, x), dtype=float)
        return np.broadcast_to(vals, np.shape(y)).copy()

    return fields.Nonlinearity(fn=wrapped, d1=0.0, d2=0.0, name="plain-source")


def solve_mixed_full(spec: ProblemSpec, eval_points=None,
                     cfg: Optional[McConfig] = None, seed=0,
                     picard_tol: float = 2e-3,
                     eps_cfg: float = 0.5) -> SolutionField:
    """Full pipeline for the divergence-drift problem.

    (1) solve the potential's weak equation on the reference mesh and
    rescale it onto the engine's operator split; (2) fold drift and
    potential into regular coefficients; (3) tilt source and boundary
    data by exp(potential); (4) run the semilinear fixed point; (5)
    untilt the answer pointwise.  With a vanishing rough drift every
    stage is the identity and the call reproduces solve_semilinear
    bit for bit under a shared seed.
    """
    if spec.form != "mixed":
        raise ConfigError("solve_mixed_full expects form='mixed'")
    cfg = cfg or McConfig()
    t0 = time.perf_counter()
    points = _check_points(spec.dom, eval_points)
    stream = functionals._as_stream(seed)
    gen = _as_generator(spec.source)
    phi_fn = _phi_closure(spec.boundary_data)
    small = smallness_check(spec.dom, spec.coeffs,
                            spec.coeffs.p_exponent, eps_cfg=eps_cfg)
    if not small.passed:
        warnings.warn(SmallnessViolated(
            f"rough drift L^{small.p_exponent:g} norm {small.norm:.4g} "
            f"exceeds the configured threshold {small.eps_cfg:g}; "
            "continuing on the reweighted route"))

    if fields.is_zero_field(spec.coeffs.Bhat):
        tc = fields.plain_coefficients(spec.coeffs)
        v_field = None
        gen_t, phi_t = gen, phi_fn
    else:
        v_lit = reference.solve_v(spec.dom, spec.coeffs.A, spec.coeffs.Bhat)
        v_meta = dict(v_lit.meta or {})
        v_meta["scale"] = H_TRANSFORM_SCALE
        v_field = reference.GridFunction(v_lit.mesh,
                                         H_TRANSFORM_SCALE * v_lit.values,
                                         meta=v_meta)
        tc = fields.transform_coefficients(spec.coeffs, v_field)
        gen_t = _tilt_generator(gen, v_field)
        phi_t = _tilt_boundary(phi_fn, v_field)
        if gen is not None and gen.d2 > 0:
            raise ConfigError("gradient coupling is not supported on the "
                              "divergence-drift route")

    sol = _semilinear_engine(spec.dom, tc, gen_t, phi_t, points, cfg, stream,
                             picard_tol)
    if v_field is None:
        values = sol.values
    else:
        scale = np.exp(-np.asarray(v_field.value(points), dtype=float))
        values = [Estimate(s * e.value, s * e.stderr, e.n_paths, e.horizon)
                  for s, e in zip(scale, sol.values)]
    meta = dict(sol.meta)
    meta["form"] = "mixed"
    meta["seed"] = seed
    meta["smallness"] = {"norm": small.norm, "eps_cfg": small.eps_cfg,
                         "p_exponent": small.p_exponent,
                         "passed": small.passed}
    if v_field is not None:
        meta["v"] = v_field
        vin = v_field.values
        meta["v_range"] = (float(vin.min()), float(vin.max()))
        nodes = _field_mesh(spec.dom, cfg).node_coords()
        mask = geometry.contains(spec.dom, nodes)
        qv = fields.eval_scalar(tc.q, nodes[mask])
        meta["transformed_q_range"] = (float(np.min(qv)), float(np.max(qv)))
    else:
        meta["v_range"] = (0.0, 0.0)
    meta["wall_time"] = time.perf_counter() - t0
    return SolutionField(points=sol.points, values=values, meta=meta)


def _tilt_generator(gen: Optional[fields.Nonlinearity],
                    v) -> Optional[fields.Nonlinearity]:
    if gen is None:
        return None
    base = gen.fn

    def fn(x, y, z=None):
        ev = np.exp(np.asarray(v.value(x), dtype=float))
        return ev * np.asarray(base(x, np.asarray(y, dtype=float) / ev, z),
                               dtype=float)

    return fields.Nonlinearity(fn=fn, d1=gen.d1, d2=gen.d2, delta=gen.delta,
                               bound=gen.bound, name=gen.name + "~tilted")


def _tilt_boundary(phi_fn: Optional[Callable], v) -> Optional[Callable]:
    if phi_fn is None:
        return None

    def tilted(p):
        p = np.atleast_2d(p)
        return np.exp(np.asarray(v.value(p), dtype=float)) * phi_fn(p)

    return tilted


# ---------------------------------------------------------------------------
# hypothesis checks and calibration

@dataclass(frozen=True)
class SmallnessReport:
    norm: float
    p_exponent: float
    eps_cfg: float
    passed: bool
    n_cells: int


def smallness_check(dom, coeffs: fields.CoefficientSet,
                    p_exponent: Optional[float] = None, *,
                    eps_cfg: float = 0.5,
                    resolution: Optional[Tuple[int, int]] = None
                    ) -> SmallnessReport:
    """Integral-norm size of the rough drift by midpoint quadrature.

    The solvability theory only guarantees a threshold exists; eps_cfg
    is a configured stand-in and the verdict is heuristic.  Field values
    are capped at 1e8 so integrable point singularities cannot poison
    the sum through an unlucky quadrature node.
    """
    p = float(p_exponent if p_exponent is not None else coeffs.p_exponent)
    if p <= 0:
        raise ConfigError("the integrability exponent must be positive")
    if fields.is_zero_field(coeffs.Bhat):
        return SmallnessReport(0.0, p, eps_cfg, True, 0)
    mesh = reference.mesh_for(dom, resolution)
    pts, w = reference.cell_quadrature(mesh)
    mag = np.linalg.norm(
        np.asarray(fields.eval_vector(coeffs.Bhat, pts), dtype=float), axis=1)
    mag = np.minimum(mag, 1e8)
    norm = float(np.sum(w * mag ** p) ** (1.0 / p))
    return SmallnessReport(norm, p, eps_cfg, norm <= eps_cfg, len(w))


def markov_consistency_check(spec: ProblemSpec, x0, t_probe: float,
                             cfg: Optional[McConfig] = None, seed=0,
                             picard_tol: float = 2e-3,
                             budget: float = 0.02) -> Dict[str, object]:
    """Cross-check the two faces of the same solution.

    The fixed-point field says u; the backward-regression route says the
    value process at time t along the same diffusion should be u(X_t).
    This runs both and reports the mean absolute gap between the fitted
    time-t values and the field evaluated at the simulated states.
    ``budget`` is the allowance for mesh interpolation and regression
    bias on top of 3 standard errors.
    """
    if spec.form != "semilinear":
        raise ConfigError("the Markov check expects form='semilinear'")
    cfg = cfg or McConfig()
    x0 = np.asarray(x0, dtype=float)
    sol = solve_semilinear(spec, [x0], cfg, seed, picard_tol)
    field_fn = sol.meta["field"]
    tc = functionals.as_transformed(spec.coeffs)

    gen = spec.source if isinstance(spec.source, fields.Nonlinearity) \
        else fields.Nonlinearity(fn=lambda x, y, z=None: np.zeros(len(np.atleast_2d(x))))
    folded = gen.shifted(tc.q)
    dt_b = max(cfg.dt, 2e-3)
    horizon = t_probe + 8.0
    n_steps = int(round(horizon / dt_b))
    probe_step = int(round(t_probe / dt_b))
    if not 0 < probe_step < n_steps:
        raise ConfigError("probe time must fall strictly inside the horizon")
    problem = bsde.BsdeProblem(generator=folded,
                               boundary_data=spec.boundary_data, mode="L2")
    n_b = min(cfg.n_paths, 4000)
    bs = bsde.solve_truncated(problem, spec.dom, spec.coeffs, x0, horizon,
                              dt_b, n_b, seed=functionals._as_stream(seed)
                              .child(TAG_INNER, 1),
                              kappa_l=cfg.kappa_l, scheme=cfg.scheme,
                              probe_step=probe_step)
    states, fitted = bs.diagnostics["probe"]
    gaps = np.asarray(field_fn.value(states), dtype=float) - fitted
    mean_abs = float(np.mean(np.abs(gaps)))
    se = float(np.std(np.abs(gaps)) / np.sqrt(len(gaps)))
    return {
        "mean_abs": mean_abs,
        "stderr": se,
        "budget": budget,
        "passed": mean_abs <= 3.0 * se + budget,
        "t_probe": float(t_probe),
        "probe_step": probe_step,
        "n_paths": n_b,
        "field_value_x0": float(field_fn.value(x0)[0]),
        "bsde_y0": bs.y0.value,
    }


def calibrate_kappa(cfg: Optional[McConfig] = None, seed=0,
                    candidates: Sequence[float] = (-2.0, -1.0, 1.0, 2.0)
                    ) -> Dict[str, object]:
    """Fix the boundary-weight constant against the deterministic oracle.

    One ensemble per evaluation point records the source and boundary
    integrals separately, so every candidate constant is scored from the
    same paths.  The constant-solution family pins the source sign; the
    quadratic family (whose flux datum is nonzero) separates the
    boundary candidates by about 0.8 per unit of kappa, far above the
    Monte-Carlo noise.  The winner is frozen as KAPPA_L and asserted by
    a regression test.
    """
    cfg = cfg or McConfig(n_paths=6000, dt=2e-3, t_max=10.0)
    dom = geometry.ball((0.0, 0.0), 1.0)
    coeffs = fields.CoefficientSet(A=np.eye(2), Q=-1.0)
    quad = fields.quadratic_radial()
    f_quad = lambda x: 2.0 - quad.value(x)

    spec_const = ProblemSpec(dom=dom, coeffs=coeffs, source=1.0,
                             boundary_data=None, form="linear")
    spec_quad = ProblemSpec(dom=dom, coeffs=coeffs, source=f_quad,
                            boundary_data=-1.0, form="linear")
    pts = np.array([[0.0, 0.0], [0.5, 0.0]])

    fd_const = reference.fd_solve(spec_const)
    fd_quad = reference.fd_solve(spec_quad)
    ref_const = np.asarray(fd_const.value(pts), dtype=float)
    ref_quad = np.asarray(fd_quad.value(pts), dtype=float)

    stream = functionals._as_stream(seed)
    tc = fields.plain_coefficients(coeffs)
    n_steps = int(round(cfg.t_max / cfg.dt))

    def parts(spec, tag):
        F_fn = _source_closure(spec.source)
        phi_fn = _phi_closure(spec.boundary_data)
        req = EnsembleRequest(mode="L1", weight="eta", source=F_fn,
                              boundary=phi_fn, snapshots=(n_steps,))
        out = []
        for i, p in enumerate(pts):
            res = run_ensemble(dom, tc, p, cfg.t_max, cfg.dt, cfg.n_paths,
                               stream.child(TAG_POINT, 10 * tag + i), req,
                               workers=cfg.workers, chunk=cfg.chunk,
                               scheme=cfg.scheme)
            i_f = res["source"].value if F_fn is not None else 0.0
            i_phi = res["boundary"].value if phi_fn is not None else 0.0
            out.append((i_f, i_phi))
        return out

    const_parts = parts(spec_const, 0)
    quad_parts = parts(spec_quad, 1)

    source_sign_errors = {
        s: float(max(abs(s * i_f - ref) for (i_f, _), ref
                     in zip(const_parts, ref_const)))
        for s in (-1.0, 1.0)
    }
    chosen_sign = min(source_sign_errors, key=source_sign_errors.get)

    kappa_errors = {
        k: float(max(abs((chosen_sign * i_f + k * i_phi) - ref)
                     for (i_f, i_phi), ref in zip(quad_parts, ref_quad)))
        for k in candidates
    }
    chosen = min(kappa_errors, key=kappa_errors.get)
    return {
        "kappa_errors": kappa_errors,
        "chosen": chosen,
        "source_sign_errors": source_sign_errors,
        "chosen_source_sign": chosen_sign,
        "fd_const": ref_const.tolist(),
        "fd_quad": ref_quad.tolist(),
        "settings": {"n_paths": cfg.n_paths, "dt": cfg.dt,
                     "t_max": cfg.t_max, "seed": seed},
    }
