"""Exponential path weights and the diagnostics built from them.

For the driftless reflected process the weight

    Z_t = exp( sum <A^{-1} b(X_k), dM_k> - (1/2) sum (b A^{-1} b)(X_k) dt
               + sum q(X_k) dt )

turns plain expectations into semigroup actions of the drifted, discounted
generator; its drift part alone is the discrete Girsanov density, exact at
every step because it is the Gaussian likelihood ratio of the proposals.
The module offers both a stored-path weight trace (for invariant tests)
and a streaming ensemble runner that never materializes paths.

Estimator conventions, used consistently by every consumer (the boundary
calibration constant kappa_L is calibrated under exactly these):

* left-point weights: the weight multiplying anything accumulated during
  [t_k, t_{k+1}) uses integrals up to t_k;
* boundary integrands are evaluated at the boundary point actually touched
  by the proposal;
* time integrals are left Riemann sums.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from . import fields, rsde
from .errors import ConfigError, MissingV
from .estimates import Estimate, MomentAccumulator
from .parallel import map_chunks
from .seeding import (DIAG_DECAY, DIAG_GAUGE, DIAG_GIRSANOV, DIAG_SANDWICH,
                      DIAG_SEMIGROUP, RngStream, TAG_CHUNK, TAG_DIAG,
                      TAG_INNER, TAG_POINT)

WEIGHT_KINDS = ("none", "mtilde", "eta", "z", "zhat")


def _as_stream(seed) -> RngStream:
    """Accept either a raw seed or an already-tagged stream."""
    return seed if isinstance(seed, RngStream) else RngStream(int(seed))


def as_transformed(coeffs) -> fields.TransformedCoefficients:
    if isinstance(coeffs, fields.TransformedCoefficients):
        return coeffs
    return fields.plain_coefficients(coeffs)


# ---------------------------------------------------------------------------
# stored-path weight traces

@dataclass(frozen=True)
class WeightTrace:
    """Cumulative log-weights along a stored PathBundle (time axis first)."""

    log_mtilde: np.ndarray           # (K+1, n)
    log_eq: np.ndarray               # (K+1, n)
    log_z: np.ndarray                # (K+1, n)
    log_zhat: Optional[np.ndarray]   # (K+1, n) when a potential was given
    path: rsde.PathBundle


def accumulate_weights(path: rsde.PathBundle, coeffs, v=None,
                       zhat: bool = False) -> WeightTrace:
    """Build the weight trace of a driftless bundle under (b, q).

    ``zhat=True`` additionally requests the potential-shifted weight and
    requires ``v``.
    """
    if zhat and v is None:
        raise MissingV("potential-shifted weight requested without a potential")
    tc = as_transformed(coeffs)
    K, n, d = path.mart_increments.shape
    dt = float(path.times[1] - path.times[0])
    states = path.states

    flat = states[:-1].reshape(K * n, d)
    qvals = fields.eval_scalar(tc.q, flat).reshape(K, n)
    log_eq = np.zeros((K + 1, n))
    np.cumsum(qvals, axis=0, out=log_eq[1:])
    log_eq[1:] *= dt

    log_mtilde = np.zeros((K + 1, n))
    if not fields.is_zero_field(tc.b):
        bvals = fields.eval_vector(tc.b, flat).reshape(K, n, d)
        amat = fields.constant_matrix(tc.A)
        if amat is not None:
            ainv_b = bvals @ np.linalg.inv(amat).T
        else:
            amats = fields.eval_matrix(tc.A, flat).reshape(K, n, d, d)
            ainv_b = np.linalg.solve(amats, bvals)
        incr = (np.einsum("knd,knd->kn", ainv_b, path.mart_increments)
                - 0.5 * np.einsum("knd,knd->kn", bvals, ainv_b) * dt)
        np.cumsum(incr, axis=0, out=log_mtilde[1:])

    log_z = log_mtilde + log_eq
    log_zhat = None
    if v is not None:
        vvals = np.asarray(v.value(states.reshape((K + 1) * n, d)),
                           dtype=float).reshape(K + 1, n)
        log_zhat = log_z + vvals - vvals[0]
    return WeightTrace(log_mtilde=log_mtilde, log_eq=log_eq, log_z=log_z,
                       log_zhat=log_zhat, path=path)


# ---------------------------------------------------------------------------
# streaming ensemble runner

@dataclass(frozen=True)
class EnsembleRequest:
    """What to accumulate along one simulated ensemble.

    weight: which exponential multiplies the accumulants --
      none (plain), mtilde (drift likelihood only), eta (discount only),
      z (drift likelihood + discount), zhat (z with the potential shift).
    combo: optional (c_source, c_boundary) recording the per-path linear
      combination c_source*I_source + c_boundary*I_boundary as "combo".
    snapshots: step indices at which the bare weight is recorded
      ("snap_<k>" outputs), for decay fits and tail bounds.
    half_boundary: also record the boundary integral restricted to the
      first half of the horizon ("boundary_half") and the complementary
      tail ("boundary_tail"), plus raw local time halves ("rawl_half",
      "rawl") for visit-rate reporting.
    keep_samples: accumulant names whose raw per-path arrays are wanted
      back (concatenated in chunk order, so worker-count independent);
      they land in EnsembleResult.samples.
    """

    mode: str = "L0"
    weight: str = "z"
    source: Optional[Callable] = None
    boundary: Optional[Callable] = None
    terminal: Optional[Callable] = None
    combo: Optional[Tuple[float, float]] = None
    snapshots: Tuple[int, ...] = field(default=())
    half_boundary: bool = False
    v: object = None
    track_sup_source: bool = False
    keep_samples: Tuple[str, ...] = field(default=())

    def __post_init__(self):
        if self.weight not in WEIGHT_KINDS:
            raise ConfigError(f"unknown weight kind {self.weight!r}")
        if self.weight == "zhat" and self.v is None:
            raise MissingV("weight 'zhat' requires the potential v")
        if self.mode not in ("L0", "L1"):
            raise ConfigError("mode must be 'L0' or 'L1'")


@dataclass
class EnsembleResult:
    estimates: Dict[str, Estimate]
    sup_source: float
    n_paths: int
    horizon: float
    samples: Optional[Dict[str, np.ndarray]] = None

    def __getitem__(self, key: str) -> Estimate:
        return self.estimates[key]


def run_ensemble(dom, coeffs, x0, T: float, dt: float, n_paths: int,
                 stream: RngStream, req: EnsembleRequest, *,
                 workers: int = 1, chunk: int = 4096,
                 scheme: str = "mirror") -> EnsembleResult:
    """Simulate an ensemble and reduce the requested path functionals.

    ``x0`` is a single point (shared start) or an (n_paths, d) array of
    per-path starts.  Chunk i always draws from stream.child(TAG_CHUNK, i),
    so results are bit-identical for any worker count.  The running source
    integral uses the trapezoid rule in time; boundary increments are
    accumulated as delivered by the stepper.
    """
    tc = as_transformed(coeffs)
    x0 = np.asarray(x0, dtype=float)
    shared_start = x0.ndim == 1
    if not shared_start and x0.shape[0] != n_paths:
        raise ConfigError("per-path starts must match n_paths")
    n_steps = int(round(T / dt))
    if n_steps < 1:
        raise ConfigError("horizon shorter than one step")
    if chunk < 1:
        raise ConfigError("chunk must be positive")

    need_mtilde = req.weight in ("mtilde", "z", "zhat") and not fields.is_zero_field(tc.b)
    need_eta = req.weight in ("eta", "z", "zhat")
    q_const = None if callable(tc.q) else float(tc.q)
    amat = fields.constant_matrix(tc.A)
    ainv = np.linalg.inv(amat) if amat is not None else None
    half_idx = n_steps // 2
    req_snap_set = set(int(s) for s in req.snapshots)

    def task(index: int, size: int):
        stepper = rsde.ReflectedStepper(dom, tc.A, dt, scheme)
        drift = rsde.drift_function(tc, dom, req.mode)
        gen = stream.child(TAG_CHUNK, index).generator()
        if shared_start:
            start = np.broadcast_to(x0, (size, x0.shape[-1])).copy()
        else:
            start = x0[index * chunk: index * chunk + size].copy()
        d = start.shape[1]

        mlog = np.zeros(size)
        qsum = 0.0 if q_const is not None else np.zeros(size)
        acc: Dict[str, np.ndarray] = {}
        first_src = None
        if req.source is not None:
            acc["source"] = np.zeros(size)
        if req.boundary is not None:
            acc["boundary"] = np.zeros(size)
            if req.half_boundary:
                acc["rawl"] = np.zeros(size)
        snaps: Dict[int, np.ndarray] = {}
        sup_source = 0.0
        v0 = None
        if req.weight == "zhat":
            v0 = np.asarray(req.v.value(start), dtype=float)

        def current_logw(x):
            """Cumulative log-weight at the current step, always as an
            (n,) array so the exponential takes one code path (vectorized
            exp can round differently from scalar exp, which would break
            the exact shared-seed reductions we promise)."""
            if req.weight == "none":
                return None
            logw = 0.0
            if need_mtilde:
                logw = logw + mlog
            if need_eta:
                logw = logw + qsum * dt
            if req.weight == "zhat":
                logw = logw + np.asarray(req.v.value(x), dtype=float) - v0
            if not isinstance(logw, np.ndarray):
                logw = np.full(size, logw)
            return logw

        def weight_at(x):
            logw = current_logw(x)
            if logw is None:
                return np.ones(size)
            return np.exp(logw)

        for step in rsde.walk(stepper, start, n_steps, gen, drift):
            k = step.index
            if k in req_snap_set:
                snaps[k] = weight_at(step.x)
            if req.source is not None:
                fvals = np.asarray(req.source(step.x), dtype=float)
                if req.track_sup_source and fvals.size:
                    sup_source = max(sup_source, float(np.abs(fvals).max()))
                contrib = weight_at(step.x) * fvals * dt
                if k == 0:
                    first_src = contrib
                acc["source"] += contrib
            if req.boundary is not None and np.any(step.touched):
                idx = np.nonzero(step.touched)[0]
                pts = step.touch_points[idx]
                logw = current_logw(step.x)
                w = np.ones(len(idx)) if logw is None else np.exp(logw[idx])
                acc["boundary"][idx] += w * np.asarray(req.boundary(pts), dtype=float) \
                    * step.dl[idx]
                if req.half_boundary:
                    acc["rawl"][idx] += step.dl[idx]
            if req.half_boundary and k + 1 == half_idx:
                acc["boundary_half"] = acc["boundary"].copy()
                acc["rawl_half"] = acc["rawl"].copy()
            # advance the weights with this step's increments (left point)
            if need_mtilde:
                bvals = fields.eval_vector(tc.b, step.x)
                ainv_b = bvals @ ainv.T if ainv is not None else np.linalg.solve(
                    fields.eval_matrix(tc.A, step.x), bvals)
                mlog += (np.einsum("nd,nd->n", ainv_b, step.dm)
                         - 0.5 * np.einsum("nd,nd->n", bvals, ainv_b) * dt)
            if need_eta or req.weight == "z" or req.weight == "zhat":
                if q_const is not None:
                    qsum += q_const
                else:
                    qsum += fields.eval_scalar(tc.q, step.x)
            x_final = step.x_next

        if req.source is not None:
            # Trapezoid end-correction for the time integral: the plain
            # left-point sum carries an O(dt) bias that would dominate the
            # statistical error on low-variance problems.
            f_end = np.asarray(req.source(x_final), dtype=float)
            if req.track_sup_source and f_end.size:
                sup_source = max(sup_source, float(np.abs(f_end).max()))
            acc["source"] += 0.5 * (weight_at(x_final) * f_end * dt - first_src)
        if n_steps in req_snap_set:
            snaps[n_steps] = weight_at(x_final)
        if req.terminal is not None:
            acc["terminal"] = weight_at(x_final) * np.asarray(
                req.terminal(x_final), dtype=float)
        if req.combo is not None:
            c_src, c_bnd = req.combo
            acc["combo"] = (c_src * acc.get("source", np.zeros(size))
                            + c_bnd * acc.get("boundary", np.zeros(size)))
        if req.half_boundary:
            if "boundary_half" not in acc:  # horizon of a single step
                acc["boundary_half"] = np.zeros(size)
                acc["rawl_half"] = np.zeros(size)
            acc["boundary_tail"] = acc["boundary"] - acc["boundary_half"]
        for k, w in snaps.items():
            acc[f"snap_{k}"] = w
        partial = {key: (vals.sum(), float(np.sum(vals * vals)), size)
                   for key, vals in acc.items()}
        kept = {key: acc[key].copy() for key in req.keep_samples if key in acc}
        return partial, sup_source, kept

    req_snap_set = set(int(s) for s in req.snapshots)
    accs: Dict[str, MomentAccumulator] = {}
    sample_parts: Dict[str, list] = {key: [] for key in req.keep_samples}
    sup_source = 0.0
    for partial, sup, kept in map_chunks(task, n_paths, chunk, workers):
        sup_source = max(sup_source, sup)
        for key, (s, s2, cnt) in partial.items():
            accs.setdefault(key, MomentAccumulator()).add_partial(s, s2, cnt)
        for key, vals in kept.items():
            sample_parts[key].append(vals)
    estimates = {key: a.estimate(horizon=T) for key, a in accs.items()}
    samples = None
    if req.keep_samples:
        samples = {key: np.concatenate(parts) if parts else np.empty(0)
                   for key, parts in sample_parts.items()}
    return EnsembleResult(estimates=estimates, sup_source=sup_source,
                          n_paths=n_paths, horizon=T, samples=samples)


# ---------------------------------------------------------------------------
# diagnostics

def semigroup_estimate(dom, coeffs, x0, f: Callable, t: float, dt: float,
                       n_paths: int, seed, *, workers: int = 1,
                       scheme: str = "mirror", v=None,
                       weight: str = "z") -> Estimate:
    """E0_x[ W_t f(X0_t) ] with W the requested weight (default the full
    drift+discount weight, i.e. the semigroup action on f)."""
    stream = _as_stream(seed).child(TAG_DIAG, DIAG_SEMIGROUP)
    req = EnsembleRequest(mode="L0", weight=weight, terminal=f, v=v)
    res = run_ensemble(dom, coeffs, x0, t, dt, n_paths, stream, req,
                       workers=workers, scheme=scheme)
    return res["terminal"]


@dataclass(frozen=True)
class GirsanovReport:
    lhs: Estimate   # driftless run weighted by the drift likelihood
    rhs: Estimate   # drifted run, plain expectation
    gap: float
    gap_over_se: float


def girsanov_consistency(dom, coeffs, x0, f: Callable, t: float, dt: float,
                         n_paths: int, seed, *, workers: int = 1,
                         scheme: str = "mirror") -> GirsanovReport:
    """Twin estimates of E[f(X_t)] under the drifted measure.

    Both runs consume identical noise (same chunk streams), so with b = 0
    they agree exactly; with b != 0 their gap is pure discretization and
    sampling error.
    """
    stream = _as_stream(seed).child(TAG_DIAG, DIAG_GIRSANOV)
    lhs = run_ensemble(dom, coeffs, x0, t, dt, n_paths, stream,
                       EnsembleRequest(mode="L0", weight="mtilde", terminal=f),
                       workers=workers, scheme=scheme)["terminal"]
    rhs = run_ensemble(dom, coeffs, x0, t, dt, n_paths, stream,
                       EnsembleRequest(mode="L1", weight="none", terminal=f),
                       workers=workers, scheme=scheme)["terminal"]
    gap = abs(lhs.value - rhs.value)
    se = lhs.combined_se(rhs)
    return GirsanovReport(lhs=lhs, rhs=rhs, gap=gap,
                          gap_over_se=gap / se if se > 0 else np.inf)


@dataclass(frozen=True)
class GaugeReport:
    """Truncated expected weighted boundary local time and its tail health."""

    estimate: Estimate        # integral over [0, T_max]
    half: Estimate            # integral over [0, T_max/2]
    tail: Estimate            # their difference, with its own SE
    divergent: bool
    tail_bound: float         # geometric extrapolation beyond T_max
    beta_hat: float
    visit_rate: float

    @property
    def value(self) -> float:
        return self.estimate.value


# a tail adding more than this fraction of the first half (beyond noise)
# marks the partial sums as non-Cauchy
GAUGE_TAIL_FRACTION = 0.3


def gauge_estimate(dom, coeffs, x0, T_max: float, dt: float, n_paths: int,
                   seed: int, *, workers: int = 1, scheme: str = "mirror",
                   v=None, weight: str = "z",
                   chunk: int = 4096) -> GaugeReport:
    """Truncated gauge E0_x[int_0^{T_max} W_s dL_s] with divergence check.

    The check compares the second-half contribution against the first
    half: a geometric-decay weight makes the tail a vanishing fraction,
    while a non-decaying one contributes about equally, which is flagged
    as divergent (the solvability hypothesis fails numerically).
    """
    if T_max < 1.0:
        raise ConfigError("gauge truncation horizon must be at least 1")
    stream = _as_stream(seed).child(TAG_DIAG, DIAG_GAUGE)
    n_steps = int(round(T_max / dt))
    req = EnsembleRequest(mode="L0", weight=weight, v=v,
                          boundary=lambda p: np.ones(p.shape[0]),
                          half_boundary=True,
                          snapshots=(n_steps // 2, n_steps))
    res = run_ensemble(dom, coeffs, x0, T_max, dt, n_paths, stream, req,
                       workers=workers, chunk=chunk, scheme=scheme)
    full = res["boundary"]
    half = res["boundary_half"]
    tail = res["boundary_tail"]
    floor = 1e-12
    divergent = bool(half.value > floor
                     and tail.value > GAUGE_TAIL_FRACTION * half.value
                     + 2.0 * tail.stderr)
    m_half = res[f"snap_{n_steps // 2}"].value
    m_full = res[f"snap_{n_steps}"].value
    if m_half > 0 and m_full > 0 and m_full < m_half:
        beta_hat = float(np.log(m_half / m_full) / (T_max / 2.0))
    else:
        beta_hat = 0.0
    rate = max(res["rawl"].value - res["rawl_half"].value, 0.0) / (T_max / 2.0)
    tail_bound = (m_full * rate / beta_hat) if beta_hat > 0 else np.inf
    return GaugeReport(estimate=full, half=half, tail=tail,
                       divergent=divergent, tail_bound=tail_bound,
                       beta_hat=beta_hat, visit_rate=rate)


@dataclass(frozen=True)
class DecayFit:
    """Log-linear fit of sup-over-starts weight means against time."""

    k_hat: float
    beta_hat: float
    residual: float
    times_used: Tuple[float, ...]
    dropped: Tuple[float, ...]
    sup_means: Dict[float, Estimate]


def decay_rate_estimate(dom, coeffs, x0_set: Sequence, t_grid: Sequence[float],
                        dt: float, n_paths: int, seed: int, *,
                        workers: int = 1, scheme: str = "mirror",
                        v=None, weight: str = "z") -> DecayFit:
    """Fit sup_x E0_x[W_t] ~ K exp(-beta t) over the time grid.

    Times whose sup mean is nonpositive cannot enter the log fit; they are
    dropped and reported.  beta_hat <= 0 is a reported outcome, not an
    error.
    """
    t_grid = sorted(float(t) for t in t_grid)
    if len(t_grid) < 3:
        raise ConfigError("decay fit needs at least 3 grid times")
    T = t_grid[-1]
    snap_idx = [int(round(t / dt)) for t in t_grid]
    stream = _as_stream(seed).child(TAG_DIAG, DIAG_DECAY)
    sup_means: Dict[float, Estimate] = {}
    for i, x0 in enumerate(np.atleast_2d(np.asarray(x0_set, dtype=float))):
        req = EnsembleRequest(mode="L0", weight=weight, v=v,
                              snapshots=tuple(snap_idx))
        res = run_ensemble(dom, coeffs, x0, T, dt, n_paths,
                           stream.child(TAG_POINT, i), req,
                           workers=workers, scheme=scheme)
        for t, k in zip(t_grid, snap_idx):
            est = res[f"snap_{k}"]
            if t not in sup_means or est.value > sup_means[t].value:
                sup_means[t] = est
    used, dropped, logs = [], [], []
    for t in t_grid:
        if sup_means[t].value > 0:
            used.append(t)
            logs.append(np.log(sup_means[t].value))
        else:
            dropped.append(t)
    if len(used) < 2:
        return DecayFit(k_hat=np.nan, beta_hat=0.0, residual=np.nan,
                        times_used=tuple(used), dropped=tuple(dropped),
                        sup_means=sup_means)
    design = np.column_stack([np.ones(len(used)), np.asarray(used)])
    coef, *_ = np.linalg.lstsq(design, np.asarray(logs), rcond=None)
    fit = design @ coef
    return DecayFit(k_hat=float(np.exp(coef[0])), beta_hat=float(-coef[1]),
                    residual=float(np.max(np.abs(fit - logs))),
                    times_used=tuple(used), dropped=tuple(dropped),
                    sup_means=sup_means)


def weighted_localtime_sandwich(dom, coeffs, x0_grid: Sequence, t: float,
                                dt: float, n_paths: int, seed: int, *,
                                workers: int = 1, scheme: str = "mirror"
                                ) -> Tuple[Estimate, Estimate]:
    """(min, max) over starts of E0_x[int_0^t W_s dL_s]."""
    stream = _as_stream(seed).child(TAG_DIAG, DIAG_SANDWICH)
    req = EnsembleRequest(mode="L0", weight="z",
                          boundary=lambda p: np.ones(p.shape[0]))
    lo = hi = None
    for i, x0 in enumerate(np.atleast_2d(np.asarray(x0_grid, dtype=float))):
        est = run_ensemble(dom, coeffs, x0, t, dt, n_paths,
                           stream.child(TAG_POINT, i), req,
                           workers=workers, scheme=scheme)["boundary"]
        if lo is None or est.value < lo.value:
            lo = est
        if hi is None or est.value > hi.value:
            hi = est
    return lo, hi


def semigroup_composition_gap(dom, coeffs, x0, s: float, t: float, dt: float,
                              n_outer: int, n_inner_states: int, n_inner: int,
                              seed: int, *, scheme: str = "mirror",
                              workers: int = 1) -> Tuple[Estimate, Estimate]:
    """Direct estimate of the (s+t)-semigroup action on 1 versus the nested
    two-stage estimate E0[ W_s * (T_t 1)(X0_s) ].

    The nested stage subsamples outer paths and attaches an independent
    inner ensemble to each subsampled state; inner noise enters the
    reported standard error.
    """
    tc = as_transformed(coeffs)
    one = lambda x: np.ones(x.shape[0])
    direct = semigroup_estimate(dom, tc, x0, one, s + t, dt, n_outer, seed,
                                workers=workers, scheme=scheme)
    # outer stage: states and weights at time s
    stream = _as_stream(seed).child(TAG_DIAG, DIAG_SEMIGROUP, TAG_INNER)
    bundle = rsde.simulate_path(dom, tc, "L0", x0, dt, s, stream,
                                n_paths=n_inner_states, scheme=scheme)
    trace = accumulate_weights(bundle, tc)
    z_s = np.exp(trace.log_z[-1])
    states = bundle.states[-1]
    prods = np.empty(n_inner_states)
    inner_var = np.empty(n_inner_states)
    for i in range(n_inner_states):
        inner = semigroup_estimate(dom, tc, states[i], one, t, dt, n_inner,
                                   seed=stream.child(TAG_POINT, i),
                                   workers=workers, scheme=scheme)
        prods[i] = z_s[i] * inner.value
        inner_var[i] = (z_s[i] * inner.stderr) ** 2
    mean = float(prods.mean())
    var_outer = float(prods.var(ddof=1)) / n_inner_states
    var_inner = float(inner_var.mean()) / n_inner_states
    nested = Estimate(value=mean, stderr=float(np.sqrt(var_outer + var_inner)),
                      n_paths=n_inner_states * n_inner, horizon=s + t)
    return direct, nested
