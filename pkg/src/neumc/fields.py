"""Coefficient fields, their transforms, and manufactured problems.

A problem is described by a diffusion matrix ``A`` (symmetric, uniformly
elliptic: spec(A) within [1/lam, lam]), a regular drift ``B``, a rough
drift ``Bhat`` that only enters in divergence form, and a zeroth-order
coefficient ``Q``.  The working form used by the simulation engine is the
pair ``(b, q)`` produced by ``transform_coefficients``: the rough drift and
an auxiliary potential ``v`` are folded into a regular drift and a
zeroth-order term, at the price of exponential tilts handled elsewhere.

Every field may be a constant (float / (d,) / (d,d) array) or a vectorized
callable of points with shape (N, d).  Constants keep the hot loops on the
fast path.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional, Union

import numpy as np

from . import geometry
from .errors import MissingV, NotPositiveDefinite, StencilOutsideDomain

FD_STEP = 1e-5  # central-difference step for coefficient derivatives

Scalar = Union[float, Callable]
Vector = Union[np.ndarray, Callable, None]
Matrix = Union[np.ndarray, Callable]


# ---------------------------------------------------------------------------
# evaluation helpers

def eval_scalar(f: Scalar, x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if callable(f):
        return np.asarray(f(x), dtype=float)
    return np.full(x.shape[0], float(f))


def eval_vector(f: Vector, x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if f is None:
        return np.zeros_like(x)
    if callable(f):
        return np.asarray(f(x), dtype=float)
    return np.broadcast_to(np.asarray(f, dtype=float), x.shape).copy()


def eval_matrix(f: Matrix, x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if callable(f):
        return np.asarray(f(x), dtype=float)
    a = np.asarray(f, dtype=float)
    return np.broadcast_to(a, (x.shape[0],) + a.shape).copy()


def constant_matrix(f: Matrix) -> Optional[np.ndarray]:
    """The matrix itself when the field is constant, else None."""
    return None if callable(f) else np.asarray(f, dtype=float)


def is_zero_field(f) -> bool:
    if f is None:
        return True
    if callable(f):
        return False
    return not np.any(np.asarray(f, dtype=float))


# ---------------------------------------------------------------------------
# matrix square roots

def matrix_sqrt(mat: np.ndarray) -> np.ndarray:
    """Symmetric positive definite square root, batched over leading axes.

    Raises NotPositiveDefinite when any eigenvalue is <= 0.
    """
    mat = np.asarray(mat, dtype=float)
    w, vecs = np.linalg.eigh(mat)
    if np.any(w <= 0.0):
        raise NotPositiveDefinite(f"matrix square root: min eigenvalue {w.min():.3g} <= 0")
    root = np.sqrt(w)
    return np.einsum("...ij,...j,...kj->...ik", vecs, root, vecs)


# ---------------------------------------------------------------------------
# coefficient containers

@dataclass(frozen=True)
class CoefficientSet:
    """Full problem coefficients (A, B, Bhat, Q) with ellipticity constant
    ``lam`` > 1 and the integrability exponent ``p_exponent`` > dim/2 used
    by the rough-drift smallness check."""

    A: Matrix
    B: Vector = None
    Bhat: Vector = None
    Q: Scalar = 0.0
    lam: float = 2.0
    p_exponent: float = 3.0

    def validate(self, dom, n_sample: int = 64, seed: int = 0) -> None:
        if self.lam <= 1.0:
            raise NotPositiveDefinite("ellipticity constant lam must exceed 1")
        rng = np.random.default_rng(seed)
        pts = geometry.sample_interior(dom, rng, n_sample)
        mats = eval_matrix(self.A, pts)
        if not np.allclose(mats, np.swapaxes(mats, -1, -2), atol=1e-12):
            raise NotPositiveDefinite("diffusion matrix must be symmetric")
        w = np.linalg.eigvalsh(mats)
        tol = 1e-9
        if w.min() < 1.0 / self.lam - tol or w.max() > self.lam + tol:
            raise NotPositiveDefinite(
                f"spectrum [{w.min():.4g}, {w.max():.4g}] outside [1/lam, lam] "
                f"= [{1.0 / self.lam:.4g}, {self.lam:.4g}]"
            )


@dataclass(frozen=True)
class TransformedCoefficients:
    """Working pair (b, q) for the reduced zero-rough-drift problem,
    together with the potential ``v`` whose tilt links the two problems.

    Satisfies pointwise  b = B - Bhat - A grad(v)  and
    q = Q + (1/2) <A grad(v), grad(v)> - <B - Bhat, grad(v)>.
    ``v=None`` means the transform is trivial (b = B, q = Q).
    """

    A: Matrix
    b: Vector
    q: Scalar
    lam: float
    v: object = None  # exposes .value(x) and .gradient(x) when present
    source: Optional[CoefficientSet] = None

    def v_value(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.v is None:
            return np.zeros(x.shape[0])
        return np.asarray(self.v.value(x), dtype=float)


@dataclass(frozen=True)
class AnalyticPotential:
    """Closed-form potential for tests and presets."""

    value_fn: Callable
    grad_fn: Callable

    def value(self, x):
        return np.asarray(self.value_fn(np.atleast_2d(x)), dtype=float)

    def gradient(self, x):
        return np.asarray(self.grad_fn(np.atleast_2d(x)), dtype=float)


def plain_coefficients(coeffs: CoefficientSet) -> TransformedCoefficients:
    """Working pair for a problem without rough drift: b = B, q = Q."""
    if not is_zero_field(coeffs.Bhat):
        raise MissingV("coefficients carry a rough drift; solve the potential first")
    return TransformedCoefficients(A=coeffs.A, b=coeffs.B, q=coeffs.Q,
                                   lam=coeffs.lam, v=None, source=coeffs)


def transform_coefficients(coeffs: CoefficientSet, v) -> TransformedCoefficients:
    """Fold the rough drift and the potential ``v`` into a regular pair.

    ``v`` must expose ``value(x)`` and ``gradient(x)`` over the closed
    domain.  With ``v is None`` the rough drift must be absent.
    """
    if v is None:
        return plain_coefficients(coeffs)
    A, B, Bhat, Q = coeffs.A, coeffs.B, coeffs.Bhat, coeffs.Q

    def b_fn(x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        gv = np.asarray(v.gradient(x), dtype=float)
        amat = constant_matrix(A)
        agv = gv @ amat.T if amat is not None else np.einsum(
            "nij,nj->ni", eval_matrix(A, x), gv)
        return eval_vector(B, x) - eval_vector(Bhat, x) - agv

    def q_fn(x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        gv = np.asarray(v.gradient(x), dtype=float)
        amat = constant_matrix(A)
        agv = gv @ amat.T if amat is not None else np.einsum(
            "nij,nj->ni", eval_matrix(A, x), gv)
        beta = eval_vector(B, x) - eval_vector(Bhat, x)
        return (eval_scalar(Q, x) + 0.5 * np.sum(agv * gv, axis=1)
                - np.sum(beta * gv, axis=1))

    return TransformedCoefficients(A=A, b=b_fn, q=q_fn, lam=coeffs.lam,
                                   v=v, source=coeffs)


# ---------------------------------------------------------------------------
# derivatives of coefficients

def _pull_inside(dom, x: np.ndarray, margin: float) -> np.ndarray:
    """Shift stencil centers so that x +- margin stays in the closure."""
    x = np.array(np.atleast_2d(x), dtype=float)
    bl = geometry._ball_like(dom)
    if bl is not None:
        c, r = bl
        v = x - c
        rho = np.linalg.norm(v, axis=1)
        far = rho > r - margin
        if np.any(far):
            x[far] = c + v[far] * ((r - margin) / rho[far])[:, None]
        return x
    return np.clip(x, dom.lo + margin, dom.hi - margin)


def _stencil_base(dom, x: np.ndarray, h: float, clamp: bool) -> np.ndarray:
    """Stencil centers for central differences near the boundary.

    With clamp the centers are pulled inward so x +- h e_j stays in the
    closure (one-sided bias O(h) confined to an O(h) collar); without it a
    stencil leaving the closure is an error.
    """
    if dom is None:
        return x
    if clamp:
        return _pull_inside(dom, x, h)
    sd = geometry.signed_distance(dom, x)
    # the stencil reaches sqrt(d) h in the worst corner direction, but each
    # probe moves along one axis only, so h is the honest reach
    if np.any(sd > -h + geometry.EPS_GEOM):
        raise StencilOutsideDomain(
            "finite-difference stencil would leave the closed domain; "
            "pass clamp=True or supply analytic derivatives")
    return x


def div_matrix_rows(A: Matrix, x: np.ndarray, dom=None, h: float = FD_STEP,
                    clamp: bool = False) -> np.ndarray:
    """(sum_j d a_ij / d x_j)_i by central differences; zero for constant A."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if constant_matrix(A) is not None:
        return np.zeros_like(x)
    base = _stencil_base(dom, x, h, clamp)
    d = x.shape[1]
    out = np.zeros_like(x)
    for j in range(d):
        xp = base.copy()
        xm = base.copy()
        xp[:, j] += h
        xm[:, j] -= h
        out += (eval_matrix(A, xp)[:, :, j] - eval_matrix(A, xm)[:, :, j]) / (2.0 * h)
    return out


def drift_tilde(coeffs, x, dom=None, h: float = FD_STEP,
                clamp: bool = False) -> np.ndarray:
    """Effective drift of the reflected state equation:
    (1/2) sum_j d a_ij/d x_j + b_i.

    Accepts a CoefficientSet (drift field B) or TransformedCoefficients
    (drift field b).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    bfield = coeffs.b if isinstance(coeffs, TransformedCoefficients) else coeffs.B
    return (0.5 * div_matrix_rows(coeffs.A, x, dom=dom, h=h, clamp=clamp)
            + eval_vector(bfield, x))


def divergence(vec: Vector, x: np.ndarray, dom=None, h: float = FD_STEP,
               clamp: bool = False) -> np.ndarray:
    """Divergence of a vector field; uses an analytic ``.div`` when present."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if vec is None:
        return np.zeros(x.shape[0])
    div_fn = getattr(vec, "div", None)
    if div_fn is not None:
        return np.asarray(div_fn(x), dtype=float)
    if not callable(vec):
        return np.zeros(x.shape[0])
    base = _stencil_base(dom, x, h, clamp)
    out = np.zeros(x.shape[0])
    for j in range(x.shape[1]):
        xp = base.copy()
        xm = base.copy()
        xp[:, j] += h
        xm[:, j] -= h
        out += (eval_vector(vec, xp)[:, j] - eval_vector(vec, xm)[:, j]) / (2.0 * h)
    return out


# ---------------------------------------------------------------------------
# nonlinearities

@dataclass(frozen=True)
class Nonlinearity:
    """Generator term F(x, y, z).

    ``d1`` is the monotonicity rate in y ((y1-y2)(F(y1)-F(y2)) <= -d1 |y1-y2|^2),
    ``d2`` the Lipschitz constant in z, ``delta`` the z-weight in the
    effective discount -d1 + delta*d2^2 (default 1/lam at use sites), and
    ``bound`` a sup bound of |F(x, 0, 0)| when known.
    """

    fn: Callable
    d1: float = 0.0
    d2: float = 0.0
    delta: Optional[float] = None
    bound: Optional[float] = None
    name: str = ""

    def __call__(self, x, y, z=None):
        return np.asarray(self.fn(np.atleast_2d(x), np.asarray(y, dtype=float), z),
                          dtype=float)

    def discount(self, lam: float) -> float:
        """Effective discount rate -d1 + delta d2^2 (negative means decay)."""
        delta = self.delta if self.delta is not None else 1.0 / lam
        return -self.d1 + delta * self.d2 ** 2

    def shifted(self, q: Scalar) -> "Nonlinearity":
        """Absorb a zeroth-order coefficient: F'(x,y,z) = F(x,y,z) + q(x) y."""
        base = self.fn

        def fn(x, y, z=None):
            return np.asarray(base(x, y, z), dtype=float) + eval_scalar(q, x) * y

        qmin = float(q) if not callable(q) else None
        d1 = self.d1 - qmin if qmin is not None else self.d1
        return replace(self, fn=fn, d1=d1, name=self.name + "+q*y")


# ---------------------------------------------------------------------------
# smooth reference solutions and manufactured data

@dataclass(frozen=True)
class SmoothField:
    """Scalar field with analytic gradient and Hessian (for manufacturing)."""

    value: Callable
    grad: Callable
    hess: Callable


def constant_field(c: float, d: int = 2) -> SmoothField:
    return SmoothField(
        value=lambda x: np.full(np.atleast_2d(x).shape[0], float(c)),
        grad=lambda x: np.zeros_like(np.atleast_2d(x)),
        hess=lambda x: np.zeros((np.atleast_2d(x).shape[0], d, d)),
    )


def quadratic_radial(center=(0.0, 0.0)) -> SmoothField:
    """u(x) = |x - c|^2."""
    c = np.asarray(center, dtype=float)
    d = c.shape[0]

    def value(x):
        x = np.atleast_2d(x)
        return np.sum((x - c) ** 2, axis=1)

    def grad(x):
        x = np.atleast_2d(x)
        return 2.0 * (x - c)

    def hess(x):
        n = np.atleast_2d(x).shape[0]
        return np.broadcast_to(2.0 * np.eye(d), (n, d, d)).copy()

    return SmoothField(value, grad, hess)


def quartic_radial(center=(0.0, 0.0)) -> SmoothField:
    """u(x) = |x - c|^4 (not exactly representable by second-order stencils)."""
    c = np.asarray(center, dtype=float)
    d = c.shape[0]

    def value(x):
        x = np.atleast_2d(x)
        return np.sum((x - c) ** 2, axis=1) ** 2

    def grad(x):
        x = np.atleast_2d(x)
        v = x - c
        return 4.0 * np.sum(v * v, axis=1)[:, None] * v

    def hess(x):
        x = np.atleast_2d(x)
        v = x - c
        r2 = np.sum(v * v, axis=1)
        eye = np.broadcast_to(np.eye(d), (x.shape[0], d, d))
        return 4.0 * r2[:, None, None] * eye + 8.0 * np.einsum("ni,nj->nij", v, v)

    return SmoothField(value, grad, hess)


def exp_linear(a) -> SmoothField:
    """u(x) = exp(<a, x>)."""
    a = np.asarray(a, dtype=float)

    def value(x):
        return np.exp(np.atleast_2d(x) @ a)

    def grad(x):
        return value(x)[:, None] * a

    def hess(x):
        return value(x)[:, None, None] * np.outer(a, a)

    return SmoothField(value, grad, hess)


@dataclass(frozen=True)
class ManufacturedData:
    """Interior and boundary data generated from a chosen solution.

    Convention: ``f_data`` is the source of the divergence-form problem
    written as (operator) u = -f_data, and ``phi_data`` the inhomogeneity of
    the oblique boundary operator (1/2) du/dconormal - <Bhat, n> u.
    """

    f_data: Callable
    phi_data: Callable
    u_star: SmoothField


def manufactured_problem(u_star: SmoothField, coeffs: CoefficientSet, dom,
                         h: float = FD_STEP) -> ManufacturedData:
    A, B, Bhat, Q = coeffs.A, coeffs.B, coeffs.Bhat, coeffs.Q

    def f_data(x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        gu = np.asarray(u_star.grad(x), dtype=float)
        hu = np.asarray(u_star.hess(x), dtype=float)
        uu = np.asarray(u_star.value(x), dtype=float)
        amat = eval_matrix(A, x)
        div_a_grad = (np.einsum("nij,nij->n", amat, hu)
                      + np.sum(div_matrix_rows(A, x, dom=dom, h=h, clamp=True) * gu,
                               axis=1))
        adv = np.sum(eval_vector(B, x) * gu, axis=1)
        rough = (divergence(Bhat, x, dom=dom, h=h, clamp=True) * uu
                 + np.sum(eval_vector(Bhat, x) * gu, axis=1))
        return -(0.5 * div_a_grad + adv - rough + eval_scalar(Q, x) * uu)

    def phi_data(x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n = inward_normals(dom, x)
        gu = np.asarray(u_star.grad(x), dtype=float)
        uu = np.asarray(u_star.value(x), dtype=float)
        amat = constant_matrix(A)
        an = n @ amat.T if amat is not None else np.einsum(
            "nij,nj->ni", eval_matrix(A, x), n)
        return 0.5 * np.sum(an * gu, axis=1) - np.sum(eval_vector(Bhat, x) * n, axis=1) * uu

    return ManufacturedData(f_data=f_data, phi_data=phi_data, u_star=u_star)


def inward_normals(dom, x: np.ndarray) -> np.ndarray:
    """Vectorized inward unit normals at (near-)boundary points."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    bl = geometry._ball_like(dom)
    if bl is not None:
        c, _ = bl
        v = x - c
        rho = np.linalg.norm(v, axis=1, keepdims=True)
        rho[rho == 0.0] = 1.0
        return -v / rho
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        _, _, out[i] = geometry.boundary_projection(dom, x[i])
    return out
