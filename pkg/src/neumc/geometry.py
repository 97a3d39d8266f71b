"""Bounded smooth domains: signed distance, boundary projection, conormals.

Supported shapes are balls, axis-aligned boxes and radial level sets
(a monotone radial profile with a single root, i.e. a ball whose radius is
found numerically).  Balls are the geometry used by every theorem-level
check; boxes exist as a cheap exact cross-check geometry.

Conventions
-----------
* ``signed_distance`` is negative inside, positive outside.
* normals point INWARD.
* the conormal direction is ``A(x) n(x)`` for the diffusion matrix ``A``.
* box projection ties are broken deterministically toward the lowest
  coordinate index (documented); ``strict=True`` raises instead.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import brentq

from .errors import NotOnBoundary, ProjectionAmbiguous

EPS_GEOM = 1e-10


@dataclass(frozen=True)
class Ball:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center",
                           np.asarray(self.center, dtype=float))
        object.__setattr__(self, "radius", float(self.radius))

    @property
    def dim(self) -> int:
        return self.center.shape[0]


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=float))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=float))

    @property
    def dim(self) -> int:
        return self.lo.shape[0]


@dataclass(frozen=True)
class RadialLevelSet:
    """Domain ``{ profile(|x - center|) < 0 }`` for a monotone profile."""

    profile: Callable[[float], float]
    center: np.ndarray
    bracket: float
    radius: float  # root of the profile, filled in by the factory


def ball(center, radius: float) -> Ball:
    center = np.asarray(center, dtype=float)
    if radius <= 0:
        raise ValueError("ball radius must be positive")
    return Ball(center, float(radius))


def box(lo, hi) -> Box:
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if not np.all(hi > lo):
        raise ValueError("box needs hi > lo componentwise")
    return Box(lo, hi)


def radial_levelset(profile, center, bracket: float) -> RadialLevelSet:
    center = np.asarray(center, dtype=float)
    lo, hi = 1e-12 * bracket, bracket
    if profile(lo) >= 0 or profile(hi) <= 0:
        raise ValueError("profile must be negative near 0 and positive at the bracket")
    r = brentq(profile, lo, hi, xtol=1e-14)
    return RadialLevelSet(profile, center, float(bracket), float(r))


def _ball_like(dom):
    """Balls and radial level sets share all metric logic."""
    if isinstance(dom, Ball):
        return dom.center, dom.radius
    if isinstance(dom, RadialLevelSet):
        return dom.center, dom.radius
    return None


def dim(dom) -> int:
    bl = _ball_like(dom)
    return bl[0].shape[0] if bl is not None else dom.dim


def diameter(dom) -> float:
    bl = _ball_like(dom)
    if bl is not None:
        return 2.0 * bl[1]
    return float(np.linalg.norm(dom.hi - dom.lo))


def bounding_box(dom):
    bl = _ball_like(dom)
    if bl is not None:
        c, r = bl
        return c - r, c + r
    return dom.lo.copy(), dom.hi.copy()


def signed_distance(dom, x):
    """Signed distance to the boundary; negative inside.  Broadcasts over
    leading axes of ``x``."""
    x = np.asarray(x, dtype=float)
    bl = _ball_like(dom)
    if bl is not None:
        c, r = bl
        return np.linalg.norm(x - c, axis=-1) - r
    lo, hi = dom.lo, dom.hi
    out_gap = np.maximum(np.maximum(lo - x, x - hi), 0.0)
    outside = np.linalg.norm(out_gap, axis=-1)
    inside = np.minimum(np.min(x - lo, axis=-1), np.min(hi - x, axis=-1))
    return np.where(outside > 0.0, outside, -inside)


def contains(dom, x, eps: float = EPS_GEOM):
    return signed_distance(dom, x) <= eps


def boundary_projection(dom, x, strict: bool = False, eps: float = EPS_GEOM):
    """Nearest boundary point.

    Returns ``(proj, dist, n)`` with ``dist`` the signed distance of ``x``
    and ``n`` the inward unit normal at ``proj``.  Single points only; the
    simulation engine carries its own vectorized exit handling.
    """
    x = np.asarray(x, dtype=float)
    bl = _ball_like(dom)
    if bl is not None:
        c, r = bl
        v = x - c
        rho = float(np.linalg.norm(v))
        if rho <= eps:
            if strict:
                raise ProjectionAmbiguous("every boundary point is nearest to the center")
            v = np.zeros_like(x)
            v[0] = 1.0
            rho = 1.0
        u = v / rho
        proj = c + r * u
        return proj, float(np.linalg.norm(x - c) - r), -u

    lo, hi = dom.lo, dom.hi
    clipped = np.clip(x, lo, hi)
    if np.any(clipped != x):  # outside: nearest point is the clip
        moved = clipped != x
        if strict and moved.sum() > 1:
            raise ProjectionAmbiguous("outside a box edge/corner region")
        i = int(np.argmax(moved))  # lowest violated index
        n = np.zeros_like(x)
        n[i] = 1.0 if x[i] < lo[i] else -1.0
        return clipped, float(np.linalg.norm(x - clipped)), n

    gap_lo = x - lo
    gap_hi = hi - x
    gaps = np.minimum(gap_lo, gap_hi)
    if strict:
        order = np.sort(gaps)
        if gaps.size > 1 and abs(order[0] - order[1]) <= eps:
            raise ProjectionAmbiguous("equidistant from multiple faces")
        i = int(np.argmin(gaps))
        if abs(gap_lo[i] - gap_hi[i]) <= eps and gap_lo[i] > eps:
            raise ProjectionAmbiguous("equidistant from opposite faces")
    i = int(np.argmin(gaps))  # argmin takes the lowest index on ties
    proj = x.copy()
    n = np.zeros_like(x)
    if gap_lo[i] <= gap_hi[i]:  # ties break to the low face
        proj[i] = lo[i]
        n[i] = 1.0
    else:
        proj[i] = hi[i]
        n[i] = -1.0
    return proj, float(-gaps[i]), n


def inward_normal(dom, x, eps: float = EPS_GEOM):
    """Inward unit normal at a boundary point."""
    sd = float(signed_distance(dom, x))
    if abs(sd) > eps:
        raise NotOnBoundary(f"point has signed distance {sd:.3g}, outside the {eps:g} collar")
    _, _, n = boundary_projection(dom, x)
    return n


def inward_conormal(dom, A, x, eps: float = EPS_GEOM):
    """Conormal direction ``A(x) n(x)`` at a boundary point ``x``."""
    n = inward_normal(dom, x, eps=eps)
    x = np.asarray(x, dtype=float)
    mat = A(x) if callable(A) else np.asarray(A, dtype=float)
    return mat @ n


def sample_interior(dom, rng, n: int):
    """Uniform interior points; used for field-fit path starts."""
    bl = _ball_like(dom)
    d = dim(dom)
    if bl is not None:
        c, r = bl
        y = rng.standard_normal((n, d))
        y /= np.linalg.norm(y, axis=1, keepdims=True)
        u = rng.random(n) ** (1.0 / d)
        return c + r * y * u[:, None]
    return dom.lo + rng.random((n, d)) * (dom.hi - dom.lo)


def boundary_grid(dom, n: int):
    """Deterministic grid of boundary points (circle angles / box perimeter).

    Used by sup-norm scans of boundary data and by weak-form boundary
    quadrature.  Only 2-d shapes get a real grid; higher dimensions fall
    back to projecting a deterministic low-discrepancy-ish sphere sample.
    """
    bl = _ball_like(dom)
    d = dim(dom)
    if bl is not None:
        c, r = bl
        if d == 2:
            th = 2.0 * np.pi * np.arange(n) / n
            return c + r * np.stack([np.cos(th), np.sin(th)], axis=1)
        k = np.arange(1, n + 1, dtype=float)
        raw = np.stack([np.cos(k * (j + 2) * 0.618034) for j in range(d)], axis=1)
        raw /= np.linalg.norm(raw, axis=1, keepdims=True)
        return c + r * raw
    if d != 2:
        raise NotImplementedError("box boundary grids are 2-d only")
    lo, hi = dom.lo, dom.hi
    per_side = max(n // 4, 1)
    t = (np.arange(per_side) + 0.5) / per_side
    bottom = np.stack([lo[0] + t * (hi[0] - lo[0]), np.full_like(t, lo[1])], axis=1)
    right = np.stack([np.full_like(t, hi[0]), lo[1] + t * (hi[1] - lo[1])], axis=1)
    top = np.stack([hi[0] - t * (hi[0] - lo[0]), np.full_like(t, hi[1])], axis=1)
    left = np.stack([np.full_like(t, lo[0]), hi[1] - t * (hi[1] - lo[1])], axis=1)
    return np.concatenate([bottom, right, top, left], axis=0)
