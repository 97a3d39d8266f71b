"""Named example problems for the command line tool and the test suite.

Each preset bundles a ready-to-solve :class:`~neumc.pde.ProblemSpec` with
default evaluation points and, where the exact solution is known in closed
form, target values for those points.  Presets are built fresh on every
``get`` call so callers can never leak state into each other.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Tuple

import numpy as np

from . import fields, geometry, pde
from .errors import ConfigError

Point = Tuple[float, float]


@dataclass(frozen=True)
class Preset:
    """A named problem with default evaluation points and known targets."""

    name: str
    spec: pde.ProblemSpec
    summary: str
    eval_points: Tuple[Point, ...]
    # (point, exact value) pairs; empty when no closed form is known
    targets: Tuple[Tuple[Point, float], ...] = field(default=())


def _unit_disk():
    return geometry.ball((0.0, 0.0), 1.0)


def _constant_disk() -> Preset:
    dom = _unit_disk()
    coeffs = fields.CoefficientSet(A=np.eye(2), Q=-1.0)
    spec = pde.ProblemSpec(dom=dom, coeffs=coeffs, source=1.0, form="linear")
    pts = ((0.0, 0.0), (0.5, 0.0), (0.0, -0.5))
    return Preset(
        name="constant_disk",
        spec=spec,
        summary="unit disk, q=-1, unit source, reflecting boundary; u = -1",
        eval_points=pts,
        targets=tuple((p, -1.0) for p in pts),
    )


def _quadratic_disk() -> Preset:
    dom = _unit_disk()
    coeffs = fields.CoefficientSet(A=np.eye(2), Q=-1.0)

    def source(x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return 2.0 - np.sum(x * x, axis=1)

    spec = pde.ProblemSpec(dom=dom, coeffs=coeffs, source=source,
                           boundary_data=-1.0, form="linear")
    return Preset(
        name="quadratic_disk",
        spec=spec,
        summary="manufactured u = |x|^2 on the unit disk (q=-1)",
        eval_points=((0.0, 0.0), (0.5, 0.0)),
        targets=(((0.0, 0.0), 0.0), ((0.5, 0.0), 0.25)),
    )


def _constant_semilinear() -> Preset:
    dom = _unit_disk()
    coeffs = fields.CoefficientSet(A=np.eye(2), Q=-1.0)
    gen = fields.Nonlinearity(fn=lambda x, y, z=None: 1.0 - y, d1=1.0,
                              bound=1.0, name="1-y")
    spec = pde.ProblemSpec(dom=dom, coeffs=coeffs, source=gen,
                           form="semilinear")
    pts = ((0.0, 0.0), (0.5, 0.0))
    return Preset(
        name="constant_semilinear",
        spec=spec,
        summary="state-independent feedback 1-u on the unit disk; u = 1/2",
        eval_points=pts,
        targets=tuple((p, 0.5) for p in pts),
    )


def _manufactured_semilinear() -> Preset:
    dom = _unit_disk()
    coeffs = fields.CoefficientSet(A=np.eye(2), Q=-1.0)
    u_star = fields.quadratic_radial()
    man = fields.manufactured_problem(u_star, coeffs, dom)

    def gen_fn(x, y, z=None):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return man.f_data(x) + u_star.value(x) - np.asarray(y, dtype=float)

    gen = fields.Nonlinearity(fn=gen_fn, d1=1.0, bound=3.0,
                              name="manufactured-quadratic")
    spec = pde.ProblemSpec(dom=dom, coeffs=coeffs, source=gen,
                           boundary_data=man.phi_data, form="semilinear")
    return Preset(
        name="manufactured_semilinear",
        spec=spec,
        summary="monotone feedback with manufactured solution u = |x|^2",
        eval_points=((0.0, 0.0), (0.5, 0.0)),
        targets=(((0.0, 0.0), 0.0), ((0.5, 0.0), 0.25)),
    )


def _mixed_unit() -> Preset:
    dom = _unit_disk()
    coeffs = fields.CoefficientSet(A=np.eye(2),
                                   Bhat=np.array([0.1, 0.0]), Q=-1.0)
    man = fields.manufactured_problem(fields.constant_field(1.0), coeffs, dom)
    spec = pde.ProblemSpec(dom=dom, coeffs=coeffs, source=man.f_data,
                           boundary_data=man.phi_data, form="mixed")
    pts = ((0.0, 0.0), (0.4, 0.2))
    return Preset(
        name="mixed_unit",
        spec=spec,
        summary="constant divergence-form drift (0.1, 0), manufactured u = 1",
        eval_points=pts,
        targets=tuple((p, 1.0) for p in pts),
    )


def _q_zero_disk() -> Preset:
    dom = _unit_disk()
    coeffs = fields.CoefficientSet(A=np.eye(2), Q=0.0)
    spec = pde.ProblemSpec(dom=dom, coeffs=coeffs, source=1.0, form="linear")
    return Preset(
        name="q_zero_disk",
        spec=spec,
        summary="q = 0: no killing, the boundary gauge diverges",
        eval_points=((0.0, 0.0),),
    )


def _drifted_disk() -> Preset:
    dom = _unit_disk()
    coeffs = fields.CoefficientSet(A=np.eye(2), B=np.array([1.0, 0.0]),
                                   Q=-1.0)
    spec = pde.ProblemSpec(dom=dom, coeffs=coeffs, source=1.0, form="linear")
    return Preset(
        name="drifted_disk",
        spec=spec,
        summary="unit drift along x1 (q=-1); exercises the drift reweighting",
        eval_points=((0.0, 0.0), (0.5, 0.0)),
    )


def _varying_q_disk() -> Preset:
    dom = _unit_disk()

    def q(x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return -1.0 - 0.5 * x[:, 0] ** 2

    coeffs = fields.CoefficientSet(A=np.eye(2), Q=q)
    spec = pde.ProblemSpec(dom=dom, coeffs=coeffs, source=1.0, form="linear")
    return Preset(
        name="varying_q_disk",
        spec=spec,
        summary="state-dependent killing rate q(x) = -1 - x1^2/2",
        eval_points=((0.0, 0.0), (0.5, 0.0)),
    )


_BUILDERS: Dict[str, Callable[[], Preset]] = {
    "constant_disk": _constant_disk,
    "quadratic_disk": _quadratic_disk,
    "constant_semilinear": _constant_semilinear,
    "manufactured_semilinear": _manufactured_semilinear,
    "mixed_unit": _mixed_unit,
    "q_zero_disk": _q_zero_disk,
    "drifted_disk": _drifted_disk,
    "varying_q_disk": _varying_q_disk,
}


def available() -> Tuple[str, ...]:
    return tuple(sorted(_BUILDERS))


def get(name: str) -> Preset:
    try:
        builder = _BUILDERS[name]
    except KeyError:
        raise ConfigError(
            f"unknown preset {name!r}; available: {', '.join(available())}"
        ) from None
    return builder()
