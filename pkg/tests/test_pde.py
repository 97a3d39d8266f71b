import numpy as np
import pytest

from neumc import fields, geometry, pde
from neumc.errors import (ConfigError, GaugeDiverges, NoDecay, PicardStalled)

ORIGIN = [(0.0, 0.0)]


def _spec(dom, q=-1.0, source=None, boundary=None, form="linear", bhat=None):
    coeffs = fields.CoefficientSet(A=np.eye(2), Bhat=bhat, Q=q)
    return pde.ProblemSpec(dom=dom, coeffs=coeffs, source=source,
                           boundary_data=boundary, form=form)


def test_problem_spec_validation(disk):
    with pytest.raises(ConfigError):
        _spec(disk, form="cubic")
    with pytest.raises(ConfigError):
        _spec(disk, bhat=np.array([0.1, 0.0]), form="linear")
    with pytest.raises(ConfigError):
        _spec(disk, source=lambda x: x[:, 0], form="semilinear")


def test_mc_config_validation():
    with pytest.raises(ConfigError):
        pde.McConfig(n_paths=0)
    with pytest.raises(ConfigError):
        pde.McConfig(dt=-1e-3)
    with pytest.raises(ConfigError):
        pde.McConfig(mesh_nodes=2)
    n, T, dt = pde.McConfig(n_paths=40000, dt=1e-3, t_max=20.0) \
        .field_settings()
    assert (n, T, dt) == (10000, 8.0, 2e-3)


def test_default_eval_points_are_interior(disk, unit_box):
    for dom in (disk, unit_box):
        pts = pde.default_eval_points(dom)
        assert len(pts) >= 3
        assert geometry.contains(dom, pts).all()


def test_eval_point_outside_domain_rejected(disk, quick_cfg):
    with pytest.raises(ConfigError):
        pde.solve_linear(_spec(disk, source=1.0), [(2.0, 0.0)], quick_cfg)


def test_trivial_problem_is_exactly_zero(disk, quick_cfg):
    sol = pde.solve_linear(_spec(disk), ORIGIN, quick_cfg, seed=3)
    assert sol.values[0].value == 0.0
    assert sol.values[0].stderr == 0.0

    ssol = pde.solve_semilinear(_spec(disk, form="semilinear"), ORIGIN,
                                quick_cfg, seed=3)
    assert ssol.values[0].value == 0.0
    assert ssol.meta["iterations"] == 1


def test_constant_linear_problem(disk, quick_cfg):
    sol = pde.solve_linear(_spec(disk, source=1.0), ORIGIN, quick_cfg,
                           seed=7)
    est = sol.values[0]
    # truncation leaves e^{-T} of the constant behind
    assert est.value == pytest.approx(-1.0,
                                      abs=3 * est.stderr + np.exp(-8.0) + 1e-3)
    assert sol.meta["gauge"]["divergent"] is False


def test_linearity_in_the_data_is_bitwise(disk):
    cfg = pde.McConfig(n_paths=800, dt=4e-3, t_max=6.0, gauge_paths=800)
    f1 = lambda x: 2.0 - np.sum(x ** 2, axis=1)
    f2 = lambda x: 2.0 * f1(x)
    one = pde.solve_linear(_spec(disk, source=f1, boundary=-1.0),
                           [(0.0, 0.0), (0.5, 0.0)], cfg, seed=11)
    two = pde.solve_linear(_spec(disk, source=f2, boundary=-2.0),
                           [(0.0, 0.0), (0.5, 0.0)], cfg, seed=11)
    for a, b in zip(one.values, two.values):
        assert b.value == 2.0 * a.value
        assert b.stderr == 2.0 * a.stderr


def test_semilinear_flat_fixed_point(disk, quick_cfg):
    gen = fields.Nonlinearity(fn=lambda x, y, z=None: 1.0 - y, d1=1.0,
                              bound=1.0)
    sol = pde.solve_semilinear(_spec(disk, source=gen, form="semilinear"),
                               ORIGIN, quick_cfg, seed=5, picard_tol=2e-3)
    est = sol.values[0]
    assert est.value == pytest.approx(0.5, abs=3 * est.stderr + 5e-3)
    assert sol.meta["iterations"] > 1
    assert sol.meta["picard_history"][-1] <= 2e-3


def test_semilinear_without_feedback_takes_one_sweep(disk, quick_cfg):
    gen = fields.Nonlinearity(fn=lambda x, y, z=None: np.ones(np.shape(y)))
    sol = pde.solve_semilinear(_spec(disk, source=gen, form="semilinear"),
                               ORIGIN, quick_cfg, seed=5)
    est = sol.values[0]
    assert sol.meta["iterations"] == 1
    assert est.value == pytest.approx(1.0, abs=3 * est.stderr + 2e-3)


def test_expanding_feedback_stalls_the_iteration(disk):
    cfg = pde.McConfig(n_paths=600, dt=4e-3, t_max=6.0, field_paths=600,
                       gauge_paths=600)
    gen = fields.Nonlinearity(fn=lambda x, y, z=None: 1.0 + 3.0 * y,
                              d1=-3.0)
    with pytest.raises(PicardStalled):
        pde.solve_semilinear(_spec(disk, source=gen, form="semilinear"),
                             ORIGIN, cfg, seed=5)


def test_mixed_reduces_to_semilinear_without_rough_drift(disk):
    cfg = pde.McConfig(n_paths=700, dt=4e-3, t_max=6.0, field_paths=700,
                       gauge_paths=700)
    gen = fields.Nonlinearity(fn=lambda x, y, z=None: 1.0 - y, d1=1.0,
                              bound=1.0)
    plain = pde.solve_semilinear(_spec(disk, source=gen, form="semilinear"),
                                 ORIGIN, cfg, seed=9)
    mixed = pde.solve_mixed_full(_spec(disk, source=gen, form="mixed"),
                                 ORIGIN, cfg, seed=9)
    assert mixed.values[0].value == plain.values[0].value
    assert mixed.values[0].stderr == plain.values[0].stderr


def test_mixed_scales_linearly_with_plain_data(disk):
    cfg = pde.McConfig(n_paths=600, dt=4e-3, t_max=6.0, field_paths=600,
                       gauge_paths=600)
    bhat = np.array([0.1, 0.0])
    one = pde.solve_mixed_full(_spec(disk, source=1.0, form="mixed",
                                     bhat=bhat), ORIGIN, cfg, seed=2)
    two = pde.solve_mixed_full(_spec(disk, source=2.0, form="mixed",
                                     bhat=bhat), ORIGIN, cfg, seed=2)
    assert two.values[0].value == 2.0 * one.values[0].value


def test_mixed_rejects_gradient_coupling(disk, quick_cfg):
    gen = fields.Nonlinearity(fn=lambda x, y, z=None: 1.0 - y, d1=1.0,
                              d2=0.5, delta=1.0)
    spec = _spec(disk, source=gen, form="mixed",
                 bhat=np.array([0.1, 0.0]))
    with pytest.raises(ConfigError):
        pde.solve_mixed_full(spec, ORIGIN, quick_cfg, seed=0)


def test_gauge_divergence_aborts_solve(disk):
    cfg = pde.McConfig(n_paths=800, dt=4e-3, t_max=8.0, gauge_paths=800)
    with pytest.raises(GaugeDiverges):
        pde.solve_linear(_spec(disk, q=0.0, source=1.0), ORIGIN, cfg, seed=1)


def test_slow_weight_decay_raises(disk):
    cfg = pde.McConfig(n_paths=800, dt=4e-3, t_max=8.0, gauge_paths=800,
                       beta_min=0.6)
    with pytest.raises(NoDecay):
        pde.solve_linear(_spec(disk, q=-0.5, source=1.0), ORIGIN, cfg,
                         seed=1)


def test_smallness_report(disk):
    zero = pde.smallness_check(disk, fields.CoefficientSet(A=np.eye(2)))
    assert zero.norm == 0.0 and zero.passed

    const = pde.smallness_check(
        disk, fields.CoefficientSet(A=np.eye(2), Bhat=np.array([0.1, 0.0])))
    assert const.norm == pytest.approx(0.1 * np.pi ** (1.0 / 3.0), rel=2e-2)
    assert const.passed

    def spiky(x):
        r = np.linalg.norm(x, axis=1, keepdims=True)
        return x * r ** -1.5

    sing = pde.smallness_check(
        disk, fields.CoefficientSet(A=np.eye(2), Bhat=spiky))
    assert sing.norm == pytest.approx((4.0 * np.pi) ** (1.0 / 3.0), rel=2e-2)
    assert not sing.passed

    with pytest.raises(ConfigError):
        pde.smallness_check(disk, fields.CoefficientSet(A=np.eye(2)),
                            p_exponent=-1.0)


def test_markov_consistency(disk):
    cfg = pde.McConfig(n_paths=2500, dt=2e-3, t_max=8.0, field_paths=2500,
                       gauge_paths=1000)
    gen = fields.Nonlinearity(fn=lambda x, y, z=None: 1.0 - y, d1=1.0,
                              bound=1.0)
    check = pde.markov_consistency_check(
        _spec(disk, source=gen, form="semilinear"), np.zeros(2),
        t_probe=1.0, cfg=cfg, seed=4)
    assert check["passed"], check
    assert check["mean_abs"] <= 3.0 * check["stderr"] + check["budget"]


def test_kappa_calibration_is_decisive():
    cfg = pde.McConfig(n_paths=4000, dt=2e-3, t_max=8.0)
    out = pde.calibrate_kappa(cfg, seed=9)
    assert out["chosen"] == -2.0
    assert out["chosen_source_sign"] == -1.0
    errs = out["kappa_errors"]
    others = [v for k, v in errs.items() if k != -2.0]
    assert errs[-2.0] < 0.25 * min(others)


def test_solution_field_rows(disk, quick_cfg):
    sol = pde.solve_linear(_spec(disk, source=1.0),
                           [(0.0, 0.0), (0.3, 0.1)], quick_cfg, seed=6)
    rows = list(sol.rows())
    assert len(rows) == 2
    x1, x2, value, stderr, n_paths, horizon = rows[1]
    assert (x1, x2) == (0.3, 0.1)
    assert value == sol.values[1].value
    assert n_paths == quick_cfg.n_paths and horizon == quick_cfg.t_max
