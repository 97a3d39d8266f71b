import numpy as np
import pytest

from neumc import fields, geometry
from neumc.errors import MissingV, NotPositiveDefinite

X = np.array([[0.1, 0.2], [-0.4, 0.5], [0.0, 0.0]])


def test_eval_scalar_constant_and_callable():
    np.testing.assert_array_equal(fields.eval_scalar(-1.0, X), [-1, -1, -1])
    np.testing.assert_array_equal(fields.eval_scalar(lambda x: x[:, 0], X),
                                  X[:, 0])


def test_eval_vector_broadcast():
    v = fields.eval_vector(np.array([1.0, 2.0]), X)
    assert v.shape == (3, 2)
    np.testing.assert_array_equal(v[2], [1.0, 2.0])


def test_eval_matrix_broadcast():
    m = fields.eval_matrix(np.diag([2.0, 1.0]), X)
    assert m.shape == (3, 2, 2)
    assert fields.constant_matrix(np.eye(2)) is not None
    assert fields.constant_matrix(lambda x: np.eye(2)) is None


def test_is_zero_field():
    assert fields.is_zero_field(None)
    assert fields.is_zero_field(0.0)
    assert fields.is_zero_field(np.zeros(2))
    assert not fields.is_zero_field(np.array([0.0, 0.1]))
    assert not fields.is_zero_field(lambda x: np.zeros(2))


def test_matrix_sqrt():
    root = fields.matrix_sqrt(np.diag([4.0, 1.0]))
    np.testing.assert_allclose(root, np.diag([2.0, 1.0]), atol=1e-12)
    with pytest.raises(NotPositiveDefinite):
        fields.matrix_sqrt(np.array([[1.0, 0.0], [0.0, -1.0]]))


def test_coefficient_set_validation(disk):
    good = fields.CoefficientSet(A=np.eye(2), Q=-1.0)
    good.validate(disk)
    with pytest.raises(NotPositiveDefinite):
        fields.CoefficientSet(A=np.diag([4.0, 1.0]), Q=-1.0,
                              lam=2.0).validate(disk)
    fields.CoefficientSet(A=np.diag([4.0, 1.0]), Q=-1.0, lam=4.5).validate(disk)


def test_transform_requires_potential():
    coeffs = fields.CoefficientSet(A=np.eye(2), Bhat=np.array([0.1, 0.0]),
                                   Q=-1.0)
    with pytest.raises(MissingV):
        fields.transform_coefficients(coeffs, None)


def test_transform_constant_divergence_drift():
    # Bhat = grad(0.1 x1) with the matching linear potential: the reduced
    # drift picks up the potential gradient and the killing rate is exactly
    # preserved (the quadratic and cross terms cancel)
    coeffs = fields.CoefficientSet(A=np.eye(2), Bhat=np.array([0.1, 0.0]),
                                   Q=-1.0)
    v = fields.AnalyticPotential(
        value_fn=lambda x: -0.2 * np.atleast_2d(x)[:, 0],
        grad_fn=lambda x: np.broadcast_to([-0.2, 0.0],
                                          np.atleast_2d(x).shape).copy())
    tc = fields.transform_coefficients(coeffs, v)
    b = fields.eval_vector(tc.b, X)
    np.testing.assert_allclose(b, np.broadcast_to([0.1, 0.0], (3, 2)),
                               atol=1e-14)
    q = fields.eval_scalar(tc.q, X)
    np.testing.assert_allclose(q, -1.0, atol=1e-14)
    assert tc.v is v


def test_plain_coefficients_passthrough():
    coeffs = fields.CoefficientSet(A=np.eye(2), B=np.array([1.0, 0.0]),
                                   Q=-0.5)
    tc = fields.plain_coefficients(coeffs)
    assert tc.v is None
    np.testing.assert_array_equal(fields.eval_vector(tc.b, X)[0], [1.0, 0.0])
    assert fields.eval_scalar(tc.q, X)[0] == -0.5


def test_nonlinearity_shift():
    gen = fields.Nonlinearity(fn=lambda x, y, z=None: 1.0 - y, d1=1.0)
    folded = gen.shifted(-1.0)
    y = np.array([0.0, 0.5, 2.0])
    np.testing.assert_allclose(folded(X, y), 1.0 - 2.0 * y)
    assert folded.d1 == pytest.approx(2.0)


def test_nonlinearity_discount():
    gen = fields.Nonlinearity(fn=lambda x, y, z=None: -y, d1=1.0, d2=0.5)
    # -d1 + delta d2^2 with delta defaulting to 1/lam
    assert gen.discount(lam=2.0) == pytest.approx(-1.0 + 0.5 * 0.25)


def test_divergence_of_linear_field(disk):
    div = fields.divergence(lambda x: np.atleast_2d(x), X, dom=disk)
    np.testing.assert_allclose(div, 2.0, atol=1e-6)
    const = fields.divergence(np.array([0.3, -0.7]), X, dom=disk)
    np.testing.assert_allclose(const, 0.0, atol=1e-12)


def test_divergence_clamped_near_boundary(disk):
    edge = np.array([[0.999999, 0.0]])
    div = fields.divergence(lambda x: np.atleast_2d(x), edge, dom=disk,
                            clamp=True)
    assert np.isfinite(div).all()
    np.testing.assert_allclose(div, 2.0, atol=1e-4)


def test_smooth_fields():
    quad = fields.quadratic_radial()
    np.testing.assert_allclose(quad.value(X), np.sum(X * X, axis=1))
    np.testing.assert_allclose(quad.grad(X), 2.0 * X)
    np.testing.assert_allclose(quad.hess(X), np.broadcast_to(2 * np.eye(2),
                                                             (3, 2, 2)))
    quart = fields.quartic_radial()
    np.testing.assert_allclose(quart.value(X), np.sum(X * X, axis=1) ** 2)
    lin = fields.exp_linear(np.array([1.0, 0.0]))
    np.testing.assert_allclose(lin.value(X), np.exp(X[:, 0]))


def test_manufactured_quadratic_data(disk):
    coeffs = fields.CoefficientSet(A=np.eye(2), Q=-1.0)
    man = fields.manufactured_problem(fields.quadratic_radial(), coeffs, disk)
    # interior identity: returned source equals |x|^2 - 2 for this problem
    np.testing.assert_allclose(man.f_data(X), np.sum(X * X, axis=1) - 2.0,
                               atol=1e-9)
    bpts = geometry.boundary_grid(disk, 12)
    np.testing.assert_allclose(man.phi_data(bpts), -1.0, atol=1e-9)


def test_manufactured_constant_with_divergence_drift(disk):
    coeffs = fields.CoefficientSet(A=np.eye(2), Bhat=np.array([0.1, 0.0]),
                                   Q=-1.0)
    man = fields.manufactured_problem(fields.constant_field(1.0), coeffs, disk)
    # constant Bhat has zero divergence, so the source reduces to -Q u = 1
    np.testing.assert_allclose(man.f_data(X), 1.0, atol=1e-6)
    bpts = geometry.boundary_grid(disk, 12)
    # boundary data -<Bhat, n> u with inward normal n = -x
    np.testing.assert_allclose(man.phi_data(bpts), 0.1 * bpts[:, 0],
                               atol=1e-9)


def test_inward_normals_vectorized(disk, unit_box):
    bpts = geometry.boundary_grid(disk, 8)
    n = fields.inward_normals(disk, bpts)
    np.testing.assert_allclose(n, -bpts, atol=1e-12)
    bpts = geometry.boundary_grid(unit_box, 8)
    n = fields.inward_normals(unit_box, bpts)
    np.testing.assert_allclose(np.linalg.norm(n, axis=1), 1.0)
