import numpy as np
import pytest

from neumc import geometry
from neumc.errors import NotOnBoundary, ProjectionAmbiguous


def test_signed_distance_disk(disk):
    assert geometry.signed_distance(disk, np.array([0.0, 0.0])) == -1.0
    assert geometry.signed_distance(disk, np.array([1.0, 0.0])) == 0.0
    assert geometry.signed_distance(disk, np.array([2.0, 0.0])) == 1.0


def test_signed_distance_box(unit_box):
    assert geometry.signed_distance(unit_box, np.array([0.0, 0.0])) == -1.0
    assert geometry.signed_distance(unit_box, np.array([0.5, 0.0])) == -0.5
    assert geometry.signed_distance(unit_box, np.array([1.5, 0.0])) == 0.5


def test_signed_distance_broadcasts(disk):
    pts = np.array([[0.0, 0.0], [0.5, 0.0], [3.0, 4.0]])
    d = geometry.signed_distance(disk, pts)
    assert d.shape == (3,)
    np.testing.assert_allclose(d, [-1.0, -0.5, 4.0])


def test_contains(disk):
    pts = np.array([[0.0, 0.0], [0.999, 0.0], [1.001, 0.0]])
    inside = geometry.contains(disk, pts)
    assert inside.tolist() == [True, True, False]


def test_projection_disk(disk):
    proj, dist, n = geometry.boundary_projection(disk, np.array([2.0, 0.0]))
    np.testing.assert_allclose(proj, [1.0, 0.0])
    assert dist == pytest.approx(1.0)
    np.testing.assert_allclose(n, [-1.0, 0.0])


def test_projection_box(unit_box):
    proj, dist, n = geometry.boundary_projection(unit_box,
                                                 np.array([0.9, 0.2]))
    np.testing.assert_allclose(proj, [1.0, 0.2])
    assert dist == pytest.approx(-0.1)
    np.testing.assert_allclose(n, [-1.0, 0.0])


def test_projection_center_ambiguous(disk):
    # the disk center projects anywhere; strict mode refuses to choose
    with pytest.raises(ProjectionAmbiguous):
        geometry.boundary_projection(disk, np.array([0.0, 0.0]), strict=True)


def test_inward_normal_requires_boundary(disk):
    with pytest.raises(NotOnBoundary):
        geometry.inward_normal(disk, np.array([0.3, 0.0]))
    n = geometry.inward_normal(disk, np.array([0.0, 1.0]))
    np.testing.assert_allclose(n, [0.0, -1.0], atol=1e-12)


def test_inward_conormal_scales_with_matrix(disk):
    A = np.diag([4.0, 1.0])
    gamma = geometry.inward_conormal(disk, A, np.array([1.0, 0.0]))
    # conormal direction A n with n = (-1, 0)
    np.testing.assert_allclose(gamma / np.linalg.norm(gamma), [-1.0, 0.0])


def test_sample_interior_inside(disk, unit_box):
    rng = np.random.default_rng(3)
    for dom in (disk, unit_box):
        pts = geometry.sample_interior(dom, rng, 256)
        assert pts.shape == (256, 2)
        assert np.all(geometry.signed_distance(dom, pts) < 0)


def test_boundary_grid_disk(disk):
    pts = geometry.boundary_grid(disk, 16)
    assert pts.shape == (16, 2)
    np.testing.assert_allclose(np.linalg.norm(pts, axis=1), 1.0)
    # equally spaced angles
    ang = np.arctan2(pts[:, 1], pts[:, 0])
    gaps = np.diff(np.unwrap(ang))
    np.testing.assert_allclose(gaps, 2 * np.pi / 16, atol=1e-12)


def test_boundary_grid_box(unit_box):
    pts = geometry.boundary_grid(unit_box, 20)
    d = geometry.signed_distance(unit_box, pts)
    np.testing.assert_allclose(d, 0.0, atol=1e-12)


def test_diameter_and_bbox(disk, unit_box):
    assert geometry.diameter(disk) == pytest.approx(2.0)
    assert geometry.diameter(unit_box) == pytest.approx(2.0 * np.sqrt(2.0))
    lo, hi = geometry.bounding_box(disk)
    np.testing.assert_allclose(lo, [-1.0, -1.0])
    np.testing.assert_allclose(hi, [1.0, 1.0])


def test_offcenter_ball():
    dom = geometry.ball((2.0, -1.0), 0.5)
    assert geometry.signed_distance(dom, np.array([2.0, -1.0])) == -0.5
    proj, _, n = geometry.boundary_projection(dom, np.array([3.0, -1.0]))
    np.testing.assert_allclose(proj, [2.5, -1.0])
    np.testing.assert_allclose(n, [-1.0, 0.0])


def test_radial_levelset_matches_disk(disk):
    dom = geometry.radial_levelset(lambda r: r - 1.0, (0.0, 0.0),
                                   bracket=2.0)
    pts = np.array([[0.0, 0.0], [0.5, 0.5], [1.5, 0.0]])
    d_ref = geometry.signed_distance(disk, pts)
    d_ls = geometry.signed_distance(dom, pts)
    np.testing.assert_allclose(d_ls, d_ref, atol=1e-6)
