import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bimanual_saliency.geom import (
    Disk,
    Frustum,
    GravityLine,
    PointCloud,
    Rect,
    Sphere,
    TorusArc,
    box_faces,
    centroid,
    check_labels,
    check_saliency,
    knn,
    knn_batch,
    point_line_distance,
    sample_patches,
    soft_interpolate,
)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def test_cloud_rejects_bad_input():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        PointCloud(np.array([[0, 0, 0], [1, 0, 0], [np.nan, 0, 0]]))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((4, 2)))


def test_cloud_is_read_only():
    c = PointCloud(np.eye(3))
    with pytest.raises(ValueError):
        c.points[0, 0] = 5.0


@given(arrays(np.float64, (20, 3), elements=finite))
def test_normalized_frame(pts):
    if np.ptp(pts, axis=0).max() < 1e-3:
        return
    c = PointCloud.normalized(pts)
    np.testing.assert_allclose(c.points.mean(axis=0), 0.0, atol=1e-9)
    diag = np.linalg.norm(c.points.max(axis=0) - c.points.min(axis=0))
    assert diag == pytest.approx(1.0)


def test_labels_and_saliency_validation():
    assert check_labels([0, 1, 2], 3).dtype == np.int64
    with pytest.raises(ValueError):
        check_labels([0, 3], 2)
    with pytest.raises(ValueError):
        check_labels([0, 1], 3)
    with pytest.raises(ValueError):
        check_labels([0, 1, 1], annotation=True)
    with pytest.raises(ValueError):
        check_saliency([0.2, 1.2])


def test_point_line_distance_closed_form():
    line = GravityLine(np.zeros(3))
    assert point_line_distance([3.0, 4.0, -7.0], line) == pytest.approx(5.0)
    # direction is normalized and sign does not matter
    tilted = GravityLine(np.zeros(3), np.array([0.0, 0.0, 5.0]))
    assert point_line_distance([3.0, 4.0, 2.0], tilted) == pytest.approx(5.0)


@given(arrays(np.float64, (3,), elements=finite), arrays(np.float64, (3,), elements=finite))
def test_point_line_distance_matches_cross_product(p, o):
    line = GravityLine(o)
    expected = np.linalg.norm(np.cross(p - o, line.direction))
    assert point_line_distance(p, line) == pytest.approx(expected, abs=1e-9)


def test_centroid_line_goes_through_mean():
    c = PointCloud(np.array([[0, 0, 0], [2, 0, 0], [0, 2, 0], [0, 0, 2.0]]))
    np.testing.assert_allclose(GravityLine.through_center(c).origin, [0.5, 0.5, 0.5])
    np.testing.assert_allclose(centroid(c), [0.5, 0.5, 0.5])


def test_knn_matches_brute_force():
    rng = np.random.default_rng(0)
    pts = rng.random((50, 3))
    q = rng.random(3)
    got = knn(pts, q, 5)
    d = np.linalg.norm(pts - q, axis=1)
    assert [i for i, _ in got] == list(np.argsort(d)[:5])
    idx, dist = knn_batch(pts, q[None], 5)
    assert list(idx[0]) == [i for i, _ in got]
    np.testing.assert_allclose(dist[0], [x for _, x in got])


def test_knn_ties_go_to_lower_index():
    pts = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0], [5.0, 5, 5]])
    assert [i for i, _ in knn(pts, np.zeros(3), 3)] == [0, 1, 2]
    with pytest.raises(ValueError):
        knn(pts, np.zeros(3), 5)


def test_soft_interpolate_exact_at_a_point_and_constant_field():
    rng = np.random.default_rng(1)
    pts = rng.random((30, 3))
    field = rng.random(30)
    assert soft_interpolate(pts, field, pts[7], eps=1e-12) == pytest.approx(field[7], abs=1e-6)
    assert soft_interpolate(pts, np.full(30, 0.4), rng.random(3)) == pytest.approx(0.4)


def test_soft_interpolate_loop_oracle():
    rng = np.random.default_rng(2)
    pts = rng.random((25, 3))
    field = rng.random(25)
    q = rng.random(3)
    d = np.sqrt(((pts - q) ** 2).sum(axis=1))
    near = np.argsort(d)[:4]
    num = sum(field[i] / (d[i] + 1e-6) for i in near)
    den = sum(1.0 / (d[i] + 1e-6) for i in near)
    assert soft_interpolate(pts, field, q) == pytest.approx(num / den)


@pytest.mark.parametrize(
    "patch, area",
    [
        (Frustum(r0=1.0, r1=1.0, height=2.0), 4 * np.pi),
        (Frustum(r0=1.0, r1=0.0, height=1.0), np.pi * np.sqrt(2)),
        (Disk(radius=2.0), 4 * np.pi),
        (Disk(radius=2.0, inner=1.0), 3 * np.pi),
        (Rect(center=(0, 0, 0), edge_u=(2, 0, 0), edge_v=(0, 3, 0)), 6.0),
        (Sphere(radius=0.5), np.pi),
        (TorusArc(major=1.0, minor=0.1), 2 * np.pi * 0.1 * np.pi * 1.0),
    ],
)
def test_patch_areas(patch, area):
    assert patch.area == pytest.approx(area)


def test_samples_lie_on_their_surfaces():
    rng = np.random.default_rng(3)
    cyl = Frustum(r0=0.5, r1=0.5, height=1.0).sample(rng, 500)
    np.testing.assert_allclose(np.hypot(cyl[:, 0], cyl[:, 1]), 0.5)
    assert cyl[:, 2].min() >= 0 and cyl[:, 2].max() <= 1.0
    sph = Sphere(center=(1, 0, 0), radius=0.3).sample(rng, 200)
    np.testing.assert_allclose(np.linalg.norm(sph - [1, 0, 0], axis=1), 0.3)
    tor = TorusArc(axis=(1.0, 0.0, 0.0), major=1.0, minor=0.1).sample(rng, 300)
    # the core arc lies in the x-z plane; every sample sits one tube radius from it
    np.testing.assert_allclose(np.hypot(np.hypot(tor[:, 0], tor[:, 2]) - 1.0, tor[:, 1]), 0.1)
    assert tor[:, 0].min() > -0.1


def test_frustum_uniform_by_area():
    # for a cone the mass below half height is 1/4 of the lateral area
    pts = Frustum(r0=0.0, r1=1.0, height=1.0).sample(np.random.default_rng(4), 20000)
    assert np.mean(pts[:, 2] < 0.5) == pytest.approx(0.25, abs=0.015)


def test_box_faces_total_area():
    faces = box_faces((0, 0, 0), (1.0, 2.0, 3.0))
    assert sum(f.area for f in faces) == pytest.approx(2 * (2 + 3 + 6))


def test_sample_patches_deterministic_and_proportional():
    patches = [Disk(radius=1.0), Disk(center=(0, 0, 1), radius=np.sqrt(3.0))]
    a, owner = sample_patches(patches, 4000, seed=5)
    b, _ = sample_patches(patches, 4000, seed=5)
    np.testing.assert_array_equal(a, b)
    assert np.mean(owner == 1) == pytest.approx(0.75, abs=0.03)
    with pytest.raises(ValueError):
        sample_patches(patches, 2, seed=0)
