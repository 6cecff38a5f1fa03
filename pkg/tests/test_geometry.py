import numpy as np
import pytest

from objvo.errors import (
    BehindCamera,
    DegenerateFit,
    NotAnEllipsoid,
    NotPositiveDefinite,
    TooFewPoints,
)
from objvo.geometry import (
    BBox,
    DualQuadric,
    Ellipse2D,
    Ellipsoid,
    Gaussian2D,
    Intrinsics,
    Pose,
    back_project,
    bbox_iou,
    dual_quadric_to_ellipsoid,
    ellipse_bbox,
    ellipse_outline_points,
    ellipse_to_gaussian,
    ellipsoid_to_dual_quadric,
    fit_ellipse,
    gaussian_to_ellipse,
    project_dual_quadric,
    project_dual_quadric_gaussian,
    project_point,
    rot2,
    se3_exp,
    se3_log,
    so3_exp,
    sqrtm_spd2,
)

K0 = Intrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)


def random_rotation(rng):
    return so3_exp(rng.normal(size=3))


# ---------------------------------------------------------------------------
# Pose basics
# ---------------------------------------------------------------------------

def test_pose_compose_inverse_identity():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = Pose(random_rotation(rng), rng.normal(size=3))
        q = p.compose(p.inverse())
        assert np.allclose(q.rotation, np.eye(3), atol=1e-9)
        assert np.allclose(q.translation, 0.0, atol=1e-9)


def test_pose_rejects_non_orthonormal():
    with pytest.raises(ValueError):
        Pose(np.eye(3) * 1.01, np.zeros(3))


def test_se3_exp_log_roundtrip():
    rng = np.random.default_rng(1)
    for _ in range(50):
        xi = rng.normal(size=6)
        # keep the rotation inside the principal domain of the log
        if np.linalg.norm(xi[3:]) >= np.pi:
            xi[3:] *= 0.9 * np.pi / np.linalg.norm(xi[3:])
        R, t = se3_exp(xi)
        assert np.allclose(se3_log(R, t), xi, atol=1e-9)


def test_se3_exp_of_log_identity_for_large_rotations():
    rng = np.random.default_rng(2)
    for _ in range(50):
        R = random_rotation(rng)
        t = rng.normal(size=3)
        R2, t2 = se3_exp(se3_log(R, t))
        assert np.allclose(R2, R, atol=1e-8)
        assert np.allclose(t2, t, atol=1e-8)


# ---------------------------------------------------------------------------
# Ellipse fitting
# ---------------------------------------------------------------------------

def _point_to_outline_rms(ellipse, pts, n=4096):
    # independent distance evaluator: nearest of a dense outline sampling
    outline = ellipse_outline_points(ellipse, n)
    d = np.linalg.norm(pts[:, None, :] - outline[None, :, :], axis=2).min(axis=1)
    return np.sqrt(np.mean(d**2))


def test_fit_ellipse_exact_recovery():
    truth = Ellipse2D(np.array([100.0, 80.0]), np.array([30.0, 10.0]), 0.4)
    pts = ellipse_outline_points(truth, 64)
    fitted = fit_ellipse(pts)
    assert np.allclose(fitted.center, truth.center, rtol=1e-6, atol=1e-6)
    assert np.allclose(fitted.semi_axes, truth.semi_axes, rtol=1e-6)
    assert abs(fitted.angle - truth.angle) < 1e-6


def test_fit_ellipse_too_few_points():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    with pytest.raises(TooFewPoints):
        fit_ellipse(pts)


def test_fit_ellipse_collinear_degenerate():
    t = np.linspace(0, 1, 16)
    pts = np.stack([t, 2 * t + 1], axis=1)
    with pytest.raises(DegenerateFit):
        fit_ellipse(pts)


def test_fit_ellipse_noisy_recovery():
    truth = Ellipse2D(np.array([100.0, 80.0]), np.array([30.0, 10.0]), 0.4)
    rng = np.random.default_rng(7)
    sigma = 0.5
    pts = ellipse_outline_points(truth, 64) + rng.normal(scale=sigma, size=(64, 2))
    fitted = fit_ellipse(pts)
    assert np.allclose(fitted.center, truth.center, rtol=0.02, atol=0.02 * 30)
    assert np.allclose(fitted.semi_axes, truth.semi_axes, rtol=0.02)
    assert abs(fitted.angle - truth.angle) < 0.02
    # independent check: residual RMS of the fit stays within 2 sigma
    assert _point_to_outline_rms(fitted, pts) <= 2 * sigma


# ---------------------------------------------------------------------------
# Ellipse <-> Gaussian
# ---------------------------------------------------------------------------

def test_ellipse_to_gaussian_axis_aligned():
    e = Ellipse2D(np.zeros(2), np.array([2.0, 1.0]), 0.0)
    g = ellipse_to_gaussian(e)
    assert np.allclose(g.covariance, np.diag([4.0, 1.0]), atol=1e-12)


def test_ellipse_to_gaussian_circle_any_angle():
    for angle in [0.0, 0.3, -1.2]:
        e = Ellipse2D(np.zeros(2), np.array([3.0, 3.0]), angle)
        g = ellipse_to_gaussian(e)
        assert np.allclose(g.covariance, 9.0 * np.eye(2), atol=1e-12)


def test_ellipse_to_gaussian_rotated():
    # hand evaluation of R D R^T for theta = pi/4, axes (3, 1)
    e = Ellipse2D(np.zeros(2), np.array([3.0, 1.0]), np.pi / 4)
    g = ellipse_to_gaussian(e)
    assert np.allclose(g.covariance, [[5.0, 4.0], [4.0, 5.0]], atol=1e-12)


def test_gaussian_to_ellipse_cases():
    e = gaussian_to_ellipse(Gaussian2D(np.zeros(2), np.diag([4.0, 1.0])))
    assert np.allclose(e.semi_axes, [2.0, 1.0])
    assert e.angle == 0.0

    e = gaussian_to_ellipse(Gaussian2D(np.zeros(2), np.eye(2)))
    assert np.allclose(e.semi_axes, [1.0, 1.0])
    assert e.angle == 0.0

    # eigendecomposition oracle for the rotated case
    cov = np.array([[5.0, 4.0], [4.0, 5.0]])
    vals, vecs = np.linalg.eigh(cov)
    e = gaussian_to_ellipse(Gaussian2D(np.zeros(2), cov))
    assert np.allclose(sorted(e.semi_axes, reverse=True), np.sqrt(vals)[::-1], atol=1e-12)
    assert abs(e.angle - np.pi / 4) < 1e-12


def test_gaussian_ellipse_roundtrip():
    rng = np.random.default_rng(3)
    for _ in range(200):
        axes = np.sort(rng.uniform(0.5, 50.0, size=2))[::-1]
        angle = rng.uniform(-np.pi / 2, np.pi / 2)
        e = Ellipse2D(rng.uniform(-100, 100, size=2), axes, angle)
        e2 = gaussian_to_ellipse(ellipse_to_gaussian(e))
        assert np.allclose(e2.center, e.center, atol=1e-9)
        assert np.allclose(e2.semi_axes, e.semi_axes, atol=1e-9)
        da = (e2.angle - e.angle + np.pi / 2) % np.pi - np.pi / 2
        assert abs(da) < 1e-9


def test_gaussian_rejects_non_spd():
    with pytest.raises(NotPositiveDefinite):
        Gaussian2D(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]))


# ---------------------------------------------------------------------------
# Dual quadrics
# ---------------------------------------------------------------------------

def test_unit_sphere_quadric():
    e = Ellipsoid(np.zeros(3), np.ones(3), np.eye(3))
    q = ellipsoid_to_dual_quadric(e)
    assert np.allclose(q.matrix, np.diag([1.0, 1.0, 1.0, -1.0]), atol=1e-12)


def test_translated_sphere_quadric_explicit_product():
    center = np.array([0.0, 0.0, 5.0])
    e = Ellipsoid(center, np.ones(3), np.eye(3))
    q = ellipsoid_to_dual_quadric(e)
    # explicit 4x4 product as the oracle
    T = np.eye(4)
    T[:3, 3] = center
    expected = T @ np.diag([1.0, 1.0, 1.0, -1.0]) @ T.T
    assert np.allclose(q.matrix, expected, atol=1e-12)
    assert q.matrix[3, 3] == -1.0


def test_dual_quadric_roundtrip():
    rng = np.random.default_rng(5)
    for _ in range(50):
        e = Ellipsoid(rng.normal(scale=3.0, size=3),
                      rng.uniform(0.2, 4.0, size=3),
                      random_rotation(rng))
        e2 = dual_quadric_to_ellipsoid(ellipsoid_to_dual_quadric(e))
        assert np.allclose(e2.center, e.center, atol=1e-9)
        assert np.allclose(np.sort(e2.semi_axes), np.sort(e.semi_axes), atol=1e-9)
        q1 = ellipsoid_to_dual_quadric(e).matrix
        q2 = ellipsoid_to_dual_quadric(e2).matrix
        assert np.allclose(q1, q2, atol=1e-9)


def test_dual_quadric_scale_normalization():
    e = Ellipsoid(np.array([1.0, -2.0, 4.0]), np.array([1.0, 2.0, 0.5]), np.eye(3))
    m = ellipsoid_to_dual_quadric(e).matrix
    q = DualQuadric(7.5 * m)
    assert np.allclose(q.matrix, m, atol=1e-12)


def test_non_ellipsoid_rejected():
    with pytest.raises(NotAnEllipsoid):
        dual_quadric_to_ellipsoid(DualQuadric(np.diag([1.0, 1.0, -1.0, -1.0])))


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------

def test_project_sphere_on_axis_matches_silhouette_oracle():
    e = Ellipsoid(np.array([0.0, 0.0, 5.0]), np.ones(3), np.eye(3))
    q = ellipsoid_to_dual_quadric(e)
    ell = project_dual_quadric(q, Pose.identity(), K0)
    # silhouette-cone tangency: radius = f r / sqrt(d^2 - r^2)
    expected_r = 500.0 * 1.0 / np.sqrt(25.0 - 1.0)
    assert np.allclose(ell.center, [320.0, 240.0], atol=1e-6)
    assert abs(ell.semi_axes[0] - expected_r) < 1e-6
    assert abs(ell.semi_axes[1] - expected_r) < 1e-6
    assert abs(ell.semi_axes[0] / ell.semi_axes[1] - 1.0) < 1e-9


def test_project_sphere_behind_camera():
    e = Ellipsoid(np.array([0.0, 0.0, -5.0]), np.ones(3), np.eye(3))
    q = ellipsoid_to_dual_quadric(e)
    with pytest.raises(BehindCamera):
        project_dual_quadric(q, Pose.identity(), K0)


def test_projection_roll_covariance():
    # rolling about the optical axis rotates the projected Gaussian about the
    # principal point and conjugates the covariance by the same rotation
    rng = np.random.default_rng(11)
    for _ in range(10):
        e = Ellipsoid(np.array([0.5, -0.3, 6.0]) + rng.normal(scale=0.2, size=3),
                      rng.uniform(0.3, 1.0, size=3),
                      random_rotation(rng))
        q = ellipsoid_to_dual_quadric(e)
        phi = rng.uniform(-np.pi, np.pi)
        Rz = np.eye(3)
        Rz[:2, :2] = rot2(phi)
        roll = Pose(Rz, np.zeros(3))
        g0 = project_dual_quadric_gaussian(q, Pose.identity(), K0)
        g1 = project_dual_quadric_gaussian(q, roll.compose(Pose.identity()), K0)
        pp = np.array([K0.cx, K0.cy])
        R2 = rot2(phi)
        assert np.allclose(g1.mean, R2 @ (g0.mean - pp) + pp, atol=1e-9)
        assert np.allclose(g1.covariance, R2 @ g0.covariance @ R2.T, atol=1e-9)


def test_project_point_and_back():
    rng = np.random.default_rng(13)
    for _ in range(30):
        pose = Pose(random_rotation(rng), rng.normal(size=3))
        p = pose.inverse().transform(np.array([0.2, -0.1, 4.0]) + rng.normal(scale=0.5, size=3))
        px = project_point(p, pose, K0)
        depth = pose.transform(p)[2]
        assert np.allclose(back_project(px, depth, pose, K0), p, atol=1e-9)


def test_project_point_behind():
    pose = Pose.identity()
    with pytest.raises(BehindCamera):
        project_point(np.array([0.0, 0.0, -1.0]), pose, K0)


# ---------------------------------------------------------------------------
# Boxes
# ---------------------------------------------------------------------------

def test_ellipse_bbox_half_extents():
    e = Ellipse2D(np.array([10.0, 20.0]), np.array([3.0, 1.0]), 0.7)
    box = ellipse_bbox(e)
    a, b = 3.0, 1.0
    c, s = np.cos(0.7), np.sin(0.7)
    half = np.array([np.sqrt(a**2 * c**2 + b**2 * s**2), np.sqrt(a**2 * s**2 + b**2 * c**2)])
    assert np.allclose(box.min, e.center - half)
    assert np.allclose(box.max, e.center + half)


def _rasterized_iou(a, b, n=1200):
    # pixel-count oracle on a fine grid over the union of both boxes
    lo = np.minimum(a.min, b.min)
    hi = np.maximum(a.max, b.max)
    xs = np.linspace(lo[0], hi[0], n)
    ys = np.linspace(lo[1], hi[1], n)
    X, Y = np.meshgrid(xs, ys)
    in_a = (X >= a.min[0]) & (X <= a.max[0]) & (Y >= a.min[1]) & (Y <= a.max[1])
    in_b = (X >= b.min[0]) & (X <= b.max[0]) & (Y >= b.min[1]) & (Y <= b.max[1])
    return np.sum(in_a & in_b) / np.sum(in_a | in_b)


def test_bbox_iou_cases():
    box = BBox(np.zeros(2), np.array([2.0, 2.0]))
    assert bbox_iou(box, box) == 1.0
    far = BBox(np.array([5.0, 5.0]), np.array([6.0, 6.0]))
    assert bbox_iou(box, far) == 0.0
    other = BBox(np.array([1.0, 1.0]), np.array([3.0, 3.0]))
    iou = bbox_iou(box, other)
    assert abs(iou - 1.0 / 7.0) < 1e-12
    assert abs(iou - _rasterized_iou(box, other)) < 2e-3


def test_bbox_iou_symmetric_bounded():
    rng = np.random.default_rng(17)
    for _ in range(100):
        lo1 = rng.uniform(-5, 5, size=2)
        lo2 = rng.uniform(-5, 5, size=2)
        a = BBox(lo1, lo1 + rng.uniform(0.1, 4, size=2))
        b = BBox(lo2, lo2 + rng.uniform(0.1, 4, size=2))
        i1, i2 = bbox_iou(a, b), bbox_iou(b, a)
        assert i1 == i2
        assert 0.0 <= i1 <= 1.0
    assert bbox_iou(a, a) == 1.0


# ---------------------------------------------------------------------------
# 2x2 SPD square root
# ---------------------------------------------------------------------------

def test_sqrtm_spd2_cases():
    assert np.allclose(sqrtm_spd2(np.eye(2)), np.eye(2), atol=1e-15)
    assert np.allclose(sqrtm_spd2(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-12)
    m = np.array([[5.0, 4.0], [4.0, 5.0]])
    r = sqrtm_spd2(m)
    assert np.allclose(r @ r, m, atol=1e-10)


def test_sqrtm_spd2_random_squaring():
    rng = np.random.default_rng(23)
    for _ in range(1000):
        # condition number up to 1e6
        l1 = 10.0 ** rng.uniform(-2, 2)
        l2 = l1 / 10.0 ** rng.uniform(0, 6)
        R = rot2(rng.uniform(-np.pi, np.pi))
        m = R @ np.diag([l1, l2]) @ R.T
        m = 0.5 * (m + m.T)
        r = sqrtm_spd2(m)
        assert np.abs(r @ r - m).max() < 1e-10
        assert np.linalg.det(r) > 0 and np.trace(r) > 0


def test_sqrtm_spd2_rejects():
    with pytest.raises(NotPositiveDefinite):
        sqrtm_spd2(np.diag([1.0, -1.0]))
