import numpy as np
import pytest

from objvo.errors import DegenerateBaseline, TooFewMatches, TooFewViews
from objvo.geometry import (
    Ellipsoid,
    Intrinsics,
    Pose,
    project_ellipsoid_gaussian,
    so3_exp,
)
from objvo.metrics import WassersteinForm, wasserstein2_sq
from objvo.optimize import (
    DiagLog,
    EllipsoidParams,
    SolverConfig,
    estimate_ellipsoid,
    huber_weights,
    initialize_ellipsoid,
    numeric_jacobian_check,
    optimize_pose,
    reprojection_jacobians,
    reprojection_residuals,
)

K0 = Intrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)
CFG = SolverConfig()


def _random_pose(rng, rot_scale=0.4, trans_scale=1.0):
    return Pose(so3_exp(rng.normal(scale=rot_scale, size=3)),
                rng.normal(scale=trans_scale, size=3))


def _visible_cloud(rng, pose, n=60):
    """World points spread across the image at depths 2..8."""
    u = rng.uniform(40, K0.width - 40, size=n)
    v = rng.uniform(40, K0.height - 40, size=n)
    z = rng.uniform(2.0, 8.0, size=n)
    pc = np.stack([(u - K0.cx) / K0.fx * z, (v - K0.cy) / K0.fy * z, z], axis=1)
    return pose.inverse().transform(pc)


def _rotation_error(a: Pose, b: Pose) -> float:
    R = a.rotation @ b.rotation.T
    return float(np.arccos(np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)))


# ---------------------------------------------------------------------------
# Jacobians
# ---------------------------------------------------------------------------

def test_reprojection_jacobians_match_central_differences():
    rng = np.random.default_rng(31)
    worst = 0.0
    for _ in range(100):
        pose = _random_pose(rng)
        pts = _visible_cloud(rng, pose, n=4)
        px = rng.uniform(0, 640, size=(4, 2))
        res0, pc = reprojection_residuals(pose, pts, px, K0)
        J_pose, J_point = reprojection_jacobians(pc, K0, pose.rotation)

        def res_of_twist(xi, pose=pose, pts=pts, px=px):
            r, _ = reprojection_residuals(pose.retract_left(xi), pts, px, K0)
            return r.reshape(-1)

        dev = numeric_jacobian_check(res_of_twist, J_pose.reshape(-1, 6), np.zeros(6))
        worst = max(worst, dev)

        def res_of_point(dp, pose=pose, pts=pts, px=px):
            moved = pts.copy()
            moved[0] = pts[0] + dp
            r, _ = reprojection_residuals(pose, moved, px, K0)
            return r[0]

        dev_pt = numeric_jacobian_check(res_of_point, J_point[0], np.zeros(3))
        worst = max(worst, dev_pt)
    assert worst < 1e-5


# ---------------------------------------------------------------------------
# Pose-only optimization
# ---------------------------------------------------------------------------

def test_optimize_pose_noiseless_recovery():
    rng = np.random.default_rng(37)
    for _ in range(5):
        truth = _random_pose(rng)
        pts = _visible_cloud(rng, truth, n=80)
        px, _ = reprojection_residuals(truth, pts, np.zeros((80, 2)), K0)
        # perturb by 1 degree rotation and ~1% scene-scale translation
        axis = rng.normal(size=3)
        axis *= np.deg2rad(1.0) / np.linalg.norm(axis)
        init = Pose(so3_exp(axis) @ truth.rotation, truth.translation + rng.normal(scale=0.03, size=3))
        result = optimize_pose(px, pts, init, K0, CFG)
        assert result.converged
        assert _rotation_error(result.pose, truth) < 1e-6
        assert np.linalg.norm(result.pose.translation - truth.translation) < 1e-6
        assert result.inlier_mask.all()


def test_optimize_pose_identity_problem():
    rng = np.random.default_rng(41)
    truth = _random_pose(rng)
    pts = _visible_cloud(rng, truth, n=40)
    px, _ = reprojection_residuals(truth, pts, np.zeros((40, 2)), K0)
    result = optimize_pose(px, pts, truth, K0, CFG)
    assert result.final_cost < 1e-18
    assert _rotation_error(result.pose, truth) < 1e-12
    assert np.linalg.norm(result.pose.translation - truth.translation) < 1e-12


def test_optimize_pose_with_outliers():
    rng = np.random.default_rng(43)
    truth = _random_pose(rng)
    n = 120
    pts = _visible_cloud(rng, truth, n=n)
    px, _ = reprojection_residuals(truth, pts, np.zeros((n, 2)), K0)
    n_out = int(0.3 * n)
    out_idx = rng.choice(n, size=n_out, replace=False)
    px[out_idx] = rng.uniform([0, 0], [K0.width, K0.height], size=(n_out, 2))
    axis = rng.normal(size=3)
    axis *= np.deg2rad(1.0) / np.linalg.norm(axis)
    init = Pose(so3_exp(axis) @ truth.rotation, truth.translation + rng.normal(scale=0.03, size=3))
    result = optimize_pose(px, pts, init, K0, CFG)
    assert _rotation_error(result.pose, truth) < 5e-3
    assert np.linalg.norm(result.pose.translation - truth.translation) < 5e-3
    flagged = ~result.inlier_mask
    assert flagged[out_idx].mean() >= 0.95


def test_optimize_pose_too_few_matches():
    with pytest.raises(TooFewMatches):
        optimize_pose(np.zeros((5, 2)), np.zeros((5, 3)), Pose.identity(), K0, CFG)


def test_pose_lm_cost_monotone_per_solve():
    rng = np.random.default_rng(47)
    truth = _random_pose(rng)
    pts = _visible_cloud(rng, truth, n=50)
    px, _ = reprojection_residuals(truth, pts, np.zeros((50, 2)), K0)
    px += rng.normal(scale=1.0, size=px.shape)
    init = Pose(so3_exp(rng.normal(scale=0.02, size=3)) @ truth.rotation,
                truth.translation + rng.normal(scale=0.05, size=3))
    diag = DiagLog()
    optimize_pose(px, pts, init, K0, CFG, diag=diag)
    by_solve = {}
    for solver, sid, it, cost, lam in diag.rows:
        by_solve.setdefault(sid, []).append(cost)
    for costs in by_solve.values():
        assert all(b <= a + 1e-12 for a, b in zip(costs, costs[1:]))


def test_huber_weights_shape():
    res = np.array([[1.0, 0.0], [10.0, 0.0]])
    w, cost = huber_weights(res, 2.45)
    assert w[0] == 1.0
    assert abs(w[1] - 0.245) < 1e-12
    assert abs(cost - (1.0 + 2 * 2.45 * 10 - 2.45**2)) < 1e-12


# ---------------------------------------------------------------------------
# Ellipsoid estimation
# ---------------------------------------------------------------------------

def _orbit_poses(center, radius, n, rng=None):
    poses = []
    for i in range(n):
        phi = 2.0 * np.pi * i / n
        cam = center + radius * np.array([np.cos(phi), np.sin(phi), 0.15 * np.sin(2 * phi)])
        z = center - cam
        z = z / np.linalg.norm(z)
        up = np.array([0.0, 0.0, 1.0])
        x = np.cross(up, z)
        if np.linalg.norm(x) < 1e-6:
            x = np.array([1.0, 0.0, 0.0])
        x = x / np.linalg.norm(x)
        y = np.cross(z, x)
        R_wc = np.stack([x, y, z], axis=1)
        poses.append(Pose(R_wc.T, -R_wc.T @ cam))
    return poses


def _perturbed_init(truth: Ellipsoid, rng) -> EllipsoidParams:
    p = EllipsoidParams.from_ellipsoid(truth)
    p.center = p.center + 0.1 * truth.semi_axes.mean() * rng.normal(size=3)
    p.log_axes = p.log_axes + rng.uniform(-np.log(1.1), np.log(1.1), size=3)
    p.rotation = p.rotation + rng.normal(scale=0.05, size=3)
    return p


@pytest.mark.parametrize("form", [WassersteinForm.FROBENIUS, WassersteinForm.BURES_TRACE])
def test_estimate_ellipsoid_noiseless_recovery(form):
    rng = np.random.default_rng(53)
    truth = Ellipsoid(np.array([0.3, -0.2, 0.1]), np.array([0.8, 0.5, 0.3]),
                      so3_exp(np.array([0.2, -0.1, 0.4])))
    poses = _orbit_poses(truth.center, 4.0, 10)
    obs = [(project_ellipsoid_gaussian(truth, p, K0), p) for p in poses]
    init = _perturbed_init(truth, rng)
    result = estimate_ellipsoid(obs, K0, init, CFG, form)
    est = result.ellipsoid
    assert np.linalg.norm(est.center - truth.center) < 1e-3
    assert np.allclose(np.sort(est.semi_axes), np.sort(truth.semi_axes), rtol=0.01)


def test_estimate_ellipsoid_at_truth_is_stationary():
    truth = Ellipsoid(np.array([0.0, 0.5, 0.2]), np.array([0.6, 0.4, 0.25]),
                      so3_exp(np.array([0.1, 0.3, -0.2])))
    poses = _orbit_poses(truth.center, 3.5, 8)
    obs = [(project_ellipsoid_gaussian(truth, p, K0), p) for p in poses]
    init = EllipsoidParams.from_ellipsoid(truth)
    result = estimate_ellipsoid(obs, K0, init, CFG)
    assert result.cost < 1e-12
    assert np.linalg.norm(result.ellipsoid.center - truth.center) < 1e-9
    assert np.allclose(result.ellipsoid.semi_axes, truth.semi_axes, atol=1e-9)


def test_estimate_ellipsoid_too_few_views():
    truth = Ellipsoid(np.zeros(3), np.array([0.5, 0.4, 0.3]), np.eye(3))
    poses = _orbit_poses(truth.center, 3.0, 2)
    obs = [(project_ellipsoid_gaussian(truth, p, K0), p) for p in poses]
    with pytest.raises(TooFewViews):
        estimate_ellipsoid(obs, K0, EllipsoidParams.from_ellipsoid(truth), CFG)


def test_estimate_ellipsoid_degenerate_baseline():
    truth = Ellipsoid(np.array([0.0, 0.0, 5.0]), np.array([0.5, 0.4, 0.3]), np.eye(3))
    # three nearly identical viewpoints along the optical axis
    obs = []
    for dz in (0.0, 0.01, 0.02):
        pose = Pose(np.eye(3), np.array([0.0, 0.0, dz]))
        obs.append((project_ellipsoid_gaussian(truth, pose, K0), pose))
    with pytest.raises(DegenerateBaseline):
        estimate_ellipsoid(obs, K0, EllipsoidParams.from_ellipsoid(truth), CFG)


def test_estimate_ellipsoid_equivariance():
    rng = np.random.default_rng(59)
    truth = Ellipsoid(np.array([0.2, -0.4, 0.3]), np.array([0.7, 0.45, 0.3]),
                      so3_exp(np.array([0.3, 0.1, -0.2])))
    poses = _orbit_poses(truth.center, 4.0, 10)
    obs = [(project_ellipsoid_gaussian(truth, p, K0), p) for p in poses]
    init = _perturbed_init(truth, rng)

    G = Pose(so3_exp(np.array([0.4, -0.3, 0.7])), np.array([2.0, -1.0, 0.5]))
    # transform world coordinates by G: poses compose with G^-1
    poses_t = [p.compose(G.inverse()) for p in poses]
    obs_t = [(g, pt) for (g, _), pt in zip(obs, poses_t)]
    e0 = init.to_ellipsoid()
    init_t = EllipsoidParams.from_ellipsoid(
        Ellipsoid(G.transform(e0.center), e0.semi_axes, G.rotation @ e0.rotation))

    res_a = estimate_ellipsoid(obs, K0, init, CFG)
    res_b = estimate_ellipsoid(obs_t, K0, init_t, CFG)
    est_a, est_b = res_a.ellipsoid, res_b.ellipsoid
    assert np.linalg.norm(G.transform(est_a.center) - est_b.center) < 1e-6
    assert np.allclose(np.sort(est_a.semi_axes), np.sort(est_b.semi_axes), atol=1e-6)


def test_initialize_ellipsoid_geometry():
    pose = Pose.identity()
    params = initialize_ellipsoid(np.array([320.0, 240.0]), 20.0, 5.0, pose, K0)
    e = params.to_ellipsoid()
    assert np.allclose(e.center, [0.0, 0.0, 5.0], atol=1e-12)
    assert np.allclose(e.semi_axes, 5.0 * 20.0 / 500.0, atol=1e-12)


def test_per_object_reoptimization_never_increases_cost():
    rng = np.random.default_rng(61)
    truth = Ellipsoid(np.array([0.1, 0.2, -0.1]), np.array([0.6, 0.5, 0.35]),
                      so3_exp(np.array([0.2, 0.0, 0.1])))
    poses = _orbit_poses(truth.center, 4.0, 8)
    obs = []
    for p in poses:
        g = project_ellipsoid_gaussian(truth, p, K0)
        noisy_mean = g.mean + rng.normal(scale=1.0, size=2)
        obs.append((type(g)(noisy_mean, g.covariance), p))
    init = _perturbed_init(truth, rng)
    first = estimate_ellipsoid(obs, K0, init, CFG)

    def total_cost(e):
        return sum(wasserstein2_sq(g, project_ellipsoid_gaussian(e, p, K0)) for g, p in obs)

    # re-optimization from the previous solution must not increase J
    again = estimate_ellipsoid(obs, K0, EllipsoidParams.from_ellipsoid(first.ellipsoid), CFG)
    before = total_cost(first.ellipsoid)
    assert total_cost(again.ellipsoid) <= before + 1e-12 * max(1.0, before)
