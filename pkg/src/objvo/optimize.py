"""Nonlinear least-squares machinery.

Three solvers, all Levenberg-Marquardt with multiplicative damping (x10 on a
rejected step, x0.1 on an accepted one):

* pose-only refinement minimizing Huber-robustified reprojection error, with
  alternating outlier reclassification;
* local bundle adjustment over keyframe poses and point positions, with the
  point blocks eliminated by a Schur complement (object parameters are never
  touched);
* per-object ellipsoid estimation under the squared Wasserstein cost, with
  Jacobians from central finite differences.

Pose increments are 6-vector twists applied on the left; ellipsoid rotation
increments are axis-angle vectors applied on the right.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DegenerateBaseline, TooFewMatches, TooFewViews
from .geometry import (
    Ellipsoid,
    Gaussian2D,
    Intrinsics,
    Pose,
    so3_exp,
    so3_log,
    sqrtm_spd2,
)
from .metrics import WassersteinForm


@dataclass(frozen=True)
class SolverConfig:
    max_iterations_pose: int = 10
    max_iterations_ba: int = 5
    max_iterations_ellipsoid: int = 20
    initial_damping: float = 1e-4
    rel_cost_tol: float = 1e-6
    step_tol: float = 1e-8
    huber_delta: float = 2.45          # pixels; delta^2 ~ chi2(2dof, 95%)
    chi2_outlier: float = 5.99
    reclassify_rounds: int = 4

    def __post_init__(self):
        for name in ("max_iterations_pose", "max_iterations_ba", "max_iterations_ellipsoid",
                     "initial_damping", "rel_cost_tol", "step_tol", "huber_delta",
                     "chi2_outlier", "reclassify_rounds"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class EllipsoidParams:
    """Minimal ellipsoid parameterization for optimization.

    ``rotation`` is an axis-angle vector from the identity; optimizer
    increments right-multiply the current rotation.
    """

    center: np.ndarray
    log_axes: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def to_ellipsoid(self) -> Ellipsoid:
        return Ellipsoid(self.center.copy(), np.exp(self.log_axes), so3_exp(self.rotation))

    @staticmethod
    def from_ellipsoid(e: Ellipsoid) -> "EllipsoidParams":
        return EllipsoidParams(e.center.copy(), np.log(e.semi_axes), so3_log(e.rotation))


class DiagLog:
    """Per-solve iteration log (solver, solve id, iteration, cost, damping)."""

    def __init__(self):
        self.rows: list[tuple[str, int, int, float, float]] = []
        self._solve_counter = 0

    def next_solve(self) -> int:
        self._solve_counter += 1
        return self._solve_counter

    def record(self, solver: str, solve_id: int, iteration: int, cost: float, damping: float):
        self.rows.append((solver, solve_id, iteration, float(cost), float(damping)))

    def write_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["solver", "solve_id", "iteration", "cost", "damping"])
            w.writerows(self.rows)


# ---------------------------------------------------------------------------
# Reprojection residuals and analytic Jacobians
# ---------------------------------------------------------------------------

def reprojection_residuals(pose: Pose, points: np.ndarray, pixels: np.ndarray,
                           k: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Residuals (N, 2) = projection - measurement, and camera-frame points."""
    pc = pose.transform(points)
    z = np.maximum(pc[:, 2], 1e-9)
    u = k.fx * pc[:, 0] / z + k.cx
    v = k.fy * pc[:, 1] / z + k.cy
    res = np.stack([u, v], axis=1) - pixels
    return res, pc


def reprojection_jacobians(pc: np.ndarray, k: Intrinsics,
                           rotation: Optional[np.ndarray] = None
                           ) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Analytic Jacobians of the residual wrt the left pose twist [rho, omega]
    and (when ``rotation`` is given) wrt the world point.

    Left perturbation of the camera-from-world pose moves the camera-frame
    point by d pc = d rho - [pc]x d omega; the pinhole Jacobian chains on top.
    """
    n = pc.shape[0]
    x, y = pc[:, 0], pc[:, 1]
    z = np.maximum(pc[:, 2], 1e-9)
    inv_z = 1.0 / z
    inv_z2 = inv_z * inv_z
    # d(u,v)/d(pc)
    J_proj = np.zeros((n, 2, 3))
    J_proj[:, 0, 0] = k.fx * inv_z
    J_proj[:, 0, 2] = -k.fx * x * inv_z2
    J_proj[:, 1, 1] = k.fy * inv_z
    J_proj[:, 1, 2] = -k.fy * y * inv_z2
    # d(pc)/d(twist): [I | -hat(pc)]
    J_pc = np.zeros((n, 3, 6))
    J_pc[:, 0, 0] = J_pc[:, 1, 1] = J_pc[:, 2, 2] = 1.0
    J_pc[:, 0, 4] = pc[:, 2]
    J_pc[:, 0, 5] = -pc[:, 1]
    J_pc[:, 1, 3] = -pc[:, 2]
    J_pc[:, 1, 5] = pc[:, 0]
    J_pc[:, 2, 3] = pc[:, 1]
    J_pc[:, 2, 4] = -pc[:, 0]
    J_pose = np.einsum("nij,njk->nik", J_proj, J_pc)
    J_point = None
    if rotation is not None:
        J_point = np.einsum("nij,jk->nik", J_proj, rotation)
    return J_pose, J_point


def huber_weights(res: np.ndarray, delta: float) -> tuple[np.ndarray, float]:
    """IRLS weights and total robust cost for 2D residual rows."""
    norms = np.linalg.norm(res, axis=1)
    w = np.ones_like(norms)
    heavy = norms > delta
    w[heavy] = delta / norms[heavy]
    cost = np.where(heavy, 2.0 * delta * norms - delta * delta, norms * norms).sum()
    return w, float(cost)


# ---------------------------------------------------------------------------
# Pose-only optimization
# ---------------------------------------------------------------------------

@dataclass
class PoseResult:
    pose: Pose
    inlier_mask: np.ndarray
    converged: bool
    final_cost: float
    iterations: int


def optimize_pose(pixels: np.ndarray, points: np.ndarray, pose0: Pose, k: Intrinsics,
                  cfg: SolverConfig, diag: Optional[DiagLog] = None) -> PoseResult:
    """6-DoF pose refinement by LM on Huber-robustified reprojection error.

    Alternates optimization with outlier reclassification (squared pixel
    error above chi2_outlier) for ``reclassify_rounds`` rounds. Needs at
    least six matches; returns the best iterate with a flag when the last
    round fails to converge.
    """
    pixels = np.asarray(pixels, dtype=float)
    points = np.asarray(points, dtype=float)
    n = len(pixels)
    if n < 6:
        raise TooFewMatches(f"need >= 6 matches, got {n}")
    solve_id = diag.next_solve() if diag else 0
    pose = pose0
    inliers = np.ones(n, dtype=bool)
    converged = False
    cost = np.inf
    total_iters = 0
    for round_idx in range(cfg.reclassify_rounds):
        if inliers.sum() < 6:
            break
        pose, cost, converged, iters = _lm_pose(pixels[inliers], points[inliers], pose, k,
                                                cfg, diag, solve_id)
        total_iters += iters
        res, _ = reprojection_residuals(pose, points, pixels, k)
        sq = (res * res).sum(axis=1)
        new_inliers = sq <= cfg.chi2_outlier
        if round_idx < cfg.reclassify_rounds - 1 and np.array_equal(new_inliers, inliers):
            inliers = new_inliers
            break
        inliers = new_inliers
    return PoseResult(pose, inliers, converged, cost, total_iters)


def _lm_pose(pixels, points, pose, k, cfg, diag, solve_id):
    res, pc = reprojection_residuals(pose, points, pixels, k)
    w, cost = huber_weights(res, cfg.huber_delta)
    lam = cfg.initial_damping
    converged = False
    it = 0
    for it in range(1, cfg.max_iterations_pose + 1):
        J, _ = reprojection_jacobians(pc, k)
        sw = np.sqrt(w)[:, None]
        Jw = (J * sw[:, :, None]).reshape(-1, 6)
        rw = (res * sw).reshape(-1)
        H = Jw.T @ Jw
        g = Jw.T @ rw
        stepped = False
        for _ in range(8):
            Hd = H + lam * np.diag(np.maximum(np.diag(H), 1e-12))
            try:
                delta = np.linalg.solve(Hd, -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            cand = pose.retract_left(delta)
            cand_res, cand_pc = reprojection_residuals(cand, points, pixels, k)
            cand_w, cand_cost = huber_weights(cand_res, cfg.huber_delta)
            if cand_cost <= cost:
                step_norm = float(np.linalg.norm(delta))
                rel_drop = (cost - cand_cost) / max(cost, 1e-30)
                pose, res, pc, w, cost = cand, cand_res, cand_pc, cand_w, cand_cost
                lam = max(lam * 0.1, 1e-12)
                stepped = True
                if diag:
                    diag.record("pose", solve_id, it, cost, lam)
                if rel_drop < cfg.rel_cost_tol or step_norm < cfg.step_tol:
                    converged = True
                break
            lam *= 10.0
        if converged or not stepped:
            if not stepped:
                converged = True  # damping saturated at a local minimum
            break
    return pose, cost, converged, it


# ---------------------------------------------------------------------------
# Local bundle adjustment (Schur complement on point blocks)
# ---------------------------------------------------------------------------

@dataclass
class BAResult:
    converged: bool
    initial_cost: float
    final_cost: float
    outlier_edges: list[tuple[int, int]]    # (keyframe id, map point id)
    iterations: int


def _same_point_pairs(point_idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs (k, l) of observations sharing a point, including k == l."""
    order = np.argsort(point_idx, kind="stable")
    sorted_pts = point_idx[order]
    boundaries = np.nonzero(np.diff(sorted_pts))[0] + 1
    groups = np.split(order, boundaries)
    ks, ls = [], []
    for g in groups:
        grid_k, grid_l = np.meshgrid(g, g, indexing="ij")
        ks.append(grid_k.ravel())
        ls.append(grid_l.ravel())
    return np.concatenate(ks), np.concatenate(ls)


def local_bundle_adjustment(wmap, local_kf_ids: list[int], fixed_kf_ids: list[int],
                            local_point_ids: list[int], cfg: SolverConfig,
                            diag: Optional[DiagLog] = None) -> BAResult:
    """Joint LM over local keyframe poses and local point positions.

    Fixed keyframes (plus the map's first keyframe, for gauge) contribute
    observations but keep their poses bit-identical. Points observed fewer
    than twice inside the window are skipped. Updates are written back into
    the map; edges whose final squared reprojection error exceeds the chi2
    gate are returned for removal. Object parameters are never touched.
    """
    k = wmap.intrinsics
    fixed = set(fixed_kf_ids)
    if wmap.first_keyframe_id is not None:
        fixed.add(wmap.first_keyframe_id)
    free_ids = [kf_id for kf_id in sorted(local_kf_ids) if kf_id not in fixed]
    all_ids = sorted(set(local_kf_ids) | fixed)
    point_set = set(local_point_ids)

    obs_kf, obs_pt, obs_px, obs_kp = [], [], [], []
    counts: dict[int, int] = {}
    for kf_id in all_ids:
        kf = wmap.keyframes.get(kf_id)
        if kf is None:
            continue
        for kp_idx, pid in sorted(kf.matched_points.items()):
            if pid in point_set:
                counts[pid] = counts.get(pid, 0) + 1
    usable_points = sorted(pid for pid, c in counts.items() if c >= 2)
    pt_index = {pid: i for i, pid in enumerate(usable_points)}
    kf_index = {kf_id: i for i, kf_id in enumerate(free_ids)}
    for kf_id in all_ids:
        kf = wmap.keyframes.get(kf_id)
        if kf is None:
            continue
        for kp_idx, pid in sorted(kf.matched_points.items()):
            if pid in pt_index:
                obs_kf.append(kf_id)
                obs_pt.append(pid)
                obs_px.append(kf.pixels[kp_idx])
                obs_kp.append(kp_idx)
    if not obs_kf or (not free_ids and not usable_points):
        return BAResult(True, 0.0, 0.0, [], 0)

    obs_kf = np.asarray(obs_kf)
    obs_pt = np.asarray(obs_pt)
    pixels = np.asarray(obs_px, dtype=float)
    pi = np.array([kf_index.get(kf_id, -1) for kf_id in obs_kf])     # -1 = fixed pose
    li = np.array([pt_index[pid] for pid in obs_pt])

    poses = {kf_id: wmap.keyframes[kf_id].pose for kf_id in all_ids}
    positions = np.asarray([wmap.points[pid].position for pid in usable_points])

    n_free = len(free_ids)
    n_pts = len(usable_points)
    solve_id = diag.next_solve() if diag else 0
    kf_groups = [(kf_id, np.nonzero(obs_kf == kf_id)[0]) for kf_id in all_ids]
    kf_groups = [(kf_id, sel) for kf_id, sel in kf_groups if len(sel)]

    def eval_all(pose_map, pos):
        res = np.empty((len(obs_kf), 2))
        pcs = np.empty((len(obs_kf), 3))
        for kf_id, sel in kf_groups:
            r, pc = reprojection_residuals(pose_map[kf_id], pos[li[sel]], pixels[sel], k)
            res[sel] = r
            pcs[sel] = pc
        return res, pcs

    res, pcs = eval_all(poses, positions)
    w, cost = huber_weights(res, cfg.huber_delta)
    initial_cost = cost
    lam = cfg.initial_damping
    converged = False
    it = 0
    free_pair_rows = None

    for it in range(1, cfg.max_iterations_ba + 1):
        J_pose = np.zeros((len(obs_kf), 2, 6))
        J_point = np.empty((len(obs_kf), 2, 3))
        for kf_id, sel in kf_groups:
            Jp, Jl = reprojection_jacobians(pcs[sel], k, poses[kf_id].rotation)
            if kf_id in kf_index:
                J_pose[sel] = Jp
            J_point[sel] = Jl

        sw = np.sqrt(w)[:, None, None]
        Jp_w = J_pose * sw
        Jl_w = J_point * sw
        r_w = res * np.sqrt(w)[:, None]

        Hll = np.zeros((n_pts, 3, 3))
        bl = np.zeros((n_pts, 3))
        np.add.at(Hll, li, np.einsum("nij,nik->njk", Jl_w, Jl_w))
        np.add.at(bl, li, -np.einsum("nij,ni->nj", Jl_w, r_w))

        free_mask = pi >= 0
        Hpp = np.zeros((n_free, 6, 6))
        bp = np.zeros((n_free, 6))
        if n_free:
            np.add.at(Hpp, pi[free_mask],
                      np.einsum("nij,nik->njk", Jp_w[free_mask], Jp_w[free_mask]))
            np.add.at(bp, pi[free_mask], -np.einsum("nij,ni->nj", Jp_w[free_mask], r_w[free_mask]))
        Hpl = np.einsum("nij,nik->njk", Jp_w, Jl_w)    # (N, 6, 3), zero rows for fixed

        stepped = False
        for _ in range(8):
            Hll_d = Hll.copy()
            diag_l = np.maximum(Hll[:, [0, 1, 2], [0, 1, 2]], 1e-12)
            Hll_d[:, [0, 1, 2], [0, 1, 2]] += lam * diag_l
            try:
                Hll_inv = np.linalg.inv(Hll_d)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue

            Y = np.einsum("nij,njk->nik", Hpl, Hll_inv[li])          # (N, 6, 3)
            if n_free:
                # damp the pose blocks before eliminating the point blocks
                Hpp_d = Hpp.copy()
                d6 = np.arange(6)
                Hpp_d[:, d6, d6] += lam * np.maximum(Hpp[:, d6, d6], 1e-12)
                S = np.zeros((n_free, n_free, 6, 6))
                idx = np.arange(n_free)
                S[idx, idx] = Hpp_d
                b_schur = bp.copy()

                if free_pair_rows is None:
                    free_pair_rows = _same_point_pairs(li)
                pk, pl = free_pair_rows
                # S -= Y_k Hpl_l^T for observation pairs sharing a point
                valid = (pi[pk] >= 0) & (pi[pl] >= 0)
                rows = pi[pk[valid]]
                cols = pi[pl[valid]]
                corr = np.einsum("mij,mkj->mik", Y[pk[valid]], Hpl[pl[valid]])
                np.add.at(S, (rows, cols), -corr)

                # b_schur -= Y_k * bl of the shared point
                yb = np.einsum("nij,nj->ni", Y, bl[li])
                np.add.at(b_schur, pi[free_mask], -yb[free_mask])

                S_flat = S.transpose(0, 2, 1, 3).reshape(n_free * 6, n_free * 6)
                try:
                    delta_p = np.linalg.solve(S_flat, b_schur.reshape(-1)).reshape(n_free, 6)
                except np.linalg.LinAlgError:
                    lam *= 10.0
                    continue
            else:
                delta_p = np.zeros((0, 6))

            # back-substitute point updates
            rhs = bl.copy()
            if n_free:
                dp_obs = np.zeros((len(obs_kf), 6))
                dp_obs[free_mask] = delta_p[pi[free_mask]]
                contrib_l = np.einsum("nij,ni->nj", Hpl, dp_obs)
                np.add.at(rhs, li, -contrib_l)
            delta_l = np.einsum("nij,nj->ni", Hll_inv, rhs)

            cand_poses = dict(poses)
            for kf_id, b_idx in kf_index.items():
                cand_poses[kf_id] = poses[kf_id].retract_left(delta_p[b_idx])
            cand_positions = positions + delta_l
            cand_res, cand_pcs = eval_all(cand_poses, cand_positions)
            cand_w, cand_cost = huber_weights(cand_res, cfg.huber_delta)
            if cand_cost <= cost:
                step_norm = float(np.sqrt((delta_p**2).sum() + (delta_l**2).sum()))
                rel_drop = (cost - cand_cost) / max(cost, 1e-30)
                poses, positions = cand_poses, cand_positions
                res, pcs, w, cost = cand_res, cand_pcs, cand_w, cand_cost
                lam = max(lam * 0.1, 1e-12)
                stepped = True
                if diag:
                    diag.record("ba", solve_id, it, cost, lam)
                if rel_drop < cfg.rel_cost_tol or step_norm < cfg.step_tol:
                    converged = True
                break
            lam *= 10.0
        if converged or not stepped:
            if not stepped:
                converged = True
            break

    # write back into the map (fixed keyframes untouched)
    for kf_id in free_ids:
        wmap.keyframes[kf_id].pose = poses[kf_id]
    for pid, i in pt_index.items():
        wmap.points[pid].position = positions[i]

    final_res, _ = eval_all(poses, positions)
    sq = (final_res * final_res).sum(axis=1)
    bad = sq > cfg.chi2_outlier
    outliers = sorted({(int(obs_kf[i]), int(obs_pt[i])) for i in np.nonzero(bad)[0]})
    return BAResult(converged, initial_cost, cost, outliers, it)


# ---------------------------------------------------------------------------
# Ellipsoid estimation under the Wasserstein cost
# ---------------------------------------------------------------------------

@dataclass
class EllipsoidResult:
    ellipsoid: Ellipsoid
    cost: float
    converged: bool
    iterations: int


_LOG_AXES_LIMIT = 12.0
_PENALTY = 1e4


def _batch_sqrtm_spd2(mats: np.ndarray) -> np.ndarray:
    """Closed-form square roots of a stack of 2x2 SPD matrices (no checks)."""
    det = mats[:, 0, 0] * mats[:, 1, 1] - mats[:, 0, 1] * mats[:, 1, 0]
    tr = mats[:, 0, 0] + mats[:, 1, 1]
    s = np.sqrt(np.maximum(det, 0.0))
    t = np.sqrt(np.maximum(tr + 2.0 * s, 1e-300))
    out = mats.copy()
    out[:, 0, 0] += s
    out[:, 1, 1] += s
    return out / t[:, None, None]


def _quadric_matrix(center: np.ndarray, log_axes: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    axes2 = np.exp(2.0 * np.clip(log_axes, -_LOG_AXES_LIMIT, _LOG_AXES_LIMIT))
    E = rotation @ np.diag(axes2) @ rotation.T
    Q = np.empty((4, 4))
    Q[:3, :3] = E - np.outer(center, center)
    Q[:3, 3] = -center
    Q[3, :3] = -center
    Q[3, 3] = -1.0
    return Q


def _ellipsoid_residuals(center: np.ndarray, log_axes: np.ndarray, rotation: np.ndarray,
                         P_stack: np.ndarray, depth_rows: np.ndarray,
                         obs_means: np.ndarray, obs_sqrts: np.ndarray, obs_traces: np.ndarray,
                         form: WassersteinForm) -> np.ndarray:
    """Residual matrix (F, dim) whose squared sum is J = sum_f W2^2.

    Projections failing (behind camera, degenerate conic) contribute large
    penalty rows. Fully vectorized across the observation stack.
    """
    Q = _quadric_matrix(center, log_axes, rotation)
    depth = depth_rows[:, :3] @ center + depth_rows[:, 3]
    C = np.einsum("fij,jk,flk->fil", P_stack, Q, P_stack)
    c22 = C[:, 2, 2]
    valid = (depth > 1e-9) & (c22 < -1e-12)
    c22_safe = np.where(valid, c22, -1.0)
    Cn = C / (-c22_safe)[:, None, None]
    mean = -Cn[:, :2, 2]
    cov = Cn[:, :2, :2] + np.einsum("fi,fj->fij", mean, mean)
    cov = 0.5 * (cov + cov.transpose(0, 2, 1))
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] * cov[:, 1, 0]
    valid &= (cov[:, 0, 0] > 0) & (cov[:, 1, 1] > 0) & (det > 0)
    cov[~valid] = np.eye(2)

    d_mean = mean - obs_means
    if form is WassersteinForm.FROBENIUS:
        d_cov = _batch_sqrtm_spd2(cov) - obs_sqrts
        res = np.concatenate([d_mean, d_cov.reshape(-1, 4)], axis=1)
    else:
        inner = np.einsum("fij,fjk,fkl->fil", obs_sqrts, cov, obs_sqrts)
        inner = 0.5 * (inner + inner.transpose(0, 2, 1))
        cross = _batch_sqrtm_spd2(inner)
        term = obs_traces + cov[:, 0, 0] + cov[:, 1, 1] \
            - 2.0 * (cross[:, 0, 0] + cross[:, 1, 1])
        res = np.concatenate([d_mean, np.sqrt(np.maximum(term, 0.0))[:, None]], axis=1)
    res[~valid] = _PENALTY
    return res


def estimate_ellipsoid(observations: list[tuple[Gaussian2D, Pose]], k: Intrinsics,
                       init: EllipsoidParams, cfg: SolverConfig,
                       form: WassersteinForm = WassersteinForm.FROBENIUS,
                       diag: Optional[DiagLog] = None) -> EllipsoidResult:
    """Fit an ellipsoid minimizing the summed squared Wasserstein distance
    between its projections and the observed Gaussians.

    LM over 9 parameters (center, log semi-axes, rotation) with central
    finite differences (relative step 1e-6). Requires >= 3 observations and
    at least one observation pair with >= 5 degrees of viewing-ray
    separation. After iteration 5 the per-observation residual norms are
    capped at their 95th percentile to blunt detection outliers.
    """
    if len(observations) < 3:
        raise TooFewViews(f"need >= 3 observations, got {len(observations)}")
    center0 = init.center
    rays = []
    for _, pose in observations:
        c = pose.camera_center()
        ray = center0 - c
        n = np.linalg.norm(ray)
        if n > 1e-12:
            rays.append(ray / n)
    max_angle = 0.0
    for i in range(len(rays)):
        for j in range(i + 1, len(rays)):
            cosang = np.clip(rays[i] @ rays[j], -1.0, 1.0)
            max_angle = max(max_angle, float(np.arccos(cosang)))
    if max_angle < np.deg2rad(5.0):
        raise DegenerateBaseline(f"max viewing-ray angle {np.rad2deg(max_angle):.2f} deg")

    # observation stacks: projection matrices are pose-only, build them once
    P_stack = np.empty((len(observations), 3, 4))
    depth_rows = np.empty((len(observations), 4))
    obs_means = np.empty((len(observations), 2))
    obs_sqrts = np.empty((len(observations), 2, 2))
    obs_traces = np.empty(len(observations))
    for i, (g, pose) in enumerate(observations):
        Rt = pose.matrix()[:3, :]
        P_stack[i] = k.K @ Rt
        depth_rows[i] = Rt[2]
        obs_means[i] = g.mean
        obs_sqrts[i] = sqrtm_spd2(g.covariance)
        obs_traces[i] = np.trace(g.covariance)

    center = init.center.astype(float).copy()
    log_axes = init.log_axes.astype(float).copy()
    rotation = so3_exp(init.rotation)
    dim_r = 6 if form is WassersteinForm.FROBENIUS else 3
    n_obs = len(observations)
    solve_id = diag.next_solve() if diag else 0

    def residual_at(x):
        # x = [d_center(3), log_axes(3), d_rot(3)] around the current base
        c = center + x[:3]
        la = log_axes + x[3:6]
        R = rotation @ so3_exp(x[6:9])
        return _ellipsoid_residuals(c, la, R, P_stack, depth_rows,
                                    obs_means, obs_sqrts, obs_traces, form).reshape(-1)

    def cap_weights(r_vec):
        # per-observation scales capping residual norms at the 95th percentile
        norms = np.linalg.norm(r_vec.reshape(n_obs, dim_r), axis=1)
        cap = np.percentile(norms, 95.0)
        scale = np.ones(n_obs)
        heavy = norms > max(cap, 1e-12)
        scale[heavy] = cap / norms[heavy]
        return np.repeat(scale, dim_r)

    r = residual_at(np.zeros(9))
    cost = float(r @ r)
    lam = cfg.initial_damping
    converged = False
    it = 0
    for it in range(1, cfg.max_iterations_ellipsoid + 1):
        # weights frozen for the whole iteration (cap active after iteration 5)
        w = cap_weights(r) if it > 5 else None

        def capped(r_vec):
            return r_vec if w is None else r_vec * w

        base = np.concatenate([center, log_axes, np.zeros(3)])
        J = np.empty((len(r), 9))
        for p_idx in range(9):
            h = 1e-6 * max(1.0, abs(base[p_idx]))
            step = np.zeros(9)
            step[p_idx] = h
            J[:, p_idx] = (capped(residual_at(step)) - capped(residual_at(-step))) / (2.0 * h)
        r_eff = capped(r)
        cost_eff = float(r_eff @ r_eff)
        H = J.T @ J
        g = J.T @ r_eff
        stepped = False
        for _ in range(8):
            Hd = H + lam * np.diag(np.maximum(np.diag(H), 1e-12))
            try:
                delta = np.linalg.solve(Hd, -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            cand_r = residual_at(delta)
            cand_eff = capped(cand_r)
            cand_cost_eff = float(cand_eff @ cand_eff)
            if np.isfinite(cand_cost_eff) and cand_cost_eff <= cost_eff:
                center = center + delta[:3]
                log_axes = np.clip(log_axes + delta[3:6], -_LOG_AXES_LIMIT, _LOG_AXES_LIMIT)
                rotation = rotation @ so3_exp(delta[6:9])
                r = cand_r
                cost = float(r @ r)
                lam = max(lam * 0.1, 1e-12)
                stepped = True
                if diag:
                    diag.record("ellipsoid", solve_id, it, cost, lam)
                rel_drop = (cost_eff - cand_cost_eff) / max(cost_eff, 1e-30)
                if rel_drop < cfg.rel_cost_tol or np.linalg.norm(delta) < cfg.step_tol:
                    converged = True
                break
            lam *= 10.0
        if converged or not stepped:
            if not stepped:
                converged = True
            break

    ell = Ellipsoid(center, np.exp(np.clip(log_axes, -_LOG_AXES_LIMIT, _LOG_AXES_LIMIT)), rotation)
    return EllipsoidResult(ell, cost, converged, it)


def initialize_ellipsoid(ellipse_center: np.ndarray, mean_semi_axis: float,
                         depth_hint: float, pose: Pose, k: Intrinsics) -> EllipsoidParams:
    """Seed ellipsoid: back-projected ellipse center at the depth hint, with
    isotropic semi-axes depth * mean(axes) / f and identity rotation."""
    u, v = ellipse_center
    pc = np.array([(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0]) * float(depth_hint)
    center = pose.inverse().transform(pc)
    f = 0.5 * (k.fx + k.fy)
    radius = max(float(depth_hint) * float(mean_semi_axis) / f, 1e-4)
    return EllipsoidParams(center, np.log(np.full(3, radius)), np.zeros(3))


def numeric_jacobian_check(residual_fn: Callable[[np.ndarray], np.ndarray],
                           analytic_jacobian: np.ndarray, x0: np.ndarray,
                           rel_step: float = 1e-6) -> float:
    """Max relative deviation between an analytic Jacobian and central
    finite differences of ``residual_fn`` around ``x0``."""
    x0 = np.asarray(x0, dtype=float)
    r0 = residual_fn(x0)
    J_fd = np.empty((len(r0), len(x0)))
    for i in range(len(x0)):
        h = rel_step * max(1.0, abs(x0[i]))
        xp = x0.copy()
        xm = x0.copy()
        xp[i] += h
        xm[i] -= h
        J_fd[:, i] = (residual_fn(xp) - residual_fn(xm)) / (2.0 * h)
    scale = np.maximum(np.abs(J_fd), np.abs(analytic_jacobian))
    scale = np.maximum(scale, 1e-6 * max(1.0, scale.max()))
    return float((np.abs(analytic_jacobian - J_fd) / scale).max())
