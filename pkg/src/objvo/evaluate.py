"""Trajectory and association evaluation.

ATE RMSE pairs poses by nearest timestamp (within 10 ms); an optional
closed-form rigid SE(3) alignment (least squares over the position sets)
is applied before the residual RMSE. Association reports reconstruct
landmark identities from run diagnostics by majority vote over matched
ground-truth ids, so the pipeline itself never sees ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import NoOverlap

PAIRING_WINDOW = 0.010  # seconds


def align_rigid(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rotation R and translation t with dst ~ R src + t."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    cov = (dst - mu_d).T @ (src - mu_s) / len(src)
    U, _, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U @ Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    t = mu_d - R @ mu_s
    return R, t


def pair_by_timestamp(ts_a: np.ndarray, ts_b: np.ndarray,
                      window: float = PAIRING_WINDOW) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-neighbor timestamp pairing within the window, injective on b."""
    ts_a = np.asarray(ts_a, dtype=float)
    ts_b = np.asarray(ts_b, dtype=float)
    order = np.argsort(ts_b, kind="stable")
    sorted_b = ts_b[order]
    idx = np.searchsorted(sorted_b, ts_a)
    best_j = np.empty(len(ts_a), dtype=int)
    best_dt = np.empty(len(ts_a))
    for i, pos in enumerate(idx):
        cands = []
        if pos > 0:
            cands.append(pos - 1)
        if pos < len(sorted_b):
            cands.append(pos)
        dts = [abs(ts_a[i] - sorted_b[c]) for c in cands]
        j = int(np.argmin(dts))
        best_j[i] = order[cands[j]]
        best_dt[i] = dts[j]
    keep = best_dt <= window
    # enforce injectivity: keep the closest a for each b
    chosen: dict[int, int] = {}
    for i in np.nonzero(keep)[0]:
        j = int(best_j[i])
        if j not in chosen or best_dt[i] < best_dt[chosen[j]]:
            chosen[j] = int(i)
    ia = np.array(sorted(chosen.values()), dtype=int)
    ib = np.array([best_j[i] for i in ia], dtype=int)
    return ia, ib


def ate_rmse(est_ts: np.ndarray, est_pos: np.ndarray,
             gt_ts: np.ndarray, gt_pos: np.ndarray, align: bool = True) -> float:
    """Absolute trajectory error RMSE over timestamp-paired positions."""
    ia, ib = pair_by_timestamp(est_ts, gt_ts)
    if len(ia) == 0:
        raise NoOverlap("no timestamp pairs within the window")
    e = np.asarray(est_pos, dtype=float)[ia]
    g = np.asarray(gt_pos, dtype=float)[ib]
    if align:
        R, t = align_rigid(e, g)
        e = e @ R.T + t
    d = e - g
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


# ---------------------------------------------------------------------------
# Association reports
# ---------------------------------------------------------------------------

@dataclass
class PRF:
    precision: float
    recall: float
    f1: float
    n_matches: int
    n_correct: int

    @staticmethod
    def from_counts(correct: int, matched: int, relevant: int) -> "PRF":
        p = correct / matched if matched else 0.0
        r = correct / relevant if relevant else 0.0
        f = 2 * p * r / (p + r) if (p + r) else 0.0
        return PRF(p, r, f, matched, correct)


@dataclass
class EvalReport:
    ate_rmse: Optional[float] = None
    object_assoc: Optional[PRF] = None
    point_assoc: Optional[PRF] = None
    final_object_count: Optional[int] = None
    gt_object_count: Optional[int] = None
    runtime_s: Optional[float] = None
    extras: dict = field(default_factory=dict)


def _majority(votes: dict[int, int]) -> int:
    if not votes:
        return -1
    return max(sorted(votes), key=lambda k: votes[k])


def association_report(diagnostics, frames) -> tuple[PRF, PRF]:
    """(object PRF, point PRF) from run diagnostics and dataset ground truth.

    Landmark identity is the majority ground-truth id over everything that
    matched it. Object recall counts all real detections; point recall counts
    keypoint observations of landmarks already seen in an earlier frame.
    """
    frame_by_id = {f.frame_id: f for f in frames}

    obj_votes: dict[int, dict[int, int]] = {}
    obj_pairs = []   # (gt detection id, matched object id)
    total_real_detections = 0
    for f in frames:
        for d in f.detections:
            if d.gt_object_id >= 0:
                total_real_detections += 1
    for diag in diagnostics:
        f = frame_by_id.get(diag.frame_id)
        if f is None:
            continue
        for det_idx, obj_id in diag.object_matches:
            if det_idx >= len(f.detections):
                continue
            gt = f.detections[det_idx].gt_object_id
            obj_pairs.append((gt, obj_id))
            obj_votes.setdefault(obj_id, {})
            if gt >= 0:
                obj_votes[obj_id][gt] = obj_votes[obj_id].get(gt, 0) + 1
    obj_identity = {oid: _majority(v) for oid, v in obj_votes.items()}
    obj_correct = sum(1 for gt, oid in obj_pairs if gt >= 0 and obj_identity.get(oid) == gt)
    obj_prf = PRF.from_counts(obj_correct, len(obj_pairs), total_real_detections)

    pt_votes: dict[int, dict[int, int]] = {}
    pt_pairs = []
    for diag in diagnostics:
        f = frame_by_id.get(diag.frame_id)
        if f is None:
            continue
        for kp_idx, mp_id in diag.point_matches:
            if kp_idx >= len(f.gt_ids):
                continue
            gt = int(f.gt_ids[kp_idx])
            pt_pairs.append((gt, mp_id))
            pt_votes.setdefault(mp_id, {})
            if gt >= 0:
                pt_votes[mp_id][gt] = pt_votes[mp_id].get(gt, 0) + 1
    pt_identity = {pid: _majority(v) for pid, v in pt_votes.items()}
    pt_correct = sum(1 for gt, pid in pt_pairs if gt >= 0 and pt_identity.get(pid) == gt)

    seen: set[int] = set()
    reobservations = 0
    for f in frames:
        ids = [int(i) for i in f.gt_ids if i >= 0]
        reobservations += sum(1 for i in ids if i in seen)
        seen.update(ids)
    pt_prf = PRF.from_counts(pt_correct, len(pt_pairs), reobservations)
    return obj_prf, pt_prf


def object_count_report(final_map, scene_info: dict) -> tuple[int, int]:
    """(reconstructed object count, ground-truth object count)."""
    gt = len(scene_info.get("objects", [])) if scene_info else 0
    return len(final_map.objects), gt
