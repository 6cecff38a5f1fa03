"""Hierarchical data association.

Frame detections are matched to 3D object landmarks with one of four
strategies (DA1-DA4), and object matches are then used to match frame
keypoints against each object's map points by binary-descriptor distance.
All functions operate on snapshots of map state and never mutate it.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import (
    Ellipse2D,
    Intrinsics,
    Pose,
    bbox_iou,
    ellipse_bbox,
    ellipse_to_gaussian,
    gaussian_to_ellipse,
    project_ellipsoid_gaussian,
    project_points,
)
from .metrics import MetricConfig, normalized_wasserstein
from .errors import ObjvoError

if TYPE_CHECKING:
    from .map import Map, ObjectLandmark

_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint16)


def hamming_distance(a: np.ndarray, b: np.ndarray) -> int:
    """Hamming distance between two packed 256-bit descriptors (32 uint8)."""
    return int(_POPCOUNT[np.bitwise_xor(a, b)].sum())


def hamming_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All-pairs Hamming distances: (Na, 32) x (Nb, 32) -> (Na, Nb) uint16."""
    x = np.bitwise_xor(a[:, None, :], b[None, :, :])
    return _POPCOUNT[x].sum(axis=2)


class DAMethod(Enum):
    DA1 = 1  # bbox IoU, same category only
    DA2 = 2  # bbox IoU, any category
    DA3 = 3  # bbox IoU, lower threshold when labels agree
    DA4 = 4  # normalized Wasserstein


@dataclass
class Detection:
    """One instance-segmentation observation in a frame."""

    category: int
    confidence: float
    contour: np.ndarray                 # (M, 2) pixels
    ellipse: Optional[Ellipse2D]        # fitted observation ellipse
    keypoint_indices: np.ndarray        # frame keypoints inside the instance


@dataclass(frozen=True)
class AssociationConfig:
    method: DAMethod = DAMethod.DA4
    iou_threshold: float = 0.3
    iou_threshold_same_label: float = 0.1   # DA3 only
    nw_threshold: float = 0.005
    metric: MetricConfig = field(default_factory=MetricConfig)
    # detections touching the border with more than this contour fraction are
    # excluded from object association (still usable for point matching)
    border_fraction: float = 0.2
    border_margin: float = 1.0
    hamming_threshold: int = 50
    ratio: float = 0.8
    search_radius: float = 8.0

    def __post_init__(self):
        for v in (self.iou_threshold, self.iou_threshold_same_label, self.nw_threshold):
            if not (0.0 < v < 1.0):
                raise ValueError("association thresholds must lie in (0, 1)")


@dataclass(frozen=True)
class ObjectMatch:
    detection_index: int
    object_id: int
    score: float


@dataclass(frozen=True)
class PointMatch:
    keypoint_index: int
    map_point_id: int
    descriptor_distance: int


@dataclass
class AssociationResult:
    matches: list[ObjectMatch]
    unmatched_detections: list[int]


def detection_touches_border(det: Detection, k: Intrinsics, cfg: AssociationConfig) -> bool:
    """True when too many contour points lie on or outside the image border."""
    c = det.contour
    if len(c) == 0:
        return True
    m = cfg.border_margin
    outside = ((c[:, 0] <= m) | (c[:, 0] >= k.width - 1 - m)
               | (c[:, 1] <= m) | (c[:, 1] >= k.height - 1 - m))
    return float(np.mean(outside)) > cfg.border_fraction


def greedy_mutual_best(scores: np.ndarray, threshold: float) -> list[tuple[int, int]]:
    """Greedy one-to-one assignment by descending score.

    Popping the globally best remaining pair is exactly iterated mutual-best
    acceptance. Pairs below the threshold never match. Ties break on the
    lower row then column index for determinism.
    """
    r, c = np.nonzero(scores >= threshold)
    order = sorted(range(len(r)), key=lambda i: (-scores[r[i], c[i]], r[i], c[i]))
    used_r: set[int] = set()
    used_c: set[int] = set()
    out = []
    for i in order:
        if r[i] in used_r or c[i] in used_c:
            continue
        used_r.add(int(r[i]))
        used_c.add(int(c[i]))
        out.append((int(r[i]), int(c[i])))
    return out


def assignment_oracle(scores: np.ndarray, threshold: float = 0.0) -> tuple[list[tuple[int, int]], float]:
    """Optimal one-to-one assignment maximizing total score above threshold.

    Exhaustive over the smaller dimension when it has <= 8 entries, otherwise
    Hungarian. Test oracle for bounding greedy-assignment regret.
    """
    s = np.asarray(scores, dtype=float)
    gated = np.where(s >= threshold, s, 0.0)
    transposed = gated.shape[0] > gated.shape[1]
    if transposed:
        gated = gated.T
    n_r, n_c = gated.shape
    if n_r <= 8:
        best_total, best_cols = 0.0, ()
        for cols in itertools.permutations(range(n_c), n_r):
            total = float(gated[np.arange(n_r), cols].sum())
            if total > best_total:
                best_total, best_cols = total, cols
        pairs = [(i, int(c)) for i, c in enumerate(best_cols) if gated[i, c] > 0]
    else:
        rows, cols = linear_sum_assignment(-gated)
        pairs = [(int(i), int(j)) for i, j in zip(rows, cols) if gated[i, j] > 0]
    if transposed:
        pairs = [(j, i) for i, j in pairs]
    total = float(sum(s[i, j] for i, j in pairs))
    return pairs, total


def associate_objects(detections: list[Detection], objects: list["ObjectLandmark"],
                      pose: Pose, k: Intrinsics, cfg: AssociationConfig) -> AssociationResult:
    """One-to-one matching of frame detections to object landmarks.

    Scores per method: DA1/DA2 bbox IoU (DA1 gated to equal categories),
    DA3 bbox IoU with the lower threshold when labels agree, DA4 normalized
    Wasserstein. Objects that fail projection are skipped. Unmatched
    detections are returned as candidates for new landmarks.
    """
    usable = [i for i, d in enumerate(detections)
              if d.ellipse is not None and not detection_touches_border(d, k, cfg)]
    if not usable or not objects:
        return AssociationResult([], usable)

    projections: list[tuple[int, object]] = []   # (object list index, Gaussian2D)
    for j, obj in enumerate(objects):
        try:
            g = project_ellipsoid_gaussian(obj.ellipsoid, pose, k)
        except ObjvoError:
            continue
        projections.append((j, g))
    if not projections:
        return AssociationResult([], usable)

    det_gaussians = {i: ellipse_to_gaussian(detections[i].ellipse) for i in usable}
    use_iou = cfg.method in (DAMethod.DA1, DAMethod.DA2, DAMethod.DA3)
    if use_iou:
        det_boxes = {i: ellipse_bbox(detections[i].ellipse) for i in usable}
        proj_boxes = [ellipse_bbox(gaussian_to_ellipse(g)) for _, g in projections]

    scores = np.zeros((len(usable), len(projections)))
    thresholds = np.full_like(scores, cfg.iou_threshold if use_iou else cfg.nw_threshold)
    for a, i in enumerate(usable):
        det = detections[i]
        for b, (j, g) in enumerate(projections):
            same_label = det.category == objects[j].category
            if cfg.method is DAMethod.DA1 and not same_label:
                scores[a, b] = -1.0
                continue
            if use_iou:
                scores[a, b] = bbox_iou(det_boxes[i], proj_boxes[b])
                if cfg.method is DAMethod.DA3 and same_label:
                    thresholds[a, b] = cfg.iou_threshold_same_label
            else:
                scores[a, b] = normalized_wasserstein(det_gaussians[i], g, cfg.metric)

    # fold per-pair thresholds into the matrix so the greedy pass sees one gate
    gated = np.where(scores >= thresholds, scores, -1.0)
    pairs = greedy_mutual_best(gated, 0.0)
    matches = [ObjectMatch(usable[a], objects[projections[b][0]].id, float(scores[a, b]))
               for a, b in pairs]
    matched_dets = {m.detection_index for m in matches}
    unmatched = [i for i in usable if i not in matched_dets]
    return AssociationResult(matches, unmatched)


def _ratio_ok(best: int, second: Optional[int], ratio: float) -> bool:
    return second is None or best < ratio * second


def match_descriptors_one_to_one(query_desc: np.ndarray, query_ids: np.ndarray,
                                 kp_desc: np.ndarray, kp_ids: np.ndarray,
                                 cfg: AssociationConfig) -> list[PointMatch]:
    """Per-query best keypoint under threshold + ratio test, one-to-one.

    ``query_ids`` are map point ids, ``kp_ids`` frame keypoint indices.
    Conflicts on a keypoint are resolved by ascending distance.
    """
    if len(query_ids) == 0 or len(kp_ids) == 0:
        return []
    dist = hamming_matrix(query_desc, kp_desc)
    candidates = []
    for qi in range(dist.shape[0]):
        row = dist[qi]
        order = np.argsort(row, kind="stable")
        best = int(row[order[0]])
        second = int(row[order[1]]) if len(order) > 1 else None
        if best > cfg.hamming_threshold or not _ratio_ok(best, second, cfg.ratio):
            continue
        candidates.append((best, int(query_ids[qi]), int(kp_ids[order[0]])))
    candidates.sort(key=lambda t: (t[0], t[1], t[2]))
    used_kp: set[int] = set()
    used_mp: set[int] = set()
    out = []
    for d, mp_id, kp_idx in candidates:
        if kp_idx in used_kp or mp_id in used_mp:
            continue
        used_kp.add(kp_idx)
        used_mp.add(mp_id)
        out.append(PointMatch(kp_idx, mp_id, d))
    return out


def associate_map_points_via_objects(frame, matches: list[ObjectMatch], wmap: "Map",
                                     pose: Pose, cfg: AssociationConfig) -> list[PointMatch]:
    """Match each matched object's map points to keypoints inside its detection.

    Comparison is brute-force Hamming within the instance region, so it
    tolerates arbitrary projection offsets. Keypoints already claimed by the
    frame and map points behind the camera are skipped; a keypoint receives
    at most one match overall.
    """
    out: list[PointMatch] = []
    claimed_kps = set(frame.matches.keys())
    claimed_mps = set(frame.matches.values())
    for m in matches:
        obj = wmap.objects.get(m.object_id)
        if obj is None or not obj.map_point_ids:
            continue
        det = frame.detections[m.detection_index]
        kp_idx = np.array([i for i in det.keypoint_indices if i not in claimed_kps], dtype=int)
        if len(kp_idx) == 0:
            continue
        mp_ids, mp_desc, mp_pos = [], [], []
        for pid in sorted(obj.map_point_ids):
            if pid in claimed_mps or pid not in wmap.points:
                continue
            p = wmap.points[pid]
            mp_ids.append(pid)
            mp_desc.append(p.descriptor)
            mp_pos.append(p.position)
        if not mp_ids:
            continue
        depth = pose.transform(np.asarray(mp_pos))[:, 2]
        front = depth > 0
        if not np.any(front):
            continue
        mp_ids = np.asarray(mp_ids)[front]
        mp_desc = np.asarray(mp_desc)[front]
        found = match_descriptors_one_to_one(mp_desc, mp_ids,
                                             frame.descriptors[kp_idx], kp_idx, cfg)
        for pm in found:
            claimed_kps.add(pm.keypoint_index)
            claimed_mps.add(pm.map_point_id)
        out.extend(found)
    return out


def match_by_projection(frame, point_ids: list[int], positions: np.ndarray,
                        descriptors: np.ndarray, pose: Pose, k: Intrinsics,
                        cfg: AssociationConfig, radius: float) -> list[PointMatch]:
    """Project points and descriptor-match keypoints within ``radius`` pixels.

    Returns matches for keypoints and map points not already claimed by the
    frame. Shared by the local-map refinement search and the mapping-side
    fuse step (which passes a wider radius).
    """
    if len(point_ids) == 0 or len(frame.pixels) == 0:
        return []
    claimed_kps = set(frame.matches.keys())
    claimed_mps = set(frame.matches.values())
    keep = [i for i, pid in enumerate(point_ids) if pid not in claimed_mps]
    if not keep:
        return []
    ids = np.asarray(point_ids)[keep]
    px, valid = project_points(positions[keep], pose, k)
    margin = radius + 1.0
    inside = (valid & (px[:, 0] >= -margin) & (px[:, 0] <= k.width + margin)
              & (px[:, 1] >= -margin) & (px[:, 1] <= k.height + margin))
    if not np.any(inside):
        return []
    ids, px = ids[inside], px[inside]
    desc = descriptors[keep][inside]

    free_kps = np.array([i for i in range(len(frame.pixels)) if i not in claimed_kps], dtype=int)
    if len(free_kps) == 0:
        return []
    d2 = ((px[:, None, :] - frame.pixels[free_kps][None, :, :]) ** 2).sum(axis=2)
    near = d2 <= radius * radius

    candidates = []
    for qi in range(len(ids)):
        cols = np.nonzero(near[qi])[0]
        if len(cols) == 0:
            continue
        dist = hamming_matrix(desc[qi:qi + 1], frame.descriptors[free_kps[cols]])[0]
        order = np.argsort(dist, kind="stable")
        best = int(dist[order[0]])
        second = int(dist[order[1]]) if len(order) > 1 else None
        if best > cfg.hamming_threshold or not _ratio_ok(best, second, cfg.ratio):
            continue
        candidates.append((best, int(ids[qi]), int(free_kps[cols[order[0]]])))
    candidates.sort(key=lambda t: (t[0], t[1], t[2]))
    used_kp: set[int] = set()
    used_mp: set[int] = set()
    out = []
    for d, mp_id, kp_idx in candidates:
        if kp_idx in used_kp or mp_id in used_mp:
            continue
        used_kp.add(kp_idx)
        used_mp.add(mp_id)
        out.append(PointMatch(kp_idx, mp_id, d))
    return out


def match_local_map(frame, local_map_points: list, pose: Pose, k: Intrinsics,
                    cfg: AssociationConfig) -> list[PointMatch]:
    """Projection search of local map points around the first-pass pose.

    ``local_map_points`` is a list of MapPoint; returns additional matches
    not already claimed by the frame.
    """
    if not local_map_points:
        return []
    ids = [p.id for p in local_map_points]
    pos = np.asarray([p.position for p in local_map_points])
    desc = np.asarray([p.descriptor for p in local_map_points])
    return match_by_projection(frame, ids, pos, desc, pose, k, cfg, cfg.search_radius)
