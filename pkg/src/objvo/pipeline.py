"""Coarse-to-fine visual object odometry and mapping.

Per frame: predict a pose with a constant-velocity motion model, fit
observation ellipses, associate detections to object landmarks, use the
matched objects to match keypoints against their map points (coarse, region
based, drift tolerant), refine the pose, widen to the local map for a second
refinement (fine, window based), then decide on keyframe promotion. Mapping
inserts the keyframe, spawns points, fuses the keyframe against the local map
retrieved through the object covisibility graph, runs local BA (objects
excluded), and re-optimizes each observed object from its keyframe poses.

Ablations:
    full    objects everywhere (default)
    odom    objects only in odometry; mapping uses point covisibility only
    map     objects only in mapping; odometry never associates objects
    alt     alternate association + observation model (DA1 + bbox ellipse)
    points  no object modules at all (points-only baseline)
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np

from .association import (
    AssociationConfig,
    DAMethod,
    Detection,
    ObjectMatch,
    associate_map_points_via_objects,
    associate_objects,
    match_by_projection,
    match_local_map,
)
from .errors import DegenerateBaseline, ObjvoError, TooFewMatches, TooFewViews
from .geometry import (
    BBox,
    Ellipse2D,
    Gaussian2D,
    Intrinsics,
    Pose,
    back_project,
    ellipse_to_gaussian,
    fit_ellipse,
    orthonormalize,
)
from .map import KeyFrame, Map, ObjectObservation
from .metrics import WassersteinForm
from .optimize import (
    DiagLog,
    EllipsoidParams,
    SolverConfig,
    estimate_ellipsoid,
    initialize_ellipsoid,
    local_bundle_adjustment,
    optimize_pose,
)


class Ablation(Enum):
    FULL = "full"
    OBJECTS_ODOMETRY_ONLY = "odom"
    OBJECTS_MAPPING_ONLY = "map"
    ALTERNATE_DA_MODEL = "alt"
    POINTS_ONLY = "points"


class ObservationModel(Enum):
    CONTOUR_FIT = "contour"      # direct least-squares fit of the mask contour
    BBOX_ELLIPSE = "bbox"        # axis-aligned ellipse inscribed in the bbox


@dataclass(frozen=True)
class PipelineConfig:
    ablation: Ablation = Ablation.FULL
    association: AssociationConfig = field(default_factory=AssociationConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    observation_model: ObservationModel = ObservationModel.CONTOUR_FIT
    detection_confidence_min: float = 0.2
    # keyframe policy: spawn when tracked < ratio * reference or the gap is
    # large, never more often than the minimum gap
    keyframe_ratio: float = 0.9
    keyframe_max_gap: int = 20
    keyframe_min_gap: int = 3
    # object landmark spawn hysteresis
    n_init_object: int = 3
    candidate_horizon: int = 30
    # matching radii (px)
    window_radius: float = 15.0
    fuse_radius: float = 16.0
    min_stage1_matches: int = 30
    max_stage2_keyframes: int = 20
    lost_floor: int = 8
    max_point_neighbors: int = 10
    deterministic: bool = True
    enable_culling: bool = False

    def effective_association(self) -> AssociationConfig:
        if self.ablation is Ablation.ALTERNATE_DA_MODEL:
            return replace(self.association, method=DAMethod.DA1)
        return self.association

    def effective_observation_model(self) -> ObservationModel:
        if self.ablation is Ablation.ALTERNATE_DA_MODEL:
            return ObservationModel.BBOX_ELLIPSE
        return self.observation_model

    @property
    def objects_in_odometry(self) -> bool:
        return self.ablation in (Ablation.FULL, Ablation.OBJECTS_ODOMETRY_ONLY,
                                 Ablation.ALTERNATE_DA_MODEL)

    @property
    def objects_in_mapping(self) -> bool:
        return self.ablation in (Ablation.FULL, Ablation.OBJECTS_MAPPING_ONLY,
                                 Ablation.ALTERNATE_DA_MODEL)

    @property
    def objects_enabled(self) -> bool:
        return self.ablation is not Ablation.POINTS_ONLY


@dataclass
class Frame:
    id: int
    timestamp: float
    pixels: np.ndarray
    depths: np.ndarray
    descriptors: np.ndarray
    detections: list[Detection]
    predicted_pose: Optional[Pose] = None
    stage1_pose: Optional[Pose] = None
    refined_pose: Optional[Pose] = None
    matches: dict[int, int] = field(default_factory=dict)   # keypoint -> map point id


@dataclass
class FrameDiagnostics:
    frame_id: int
    timestamp: float
    state: str
    n_object_matches: int = 0
    n_stage1_matches: int = 0
    n_stage2_matches: int = 0
    n_inliers: int = 0
    keyframe: bool = False
    object_matches: list[tuple[int, int]] = field(default_factory=list)
    point_matches: list[tuple[int, int]] = field(default_factory=list)
    predicted_pose: Optional[Pose] = None
    stage1_pose: Optional[Pose] = None
    refined_pose: Optional[Pose] = None


@dataclass
class RunResult:
    timestamps: np.ndarray
    poses_cw: list[Pose]
    map: Map
    diagnostics: list[FrameDiagnostics]
    lost_at: Optional[int]
    runtime_s: float
    audit: dict[str, int]

    @property
    def positions(self) -> np.ndarray:
        return np.asarray([p.camera_center() for p in self.poses_cw])


@dataclass(eq=False)
class _ObjectCandidate:
    centers: list[np.ndarray]
    radii: list[float]
    categories: list[int]
    frame_ids: list[int]
    last_gaussian: Gaussian2D

    @property
    def mean_center(self) -> np.ndarray:
        return np.mean(np.asarray(self.centers), axis=0)


class Pipeline:
    """Single-threaded, deterministic odometry + mapping over one sequence."""

    def __init__(self, cfg: PipelineConfig, intrinsics: Intrinsics,
                 diag_log: Optional[DiagLog] = None):
        self.cfg = cfg
        self.k = intrinsics
        self.map = Map(intrinsics)
        self.diag_log = diag_log
        self.pose_history: list[Pose] = []
        self.last_keyframe_id: Optional[int] = None
        self.frames_since_keyframe = 0
        self.ref_tracked = 0
        self.candidates: list[_ObjectCandidate] = []
        # local map published by the last mapping step; odometry's window
        # search consumes it, so object-graph retrievals reach tracking
        self.active_local_point_ids: list[int] = []
        self.lost = False
        self.audit = {
            "associate_objects_odometry": 0,
            "associate_objects_mapping": 0,
            "object_graph_queries": 0,
        }

    # -- frontend -----------------------------------------------------------

    def prepare_detections(self, frame: Frame) -> None:
        """Fit observation ellipses per the configured observation model."""
        model = self.cfg.effective_observation_model()
        for det in frame.detections:
            det.ellipse = None
            if det.confidence < self.cfg.detection_confidence_min:
                continue
            if det.contour is None or len(det.contour) < 5:
                continue
            try:
                if model is ObservationModel.CONTOUR_FIT:
                    det.ellipse = fit_ellipse(det.contour)
                else:
                    lo = det.contour.min(axis=0)
                    hi = det.contour.max(axis=0)
                    half = np.maximum(0.5 * (hi - lo), 1e-6)
                    det.ellipse = Ellipse2D(0.5 * (lo + hi), half, 0.0)
            except ObjvoError:
                det.ellipse = None

    def predict_pose(self) -> Pose:
        """Constant-velocity prediction; identity motion for the second frame."""
        if not self.pose_history:
            return Pose.identity()
        if len(self.pose_history) == 1:
            return self.pose_history[-1]
        t_prev, t_last = self.pose_history[-2], self.pose_history[-1]
        motion = t_last.compose(t_prev.inverse())
        pred = motion.compose(t_last)
        return Pose(orthonormalize(pred.rotation), pred.translation)

    # -- odometry helpers ----------------------------------------------------

    def _live_objects(self) -> list:
        return [self.map.objects[i] for i in sorted(self.map.objects)]

    def _apply_matches(self, frame: Frame, matches) -> int:
        added = 0
        for m in matches:
            if m.keypoint_index in frame.matches or m.map_point_id in frame.matches.values():
                continue
            frame.matches[m.keypoint_index] = m.map_point_id
            added += 1
        return added

    def _window_search(self, frame: Frame, pose: Pose, radius: float) -> int:
        """Projection search against the reference keyframe's neighborhood and
        the local map published by the last mapping step."""
        if self.last_keyframe_id is None:
            return 0
        kf_ids = [self.last_keyframe_id]
        kf_ids += self.map.point_covisibility_neighbors(self.last_keyframe_id)[:5]
        pid_set: set[int] = set()
        for kid in kf_ids:
            pid_set.update(self.map.keyframes[kid].matched_points.values())
        pid_set.update(p for p in self.active_local_point_ids if p in self.map.points)
        pids = sorted(pid_set)
        if not pids:
            return 0
        pos = np.asarray([self.map.points[p].position for p in pids])
        desc = np.asarray([self.map.points[p].descriptor for p in pids])
        found = match_by_projection(frame, pids, pos, desc, pose, self.k,
                                    self.cfg.effective_association(), radius)
        return self._apply_matches(frame, found)

    def _stage2_local_points(self, frame: Frame) -> list:
        """Map points of keyframes that observe the currently matched points."""
        counts: dict[int, int] = {}
        for pid in frame.matches.values():
            point = self.map.points.get(pid)
            if point is None:
                continue
            for kf_id in point.observations:
                counts[kf_id] = counts.get(kf_id, 0) + 1
        ranked = sorted(counts, key=lambda kid: (-counts[kid], -kid))
        ranked = ranked[: self.cfg.max_stage2_keyframes]
        pid_set: set[int] = set()
        for kid in ranked:
            pid_set.update(self.map.keyframes[kid].matched_points.values())
        pid_set -= set(frame.matches.values())
        return [self.map.points[p] for p in sorted(pid_set)]

    def _drop_outlier_matches(self, frame: Frame, kp_order: list[int], mask: np.ndarray) -> None:
        for kp_idx, ok in zip(kp_order, mask):
            if not ok:
                frame.matches.pop(kp_idx, None)

    def _optimize_frame_pose(self, frame: Frame, init: Pose):
        kp_order = sorted(frame.matches)
        px = frame.pixels[kp_order]
        pts = np.asarray([self.map.points[frame.matches[i]].position for i in kp_order])
        result = optimize_pose(px, pts, init, self.k, self.cfg.solver, diag=self.diag_log)
        self._drop_outlier_matches(frame, kp_order, result.inlier_mask)
        return result

    # -- object candidates and spawning ---------------------------------------

    def _detection_depth_hint(self, frame: Frame, det: Detection) -> Optional[float]:
        depths = [frame.depths[i] for i in det.keypoint_indices
                  if 0 <= i < len(frame.depths) and frame.depths[i] > 0]
        if not depths:
            return None
        return float(np.median(depths))

    def _update_candidates(self, frame: Frame, unmatched: list[int], pose: Pose) -> None:
        cfg = self.cfg
        f = 0.5 * (self.k.fx + self.k.fy)
        for det_idx in unmatched:
            det = frame.detections[det_idx]
            if det.ellipse is None:
                continue
            depth = self._detection_depth_hint(frame, det)
            if depth is None:
                continue
            center = back_project(det.ellipse.center, depth, pose, self.k)
            radius = max(depth * float(det.ellipse.semi_axes.mean()) / f, 1e-3)
            gaussian = ellipse_to_gaussian(det.ellipse)
            best = None
            best_d = np.inf
            for cand in self.candidates:
                d = float(np.linalg.norm(cand.mean_center - center))
                tol = 2.0 * max(radius, max(cand.radii)) + 0.05 * depth
                if d <= tol and d < best_d:
                    best, best_d = cand, d
            if best is None:
                self.candidates.append(_ObjectCandidate([center], [radius], [det.category],
                                                        [frame.id], gaussian))
            else:
                if best.frame_ids[-1] != frame.id:
                    best.centers.append(center)
                    best.radii.append(radius)
                    best.categories.append(det.category)
                    best.frame_ids.append(frame.id)
                    best.last_gaussian = gaussian

        spawned = []
        for cand in self.candidates:
            if len(set(cand.frame_ids)) >= cfg.n_init_object:
                votes: dict[int, int] = {}
                for c in cand.categories:
                    votes[c] = votes.get(c, 0) + 1
                category = max(sorted(votes), key=lambda c: votes[c])
                center = cand.mean_center
                radius = float(np.mean(cand.radii))
                params = EllipsoidParams(center, np.log(np.full(3, max(radius, 1e-3))))
                self.map.add_object(params.to_ellipsoid(), category)
                spawned.append(cand)
        self.candidates = [c for c in self.candidates
                           if c not in spawned
                           and frame.id - c.frame_ids[-1] <= cfg.candidate_horizon]

    # -- per-frame odometry ----------------------------------------------------

    def bootstrap(self, frame: Frame) -> FrameDiagnostics:
        frame.predicted_pose = Pose.identity()
        frame.stage1_pose = Pose.identity()
        frame.refined_pose = Pose.identity()
        self.prepare_detections(frame)
        kf = self._build_keyframe(frame)
        self.map.insert_keyframe(kf)
        for kp_idx in range(len(frame.pixels)):
            depth = frame.depths[kp_idx]
            if depth <= 0:
                continue
            pos = back_project(frame.pixels[kp_idx], depth, frame.refined_pose, self.k)
            point = self.map.new_point(pos, frame.descriptors[kp_idx])
            self.map.add_observation(kf.id, kp_idx, point.id)
        if self.cfg.objects_enabled:
            usable = [i for i, d in enumerate(frame.detections) if d.ellipse is not None]
            self._update_candidates(frame, usable, frame.refined_pose)
        self.last_keyframe_id = kf.id
        self.ref_tracked = len(kf.matched_points)
        self.frames_since_keyframe = 0
        self.pose_history.append(frame.refined_pose)
        return FrameDiagnostics(frame.id, frame.timestamp, "initialized",
                                n_inliers=len(kf.matched_points), keyframe=True,
                                predicted_pose=frame.predicted_pose,
                                stage1_pose=frame.stage1_pose,
                                refined_pose=frame.refined_pose)

    def process_frame(self, frame: Frame) -> FrameDiagnostics:
        if not self.map.keyframes:
            return self.bootstrap(frame)
        cfg = self.cfg
        diag = FrameDiagnostics(frame.id, frame.timestamp, "tracking")
        frame.predicted_pose = self.predict_pose()
        diag.predicted_pose = frame.predicted_pose
        self.prepare_detections(frame)

        object_matches: list[ObjectMatch] = []
        unmatched_dets: list[int] = []
        if cfg.objects_in_odometry and self.map.objects:
            self.audit["associate_objects_odometry"] += 1
            result = associate_objects(frame.detections, self._live_objects(),
                                       frame.predicted_pose, self.k,
                                       cfg.effective_association())
            object_matches = result.matches
            unmatched_dets = result.unmatched_detections
            found = associate_map_points_via_objects(frame, object_matches, self.map,
                                                     frame.predicted_pose,
                                                     cfg.effective_association())
            self._apply_matches(frame, found)
        elif cfg.objects_in_odometry:
            unmatched_dets = [i for i, d in enumerate(frame.detections) if d.ellipse is not None]
        diag.n_object_matches = len(object_matches)
        diag.object_matches = [(m.detection_index, m.object_id) for m in object_matches]

        if len(frame.matches) < cfg.min_stage1_matches:
            self._window_search(frame, frame.predicted_pose, cfg.window_radius)
        if len(frame.matches) < 6:
            self._window_search(frame, frame.predicted_pose, cfg.window_radius * 3)
        diag.n_stage1_matches = len(frame.matches)
        if len(frame.matches) < 6:
            return self._mark_lost(frame, diag)

        stage1 = self._optimize_frame_pose(frame, frame.predicted_pose)
        frame.stage1_pose = stage1.pose
        diag.stage1_pose = stage1.pose

        local_points = self._stage2_local_points(frame)
        extra = match_local_map(frame, local_points, stage1.pose, self.k,
                                cfg.effective_association())
        self._apply_matches(frame, extra)
        diag.n_stage2_matches = len(frame.matches)
        if len(frame.matches) < 6:
            return self._mark_lost(frame, diag)
        stage2 = self._optimize_frame_pose(frame, stage1.pose)
        frame.refined_pose = stage2.pose
        diag.refined_pose = stage2.pose
        diag.n_inliers = len(frame.matches)
        diag.point_matches = sorted(frame.matches.items())
        if diag.n_inliers < cfg.lost_floor:
            return self._mark_lost(frame, diag)

        # candidates accumulate per frame when odometry handles objects
        if cfg.objects_in_odometry and cfg.objects_enabled:
            self._update_candidates(frame, unmatched_dets, frame.refined_pose)

        self.pose_history.append(frame.refined_pose)
        self.frames_since_keyframe += 1
        if self.keyframe_decision(diag.n_inliers):
            diag.keyframe = True
            self.mapping_step(frame, object_matches)
        diag.state = "tracking"
        return diag

    def _mark_lost(self, frame: Frame, diag: FrameDiagnostics) -> FrameDiagnostics:
        self.lost = True
        frame.refined_pose = frame.predicted_pose
        diag.refined_pose = frame.predicted_pose
        diag.state = "lost"
        self.pose_history.append(frame.predicted_pose)
        return diag

    def keyframe_decision(self, tracked: int) -> bool:
        if self.frames_since_keyframe < self.cfg.keyframe_min_gap:
            return False
        if self.frames_since_keyframe >= self.cfg.keyframe_max_gap:
            return True
        return tracked < self.cfg.keyframe_ratio * self.ref_tracked

    # -- mapping -----------------------------------------------------------------

    def _build_keyframe(self, frame: Frame) -> KeyFrame:
        return KeyFrame(id=frame.id, timestamp=frame.timestamp, pose=frame.refined_pose,
                        pixels=frame.pixels, descriptors=frame.descriptors,
                        depths=frame.depths, detections=frame.detections,
                        matched_points=dict(sorted(frame.matches.items())))

    def _object_observations_for_kf(self, frame: Frame,
                                    object_matches: list[ObjectMatch]
                                    ) -> list[tuple[int, ObjectObservation]]:
        out = []
        for m in sorted(object_matches, key=lambda m: m.object_id):
            det = frame.detections[m.detection_index]
            if det.ellipse is None:
                continue
            obs = ObjectObservation(ellipse_to_gaussian(det.ellipse), det.category,
                                    np.asarray(det.keypoint_indices, dtype=int),
                                    m.detection_index)
            out.append((m.object_id, obs))
        return out

    def mapping_step(self, frame: Frame, object_matches: list[ObjectMatch]) -> None:
        cfg = self.cfg

        # in mapping-only mode objects are associated here, at the refined pose
        if cfg.objects_enabled and not cfg.objects_in_odometry:
            self.audit["associate_objects_mapping"] += 1
            result = associate_objects(frame.detections, self._live_objects(),
                                       frame.refined_pose, self.k,
                                       cfg.effective_association())
            object_matches = result.matches
            self._update_candidates(frame, result.unmatched_detections, frame.refined_pose)
        if cfg.objects_enabled and object_matches:
            # region-based re-match at the keyframe: unlike the odometry pass
            # this survives odometry's inlier gate, so cross-loop constraints
            # reach bundle adjustment even under large drift
            found = associate_map_points_via_objects(frame, object_matches, self.map,
                                                     frame.refined_pose,
                                                     cfg.effective_association())
            self._apply_matches(frame, found)

        kf = self._build_keyframe(frame)
        obj_obs = self._object_observations_for_kf(frame, object_matches) \
            if cfg.objects_enabled else []
        self.map.insert_keyframe(kf, obj_obs)
        self.last_keyframe_id = kf.id
        self.frames_since_keyframe = 0

        # ownership update for the objects this keyframe observed
        for obj_id in sorted(kf.observed_objects):
            self.map.update_object_points(obj_id)

        # spawn new map points from unmatched keypoints with depth
        for kp_idx in range(len(frame.pixels)):
            if kp_idx in kf.matched_points:
                continue
            depth = frame.depths[kp_idx]
            if depth <= 0:
                continue
            pos = back_project(frame.pixels[kp_idx], depth, kf.pose, self.k)
            point = self.map.new_point(pos, frame.descriptors[kp_idx])
            self.map.add_observation(kf.id, kp_idx, point.id)

        # local map via the object covisibility graph (point graph in odom mode)
        use_objects = cfg.objects_in_mapping and cfg.objects_enabled
        if use_objects:
            self.audit["object_graph_queries"] += 1
        local_kfs, local_points, fixed_kfs = self.map.local_map_for_frame(
            kf.id, use_object_graph=use_objects,
            max_point_neighbors=cfg.max_point_neighbors)

        self._fuse_keyframe(kf, local_points)
        for obj_id in sorted(kf.observed_objects):
            self.map.update_object_points(obj_id)

        ba = local_bundle_adjustment(self.map, local_kfs, fixed_kfs, local_points,
                                     cfg.solver, diag=self.diag_log)
        for kf_id, pid in ba.outlier_edges:
            self.map.remove_observation(kf_id, pid)

        # propagate the adjusted keyframe pose into the motion model, keeping
        # the inter-frame velocity continuous
        corrected = self.map.keyframes[kf.id].pose
        if self.pose_history:
            delta = corrected.compose(self.pose_history[-1].inverse())
            self.pose_history[-1] = corrected
            if len(self.pose_history) > 1:
                prev = delta.compose(self.pose_history[-2])
                self.pose_history[-2] = Pose(orthonormalize(prev.rotation), prev.translation)

        self.ref_tracked = len(kf.matched_points)
        self.active_local_point_ids = local_points

        if cfg.objects_enabled:
            self._reoptimize_objects(local_kfs)
        if cfg.enable_culling:
            self.map.cull_map_points(kf.id)

    def _fuse_keyframe(self, kf: KeyFrame, local_point_ids: list[int]) -> None:
        """Match the new keyframe against the local map and merge duplicates.

        Unclaimed keypoints gain observations of local points; keypoints
        already bound to a younger duplicate hand their slot to the older,
        better-observed point.
        """
        cfg = self.cfg
        pids = [p for p in local_point_ids if kf.id not in self.map.points[p].observations]
        if not pids:
            return
        pos = np.asarray([self.map.points[p].position for p in pids])
        desc = np.asarray([self.map.points[p].descriptor for p in pids])

        shim = Frame(kf.id, kf.timestamp, kf.pixels, kf.depths, kf.descriptors,
                     kf.detections, matches=dict(kf.matched_points))
        found = match_by_projection(shim, pids, pos, desc, kf.pose, self.k,
                                    cfg.effective_association(), cfg.fuse_radius)
        for m in found:
            self.map.add_observation(kf.id, m.keypoint_index, m.map_point_id)

        # duplicate merge: a local point matching a keypoint that holds a
        # younger, less-observed point replaces it
        claimed = dict(kf.matched_points)
        remaining = [p for p in pids if kf.id not in self.map.points[p].observations]
        if not remaining:
            return
        pos = np.asarray([self.map.points[p].position for p in remaining])
        desc = np.asarray([self.map.points[p].descriptor for p in remaining])
        shim2 = Frame(kf.id, kf.timestamp, kf.pixels, kf.depths, kf.descriptors,
                      kf.detections, matches={})
        cands = match_by_projection(shim2, remaining, pos, desc, kf.pose, self.k,
                                    cfg.effective_association(), cfg.fuse_radius)
        for m in cands:
            incumbent = claimed.get(m.keypoint_index)
            if incumbent is None or incumbent == m.map_point_id:
                continue
            old = self.map.points.get(m.map_point_id)
            young = self.map.points.get(incumbent)
            if old is None or young is None:
                continue
            if len(old.observations) >= len(young.observations):
                self.map.replace_point(incumbent, m.map_point_id)

    def _reoptimize_objects(self, local_kf_ids: list[int], max_obs: int = 24) -> None:
        """Re-estimate every object observed by the local keyframes, reading
        the freshly adjusted keyframe poses. Long observation histories are
        subsampled with an even stride that keeps the newest keyframes."""
        obj_ids = sorted({oid for kid in local_kf_ids
                          for oid in self.map.keyframes[kid].observed_objects})
        for oid in obj_ids:
            obj = self.map.objects[oid]
            kf_ids = [kid for kid in sorted(obj.observations) if kid in self.map.keyframes]
            if len(kf_ids) > max_obs:
                stride_ids = kf_ids[:: max(1, len(kf_ids) // max_obs)][: max_obs - 1]
                kf_ids = sorted(set(stride_ids) | {kf_ids[-1]})
            obs = [(obj.observations[kid].gaussian, self.map.keyframes[kid].pose)
                   for kid in kf_ids]
            if len(obs) < 3:
                continue
            init = EllipsoidParams.from_ellipsoid(obj.ellipsoid)
            try:
                result = estimate_ellipsoid(obs, self.k, init, self.cfg.solver,
                                            self.cfg.association.metric.wasserstein_form,
                                            diag=self.diag_log)
            except ObjvoError:
                continue
            obj.ellipsoid = result.ellipsoid


# ---------------------------------------------------------------------------
# Sequence driver
# ---------------------------------------------------------------------------

def frame_from_record(rec) -> Frame:
    """Pipeline frame from a dataset FrameRecord (ground truth ignored)."""
    detections = [Detection(d.category, d.confidence, d.contour, None,
                            np.asarray(d.keypoint_indices, dtype=int))
                  for d in rec.detections]
    return Frame(rec.frame_id, rec.timestamp, rec.pixels, rec.depths,
                 rec.descriptors, detections)


def run_sequence(records, cfg: PipelineConfig, intrinsics: Intrinsics,
                 diag_log: Optional[DiagLog] = None) -> RunResult:
    """Process a full sequence; after tracking loss the motion model coasts."""
    t0 = time.perf_counter()
    pipe = Pipeline(cfg, intrinsics, diag_log=diag_log)
    diagnostics: list[FrameDiagnostics] = []
    poses: list[Pose] = []
    timestamps = []
    lost_at: Optional[int] = None
    for rec in records:
        frame = frame_from_record(rec)
        timestamps.append(frame.timestamp)
        if pipe.lost:
            pose = pipe.predict_pose()
            pipe.pose_history.append(pose)
            poses.append(pose)
            diagnostics.append(FrameDiagnostics(frame.id, frame.timestamp, "lost",
                                                refined_pose=pose))
            continue
        diag = pipe.process_frame(frame)
        diagnostics.append(diag)
        poses.append(frame.refined_pose if frame.refined_pose is not None
                     else pipe.predict_pose())
        if diag.state == "lost" and lost_at is None:
            lost_at = frame.id
    return RunResult(np.asarray(timestamps), poses, pipe.map, diagnostics, lost_at,
                     time.perf_counter() - t0, dict(pipe.audit))
