"""Hierarchical world model: map points, object landmarks, keyframes, and the
two covisibility graphs (shared-point and shared-object weighted).

The map is a single mutable store with exclusive-writer semantics. Both
graphs are maintained incrementally on insertion and observation removal;
``recompute_*_graph`` rebuilds either one from scratch for verification.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .association import Detection
from .errors import DuplicateId, UnknownKeyFrame
from .geometry import Ellipsoid, Gaussian2D, Intrinsics, Pose

POINT_EDGE_THRESHOLD = 15   # shared map points (ORB-SLAM2 convention)
OBJECT_EDGE_THRESHOLD = 1   # shared object landmarks


@dataclass
class MapPoint:
    id: int
    position: np.ndarray                  # (3,)
    descriptor: np.ndarray                # (32,) uint8, packed 256 bits
    observations: dict[int, int] = field(default_factory=dict)  # kf id -> keypoint index
    owner_object: Optional[int] = None


@dataclass
class ObjectObservation:
    """Per-keyframe observation record of an object landmark."""

    gaussian: Gaussian2D
    category: int
    keypoint_indices: np.ndarray
    detection_index: int


@dataclass
class ObjectLandmark:
    id: int
    ellipsoid: Ellipsoid
    category: int
    map_point_ids: set[int] = field(default_factory=set)
    observations: dict[int, ObjectObservation] = field(default_factory=dict)


@dataclass
class KeyFrame:
    id: int
    timestamp: float
    pose: Pose
    pixels: np.ndarray                    # (N, 2)
    descriptors: np.ndarray               # (N, 32) uint8
    depths: np.ndarray                    # (N,)
    detections: list[Detection] = field(default_factory=list)
    matched_points: dict[int, int] = field(default_factory=dict)  # keypoint -> map point id
    observed_objects: set[int] = field(default_factory=set)


class CovisibilityGraph:
    """Symmetric weighted keyframe graph; edges kept only above a threshold."""

    def __init__(self, threshold: int):
        self.threshold = threshold
        self._adj: dict[int, dict[int, int]] = {}

    def ensure_node(self, kf_id: int) -> None:
        self._adj.setdefault(kf_id, {})

    def set_weight(self, a: int, b: int, w: int) -> None:
        if a == b:
            return
        self.ensure_node(a)
        self.ensure_node(b)
        if w >= self.threshold:
            self._adj[a][b] = w
            self._adj[b][a] = w
        else:
            self._adj[a].pop(b, None)
            self._adj[b].pop(a, None)

    def increment(self, a: int, b: int, delta: int, current: int) -> None:
        self.set_weight(a, b, current + delta)

    def weight(self, a: int, b: int) -> int:
        return self._adj.get(a, {}).get(b, 0)

    def neighbors(self, kf_id: int, min_weight: Optional[int] = None) -> list[tuple[int, int]]:
        """(neighbor, weight) sorted by weight descending, then id descending."""
        mw = self.threshold if min_weight is None else min_weight
        items = [(n, w) for n, w in self._adj.get(kf_id, {}).items() if w >= mw]
        items.sort(key=lambda t: (-t[1], -t[0]))
        return items

    def adjacency(self) -> dict[int, dict[int, int]]:
        return {k: dict(v) for k, v in self._adj.items()}


class Map:
    """Map point / object / keyframe store with reciprocal observations."""

    def __init__(self, intrinsics: Optional[Intrinsics] = None):
        self.intrinsics = intrinsics
        self.points: dict[int, MapPoint] = {}
        self.objects: dict[int, ObjectLandmark] = {}
        self.keyframes: dict[int, KeyFrame] = {}
        self.point_graph = CovisibilityGraph(POINT_EDGE_THRESHOLD)
        self.object_graph = CovisibilityGraph(OBJECT_EDGE_THRESHOLD)
        self._next_point_id = 0
        self._next_object_id = 0
        self.first_keyframe_id: Optional[int] = None

    # -- creation ----------------------------------------------------------

    def new_point(self, position: np.ndarray, descriptor: np.ndarray) -> MapPoint:
        p = MapPoint(self._next_point_id, np.asarray(position, dtype=float).copy(),
                     np.asarray(descriptor, dtype=np.uint8).copy())
        self._next_point_id += 1
        self.points[p.id] = p
        return p

    def add_object(self, ellipsoid: Ellipsoid, category: int) -> ObjectLandmark:
        obj = ObjectLandmark(self._next_object_id, ellipsoid, category)
        self._next_object_id += 1
        self.objects[obj.id] = obj
        return obj

    # -- keyframe insertion and the incremental graphs ----------------------

    def insert_keyframe(self, kf: KeyFrame,
                        object_observations: Optional[list[tuple[int, ObjectObservation]]] = None) -> int:
        """Store a keyframe and add reciprocal observations and graph edges."""
        if kf.id in self.keyframes:
            raise DuplicateId(f"keyframe {kf.id} already in map")
        self.keyframes[kf.id] = kf
        if self.first_keyframe_id is None:
            self.first_keyframe_id = kf.id
        self.point_graph.ensure_node(kf.id)
        self.object_graph.ensure_node(kf.id)

        shared_points: dict[int, int] = {}
        for kp_idx, pid in kf.matched_points.items():
            point = self.points[pid]
            point.observations[kf.id] = kp_idx
            for other in point.observations:
                if other != kf.id:
                    shared_points[other] = shared_points.get(other, 0) + 1
        for other, n in shared_points.items():
            self.point_graph.set_weight(kf.id, other, n)

        shared_objects: dict[int, int] = {}
        for obj_id, obs in (object_observations or []):
            obj = self.objects[obj_id]
            obj.observations[kf.id] = obs
            kf.observed_objects.add(obj_id)
            for other in obj.observations:
                if other != kf.id:
                    shared_objects[other] = shared_objects.get(other, 0) + 1
        for other, n in shared_objects.items():
            self.object_graph.set_weight(kf.id, other, n)
        return kf.id

    def add_observation(self, kf_id: int, kp_idx: int, point_id: int) -> None:
        """Attach a (keyframe, keypoint) observation to an existing point."""
        kf = self.keyframes[kf_id]
        point = self.points[point_id]
        prev = kf.matched_points.get(kp_idx)
        if prev is not None and prev != point_id:
            raise ValueError(f"keypoint {kp_idx} of kf {kf_id} already matched")
        kf.matched_points[kp_idx] = point_id
        point.observations[kf_id] = kp_idx
        for other in point.observations:
            if other != kf_id:
                self.point_graph.set_weight(kf_id, other, self._shared_point_count(kf_id, other))

    def _shared_point_count(self, a: int, b: int) -> int:
        ka, kb = self.keyframes[a], self.keyframes[b]
        sa = set(ka.matched_points.values())
        sb = set(kb.matched_points.values())
        return len(sa & sb)

    def remove_observation(self, kf_id: int, point_id: int) -> None:
        """Drop the reciprocal edge between a keyframe and a map point."""
        point = self.points.get(point_id)
        if point is None or kf_id not in point.observations:
            return
        kp_idx = point.observations.pop(kf_id)
        kf = self.keyframes[kf_id]
        if kf.matched_points.get(kp_idx) == point_id:
            del kf.matched_points[kp_idx]
        for other in point.observations:
            self.point_graph.set_weight(kf_id, other, self._shared_point_count(kf_id, other))
        if not point.observations:
            self.delete_point(point_id)

    def delete_point(self, point_id: int) -> None:
        point = self.points.pop(point_id, None)
        if point is None:
            return
        holders = list(point.observations.items())
        for kf_id, kp_idx in holders:
            kf = self.keyframes[kf_id]
            if kf.matched_points.get(kp_idx) == point_id:
                del kf.matched_points[kp_idx]
        for i, (a, _) in enumerate(holders):
            for b, _ in holders[i + 1:]:
                self.point_graph.set_weight(a, b, self._shared_point_count(a, b))
        if point.owner_object is not None:
            obj = self.objects.get(point.owner_object)
            if obj is not None:
                obj.map_point_ids.discard(point_id)

    def replace_point(self, old_id: int, new_id: int) -> None:
        """Fuse duplicate landmarks: every observation of ``old`` moves to
        ``new`` where the keypoint slot is free, then ``old`` is deleted."""
        if old_id == new_id:
            return
        old = self.points[old_id]
        new = self.points[new_id]
        for kf_id, kp_idx in sorted(old.observations.items()):
            kf = self.keyframes[kf_id]
            if kf_id in new.observations:
                # both points seen here: keep new's slot, free old's
                if kf.matched_points.get(kp_idx) == old_id:
                    del kf.matched_points[kp_idx]
                continue
            kf.matched_points[kp_idx] = new_id
            new.observations[kf_id] = kp_idx
        old.observations.clear()
        self.points.pop(old_id, None)
        if old.owner_object is not None:
            obj = self.objects.get(old.owner_object)
            if obj is not None:
                obj.map_point_ids.discard(old_id)
        # weights around every holder of either point may have changed
        touched = sorted(set(new.observations))
        for i, a in enumerate(touched):
            for b in touched[i + 1:]:
                self.point_graph.set_weight(a, b, self._shared_point_count(a, b))

    # -- queries -------------------------------------------------------------

    def point_covisibility_neighbors(self, kf_id: int, min_weight: int = POINT_EDGE_THRESHOLD) -> list[int]:
        if kf_id not in self.keyframes:
            raise UnknownKeyFrame(str(kf_id))
        return [n for n, _ in self.point_graph.neighbors(kf_id, min_weight)]

    def object_covisibility_neighbors(self, kf_id: int) -> list[int]:
        """Keyframes sharing >= 1 object, by shared count then recency."""
        if kf_id not in self.keyframes:
            raise UnknownKeyFrame(str(kf_id))
        return [n for n, _ in self.object_graph.neighbors(kf_id, OBJECT_EDGE_THRESHOLD)]

    def local_map_for_frame(self, kf_id: int, use_object_graph: bool = True,
                            max_point_neighbors: int = 10
                            ) -> tuple[list[int], list[int], list[int]]:
        """(local keyframes, local map points, fixed keyframes) around a keyframe."""
        if kf_id not in self.keyframes:
            raise UnknownKeyFrame(str(kf_id))
        local = {kf_id}
        if use_object_graph:
            local.update(self.object_covisibility_neighbors(kf_id))
        local.update(self.point_covisibility_neighbors(kf_id)[:max_point_neighbors])
        local_ids = sorted(local)
        point_ids = sorted({pid for k in local_ids
                            for pid in self.keyframes[k].matched_points.values()})
        fixed = sorted({k for pid in point_ids for k in self.points[pid].observations
                        if k not in local})
        return local_ids, point_ids, fixed

    # -- object/point ownership ----------------------------------------------

    def update_object_points(self, object_id: int) -> None:
        """Bind map points to an object by mask membership in >= 2 keyframes.

        A point joins the object once its observing keypoints fall inside the
        object's detections in at least two keyframes; ownership conflicts
        resolve by the larger membership count (ties keep the current owner).
        """
        obj = self.objects[object_id]
        tally: dict[int, int] = {}
        for kf_id, obs in obj.observations.items():
            kf = self.keyframes.get(kf_id)
            if kf is None:
                continue
            inside = set(int(i) for i in obs.keypoint_indices)
            for kp_idx, pid in kf.matched_points.items():
                if kp_idx in inside:
                    tally[pid] = tally.get(pid, 0) + 1
        for pid in sorted(tally):
            if tally[pid] < 2 or pid not in self.points:
                continue
            point = self.points[pid]
            if point.owner_object is None or point.owner_object == object_id:
                point.owner_object = object_id
                obj.map_point_ids.add(pid)
                continue
            other = self.objects.get(point.owner_object)
            other_count = 0
            if other is not None:
                for kf_id, obs in other.observations.items():
                    kf = self.keyframes.get(kf_id)
                    if kf is None:
                        continue
                    kp = kf.matched_points
                    if any(kp.get(int(i)) == pid for i in obs.keypoint_indices):
                        other_count += 1
            if tally[pid] > other_count:
                if other is not None:
                    other.map_point_ids.discard(pid)
                point.owner_object = object_id
                obj.map_point_ids.add(pid)

    def cull_map_points(self, current_kf_id: Optional[int] = None, min_observations: int = 2,
                        age_keyframes: int = 3) -> int:
        """Remove stale single-observation points. Disabled in benchmark runs."""
        kf_ids = sorted(self.keyframes)
        if current_kf_id is None:
            if not kf_ids:
                return 0
            current_kf_id = kf_ids[-1]
        if current_kf_id not in kf_ids:
            raise UnknownKeyFrame(str(current_kf_id))
        cur_rank = kf_ids.index(current_kf_id)
        doomed = []
        for pid in sorted(self.points):
            p = self.points[pid]
            if len(p.observations) >= min_observations:
                continue
            birth = min(p.observations) if p.observations else None
            if birth is None or birth not in kf_ids:
                doomed.append(pid)
                continue
            if cur_rank - kf_ids.index(birth) >= age_keyframes:
                doomed.append(pid)
        for pid in doomed:
            self.delete_point(pid)
        return len(doomed)

    # -- verification ----------------------------------------------------------

    def recompute_point_graph(self) -> CovisibilityGraph:
        g = CovisibilityGraph(POINT_EDGE_THRESHOLD)
        ids = sorted(self.keyframes)
        sets = {k: set(self.keyframes[k].matched_points.values()) for k in ids}
        for k in ids:
            g.ensure_node(k)
        for i, a in enumerate(ids):
            for b in ids[i + 1:]:
                g.set_weight(a, b, len(sets[a] & sets[b]))
        return g

    def recompute_object_graph(self) -> CovisibilityGraph:
        g = CovisibilityGraph(OBJECT_EDGE_THRESHOLD)
        ids = sorted(self.keyframes)
        sets = {k: set(self.keyframes[k].observed_objects) for k in ids}
        for k in ids:
            g.ensure_node(k)
        for i, a in enumerate(ids):
            for b in ids[i + 1:]:
                g.set_weight(a, b, len(sets[a] & sets[b]))
        return g

    def audit(self) -> list[str]:
        """Full referential-integrity check; returns human-readable violations."""
        problems = []
        for pid, p in self.points.items():
            for kf_id, kp_idx in p.observations.items():
                kf = self.keyframes.get(kf_id)
                if kf is None:
                    problems.append(f"point {pid} observed by missing keyframe {kf_id}")
                elif kf.matched_points.get(kp_idx) != pid:
                    problems.append(f"point {pid} observation in kf {kf_id} not reciprocal")
            if p.owner_object is not None:
                obj = self.objects.get(p.owner_object)
                if obj is None:
                    problems.append(f"point {pid} owned by missing object {p.owner_object}")
                elif pid not in obj.map_point_ids:
                    problems.append(f"point {pid} ownership not reciprocal")
        for kf_id, kf in self.keyframes.items():
            for kp_idx, pid in kf.matched_points.items():
                if kp_idx < 0 or kp_idx >= len(kf.pixels):
                    problems.append(f"kf {kf_id} match index {kp_idx} out of range")
                p = self.points.get(pid)
                if p is None:
                    problems.append(f"kf {kf_id} matches missing point {pid}")
                elif p.observations.get(kf_id) != kp_idx:
                    problems.append(f"kf {kf_id} match of point {pid} not reciprocal")
            for obj_id in kf.observed_objects:
                obj = self.objects.get(obj_id)
                if obj is None or kf_id not in obj.observations:
                    problems.append(f"kf {kf_id} object observation {obj_id} not reciprocal")
        for obj_id, obj in self.objects.items():
            for pid in obj.map_point_ids:
                p = self.points.get(pid)
                if p is None:
                    problems.append(f"object {obj_id} references missing point {pid}")
                elif p.owner_object != obj_id:
                    problems.append(f"object {obj_id} point {pid} ownership mismatch")
            for kf_id in obj.observations:
                kf = self.keyframes.get(kf_id)
                if kf is None or obj_id not in kf.observed_objects:
                    problems.append(f"object {obj_id} observation at kf {kf_id} not reciprocal")
        for graph in (self.point_graph, self.object_graph):
            adj = graph.adjacency()
            for a, nbrs in adj.items():
                for b, w in nbrs.items():
                    if adj.get(b, {}).get(a) != w:
                        problems.append(f"graph edge ({a},{b}) asymmetric")
                    if w < graph.threshold:
                        problems.append(f"graph edge ({a},{b}) below threshold")
        return problems
