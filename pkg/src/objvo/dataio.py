"""Dataset, trajectory, map-dump, and config file I/O.

Dataset directory layout (all line-oriented text, deterministic bytes):

    groundtruth.txt   TUM trajectory: ``timestamp tx ty tz qx qy qz qw``
                      (camera pose in the world frame), 9 significant digits
    frames.jsonl      one frame record per line; see FRAME_SCHEMA below
    scene.json        ground-truth landmarks and the generating spec

Frame record fields (``frames.jsonl``):

    frame        int frame id
    timestamp    seconds
    keypoints    {"pixels": [x0, y0, x1, y1, ...], "depths": [...],
                  "descriptors": ["<64 hex chars>", ...], "gt_ids": [...]}
    detections   [{"category", "confidence", "contour": [x0, y0, ...],
                   "keypoint_indices": [...], "gt_id"}, ...]

``gt_ids`` / ``gt_id`` are optional: precomputed real detections in the same
schema run fine without them (they are only consumed by evaluation).

Map dump format (one record per line, 9 significant digits):

    point <id> <x> <y> <z>
    object <id> <category> <cx> <cy> <cz> <ax> <ay> <az> <qx> <qy> <qz> <qw>
    keyframe <id> <timestamp> <tx> <ty> <tz> <qx> <qy> <qz> <qw>   (T_wc)
    edge <points|objects> <kf_a> <kf_b> <weight>

Config files are plain ``key = value`` lines; ``#`` starts a comment.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from scipy.spatial.transform import Rotation

from .association import Detection
from .geometry import Ellipsoid, Pose
from .simulate import DetectionRecord, FrameRecord, Scene


def fmt(x: float) -> str:
    """9-significant-digit float formatting used by every text emitter."""
    return f"{float(x):.9g}"


# ---------------------------------------------------------------------------
# Poses and trajectories
# ---------------------------------------------------------------------------

def pose_cw_to_tum(pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """Camera-from-world pose -> (position, qxyzw) of the camera in the world."""
    R_wc = pose.rotation.T
    t_wc = pose.camera_center()
    q = Rotation.from_matrix(R_wc).as_quat()
    return t_wc, q


def tum_to_pose_cw(t_wc: np.ndarray, q_xyzw: np.ndarray) -> Pose:
    R_wc = Rotation.from_quat(q_xyzw).as_matrix()
    return Pose(R_wc.T, -R_wc.T @ np.asarray(t_wc, dtype=float))


def write_trajectory(path, timestamps: Iterable[float], poses_cw: Iterable[Pose]) -> None:
    lines = []
    for ts, pose in zip(timestamps, poses_cw):
        t, q = pose_cw_to_tum(pose)
        vals = [ts, t[0], t[1], t[2], q[0], q[1], q[2], q[3]]
        lines.append(" ".join(fmt(v) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_trajectory(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(timestamps, positions (N,3), quaternions (N,4) qxyzw) from a TUM file."""
    ts, pos, quat = [], [], []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vals = [float(v) for v in line.split()]
        if len(vals) != 8:
            raise ValueError(f"bad trajectory line: {line!r}")
        ts.append(vals[0])
        pos.append(vals[1:4])
        quat.append(vals[4:8])
    return np.asarray(ts), np.asarray(pos), np.asarray(quat)


# ---------------------------------------------------------------------------
# Dataset files
# ---------------------------------------------------------------------------

def write_dataset(scene: Scene, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_trajectory(out / "groundtruth.txt", scene.timestamps, scene.poses_cw)

    with open(out / "frames.jsonl", "w") as f:
        for fr in scene.frames:
            rec = {
                "frame": fr.frame_id,
                "timestamp": fr.timestamp,
                "keypoints": {
                    "pixels": np.round(fr.pixels, 9).ravel().tolist(),
                    "depths": np.round(fr.depths, 9).tolist(),
                    "descriptors": [d.tobytes().hex() for d in fr.descriptors],
                    "gt_ids": [int(i) for i in fr.gt_ids],
                },
                "detections": [
                    {
                        "category": int(d.category),
                        "confidence": round(float(d.confidence), 9),
                        "contour": np.round(d.contour, 9).ravel().tolist(),
                        "keypoint_indices": [int(i) for i in d.keypoint_indices],
                        "gt_id": int(d.gt_object_id),
                    }
                    for d in fr.detections
                ],
            }
            f.write(json.dumps(rec, separators=(",", ":")) + "\n")

    objs = []
    for o in scene.objects:
        q = Rotation.from_matrix(o.ellipsoid.rotation).as_quat()
        objs.append({
            "id": o.id,
            "category": o.category,
            "center": np.round(o.ellipsoid.center, 12).tolist(),
            "semi_axes": np.round(o.ellipsoid.semi_axes, 12).tolist(),
            "rotation_quat": np.round(q, 12).tolist(),
        })
    pts = [{"id": p.id, "position": np.round(p.position, 12).tolist(), "object": p.object_id}
           for p in scene.points]
    doc = {
        "seed": scene.spec.seed,
        "trajectory": scene.spec.trajectory,
        "n_frames": scene.spec.n_frames,
        "objects": objs,
        "points": pts,
    }
    (Path(out) / "scene.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_frames(dataset_dir) -> list[FrameRecord]:
    """Frame records from frames.jsonl (gt fields default to -1 when absent)."""
    path = Path(dataset_dir) / "frames.jsonl"
    frames = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        kps = rec["keypoints"]
        pixels = np.asarray(kps["pixels"], dtype=float).reshape(-1, 2)
        depths = np.asarray(kps["depths"], dtype=float)
        descriptors = np.asarray([np.frombuffer(bytes.fromhex(h), dtype=np.uint8)
                                  for h in kps["descriptors"]], dtype=np.uint8)
        if len(pixels) == 0:
            descriptors = np.zeros((0, 32), dtype=np.uint8)
        gt_ids = np.asarray(kps.get("gt_ids", [-1] * len(pixels)), dtype=int)
        detections = []
        for d in rec.get("detections", []):
            detections.append(DetectionRecord(
                category=int(d["category"]),
                confidence=float(d["confidence"]),
                contour=np.asarray(d["contour"], dtype=float).reshape(-1, 2),
                keypoint_indices=np.asarray(d.get("keypoint_indices", []), dtype=int),
                gt_object_id=int(d.get("gt_id", -1)),
            ))
        frames.append(FrameRecord(int(rec["frame"]), float(rec["timestamp"]), Pose.identity(),
                                  pixels, depths, descriptors, gt_ids, detections))
    return frames


def load_scene_info(dataset_dir) -> Optional[dict]:
    path = Path(dataset_dir) / "scene.json"
    if not path.exists():
        return None
    return json.loads(path.read_text())


# ---------------------------------------------------------------------------
# Map dump
# ---------------------------------------------------------------------------

def write_map_dump(wmap, path) -> None:
    lines = []
    for pid in sorted(wmap.points):
        p = wmap.points[pid]
        lines.append("point " + " ".join([str(pid)] + [fmt(v) for v in p.position]))
    for oid in sorted(wmap.objects):
        o = wmap.objects[oid]
        q = Rotation.from_matrix(o.ellipsoid.rotation).as_quat()
        vals = list(o.ellipsoid.center) + list(o.ellipsoid.semi_axes) + list(q)
        lines.append(f"object {oid} {o.category} " + " ".join(fmt(v) for v in vals))
    for kid in sorted(wmap.keyframes):
        kf = wmap.keyframes[kid]
        t, q = pose_cw_to_tum(kf.pose)
        vals = [kf.timestamp] + list(t) + list(q)
        lines.append(f"keyframe {kid} " + " ".join(fmt(v) for v in vals))
    for name, graph in (("points", wmap.point_graph), ("objects", wmap.object_graph)):
        adj = graph.adjacency()
        for a in sorted(adj):
            for b in sorted(adj[a]):
                if a < b:
                    lines.append(f"edge {name} {a} {b} {adj[a][b]}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_map_dump(path) -> dict:
    """Parsed dump: points/objects/keyframes/edges as plain dicts and arrays."""
    out = {"points": {}, "objects": {}, "keyframes": {}, "edges": []}
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        kind = parts[0]
        if kind == "point":
            out["points"][int(parts[1])] = np.array([float(v) for v in parts[2:5]])
        elif kind == "object":
            vals = [float(v) for v in parts[3:]]
            rot = Rotation.from_quat(vals[6:10]).as_matrix()
            out["objects"][int(parts[1])] = {
                "category": int(parts[2]),
                "ellipsoid": Ellipsoid(np.array(vals[0:3]), np.array(vals[3:6]), rot),
            }
        elif kind == "keyframe":
            vals = [float(v) for v in parts[2:]]
            out["keyframes"][int(parts[1])] = {
                "timestamp": vals[0],
                "pose_cw": tum_to_pose_cw(np.array(vals[1:4]), np.array(vals[4:8])),
            }
        elif kind == "edge":
            out["edges"].append((parts[1], int(parts[2]), int(parts[3]), int(parts[4])))
    return out


# ---------------------------------------------------------------------------
# Detection conversion and config files
# ---------------------------------------------------------------------------

def detection_from_record(rec: DetectionRecord) -> Detection:
    return Detection(category=rec.category, confidence=rec.confidence,
                     contour=rec.contour, ellipse=None,
                     keypoint_indices=rec.keypoint_indices)


def parse_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` config; later keys override earlier ones."""
    out: dict[str, str] = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"bad config line: {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out
