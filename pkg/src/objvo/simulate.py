"""Deterministic synthetic-scene simulator.

Generates a world of ellipsoidal objects carrying surface feature points plus
free background points, moves a camera along an analytic trajectory, and
renders per-frame observations: noisy keypoints with packed binary
descriptors and instance detections as noisy contour samples of the projected
object ellipses. Everything is reproducible from the scene seed; identical
specs produce byte-identical dataset files.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import InvalidSpec
from .geometry import (
    Ellipse2D,
    Ellipsoid,
    Gaussian2D,
    Intrinsics,
    Pose,
    ellipse_outline_points,
    ellipse_to_gaussian,
    gaussian_to_ellipse,
    project_ellipsoid_gaussian,
    so3_exp,
)

DEFAULT_INTRINSICS = Intrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)

TRAJECTORIES = ("orbit", "loopwalk", "straight")

CONTOUR_SAMPLES = 64
MIN_DETECTION_AREA = 4.0          # px^2
MIN_CONTOUR_INSIDE = 0.6          # fraction of outline samples inside the image
MEMBERSHIP_DILATION = 1.15        # Mahalanobis gate for keypoints inside an instance


@dataclass(frozen=True)
class NoiseSpec:
    keypoint_sigma: float = 0.0          # px
    contour_sigma: float = 0.0           # px
    detection_dropout: float = 0.0       # per true detection
    misclassification: float = 0.0       # per surviving detection
    outlier_rate: float = 0.0            # spurious detections per frame
    descriptor_bit_flips: int = 0        # per keypoint observation


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    n_objects: int = 12
    n_background_points: int = 800
    points_per_object: int = 12
    n_categories: int = 8
    object_size_min: float = 0.15        # scene units, largest semi-axis
    object_size_max: float = 0.6
    axis_ratio_max: float = 4.0
    trajectory: str = "loopwalk"
    n_frames: int = 300
    fps: float = 30.0
    path_radius: float = 8.0             # loopwalk / orbit
    laps: float = 1.25                   # loopwalk only
    corridor_length: float = 20.0        # straight only
    max_depth: float = 12.0
    noise: NoiseSpec = field(default_factory=NoiseSpec)

    def validate(self) -> None:
        n = self.noise
        if self.trajectory not in TRAJECTORIES:
            raise InvalidSpec(f"unknown trajectory {self.trajectory!r}")
        if self.n_frames < 2 or self.n_objects < 0 or self.n_background_points < 0:
            raise InvalidSpec("counts out of range")
        if not (0 < self.object_size_min <= self.object_size_max):
            raise InvalidSpec("object size range invalid")
        if self.axis_ratio_max < 1.0 or self.n_categories < 1 or self.fps <= 0:
            raise InvalidSpec("scene parameters out of range")
        for name, rate in (("detection_dropout", n.detection_dropout),
                           ("misclassification", n.misclassification),
                           ("outlier_rate", n.outlier_rate)):
            if not (0.0 <= rate <= 1.0):
                raise InvalidSpec(f"{name} must lie in [0, 1]")
        if n.keypoint_sigma < 0 or n.contour_sigma < 0 or n.descriptor_bit_flips < 0:
            raise InvalidSpec("noise magnitudes must be non-negative")


@dataclass
class SceneObject:
    id: int
    ellipsoid: Ellipsoid
    category: int


@dataclass
class ScenePoint:
    id: int
    position: np.ndarray
    descriptor: np.ndarray            # (32,) uint8
    object_id: int                    # -1 for background


@dataclass
class DetectionRecord:
    category: int
    confidence: float
    contour: np.ndarray               # (64, 2)
    keypoint_indices: np.ndarray      # indices into the frame keypoint list
    gt_object_id: int                 # -1 for spurious detections


@dataclass
class FrameRecord:
    frame_id: int
    timestamp: float
    pose_cw: Pose                     # ground-truth camera-from-world
    pixels: np.ndarray                # (N, 2)
    depths: np.ndarray                # (N,)
    descriptors: np.ndarray           # (N, 32) uint8
    gt_ids: np.ndarray                # (N,) scene point ids
    detections: list[DetectionRecord] = field(default_factory=list)


@dataclass
class Scene:
    spec: SceneSpec
    intrinsics: Intrinsics
    objects: list[SceneObject]
    points: list[ScenePoint]
    frames: list[FrameRecord]

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([f.timestamp for f in self.frames])

    @property
    def poses_cw(self) -> list[Pose]:
        return [f.pose_cw for f in self.frames]


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------

def _look_at_pose(cam: np.ndarray, target: np.ndarray, up=np.array([0.0, 0.0, 1.0])) -> Pose:
    z = target - cam
    z = z / np.linalg.norm(z)
    x = np.cross(-up, z)
    if np.linalg.norm(x) < 1e-9:
        x = np.array([1.0, 0.0, 0.0])
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    R_wc = np.stack([x, y, z], axis=1)
    return Pose(R_wc.T, -R_wc.T @ cam)


def trajectory_poses(spec: SceneSpec) -> list[Pose]:
    """Ground-truth camera-from-world poses; all three paths are constant-twist."""
    n = spec.n_frames
    poses = []
    if spec.trajectory == "orbit":
        R = spec.path_radius
        step = 2.0 * np.pi / n
        for i in range(n):
            phi = i * step
            cam = np.array([R * np.cos(phi), R * np.sin(phi), 0.0])
            poses.append(_look_at_pose(cam, np.zeros(3)))
    elif spec.trajectory == "loopwalk":
        R = spec.path_radius
        step = 2.0 * np.pi * spec.laps / n
        for i in range(n):
            phi = i * step
            cam = np.array([R * np.cos(phi), R * np.sin(phi), 0.0])
            heading = np.array([-np.sin(phi), np.cos(phi), 0.0])
            poses.append(_look_at_pose(cam, cam + heading))
    else:  # straight
        speed = spec.corridor_length / n
        for i in range(n):
            cam = np.array([i * speed, 0.0, 0.0])
            poses.append(_look_at_pose(cam, cam + np.array([1.0, 0.0, 0.0])))
    return poses


# ---------------------------------------------------------------------------
# World construction
# ---------------------------------------------------------------------------

def _sample_position(spec: SceneSpec, rng: np.random.Generator,
                     stratum: Optional[tuple[int, int]] = None) -> np.ndarray:
    """World position for a landmark; loopwalk positions are stratified over
    the loop angle (stratum = (index, count)) so no arc of the path starves."""
    if spec.trajectory == "orbit":
        return rng.uniform(-2.0, 2.0, size=3) * np.array([1.0, 1.0, 0.7])
    if spec.trajectory == "loopwalk":
        if stratum is None:
            psi = rng.uniform(0.0, 2.0 * np.pi)
        else:
            i, n = stratum
            psi = 2.0 * np.pi * (i + rng.random()) / n
        r = spec.path_radius + rng.uniform(-2.2, 2.2)
        z = rng.uniform(-1.5, 1.5)
        return np.array([r * np.cos(psi), r * np.sin(psi), z])
    x = rng.uniform(1.0, spec.corridor_length + 8.0)
    return np.array([x, rng.uniform(-3.0, 3.0), rng.uniform(-2.0, 2.0)])


def _sample_object(spec: SceneSpec, rng: np.random.Generator, oid: int) -> SceneObject:
    base = rng.uniform(spec.object_size_min, spec.object_size_max)
    ratios = rng.uniform(1.0 / spec.axis_ratio_max, 1.0, size=2)
    axes = base * np.concatenate([[1.0], ratios])
    rng.shuffle(axes)
    rot = so3_exp(rng.normal(scale=1.0, size=3))
    center = _sample_position(spec, rng, stratum=(oid, max(spec.n_objects, 1)))
    category = int(rng.integers(0, spec.n_categories))
    return SceneObject(oid, Ellipsoid(center, axes, rot), category)


def _object_visible_frames(obj: SceneObject, poses: list[Pose], k: Intrinsics,
                           max_depth: float) -> int:
    count = 0
    for pose in poses:
        try:
            g = project_ellipsoid_gaussian(obj.ellipsoid, pose, k)
        except Exception:
            continue
        depth = pose.transform(obj.ellipsoid.center)[2]
        if depth > max_depth:
            continue
        m = g.mean
        if 0 <= m[0] < k.width and 0 <= m[1] < k.height:
            count += 1
    return count


def _surface_points(obj: SceneObject, n: int, rng: np.random.Generator) -> np.ndarray:
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    local = dirs * obj.ellipsoid.semi_axes
    return local @ obj.ellipsoid.rotation.T + obj.ellipsoid.center


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _flip_bits(desc: np.ndarray, n_flips: int, rng: np.random.Generator) -> np.ndarray:
    if n_flips <= 0:
        return desc.copy()
    out = desc.copy()
    positions = rng.choice(256, size=n_flips, replace=False)
    for pos in positions:
        out[pos // 8] ^= np.uint8(1 << (pos % 8))
    return out


def generate_scene(spec: SceneSpec) -> Scene:
    """Build the world and render every frame; reproducible from the seed."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    k = DEFAULT_INTRINSICS
    poses = trajectory_poses(spec)

    # objects, resampled until visible in enough frames (keeps GT counts exact)
    objects: list[SceneObject] = []
    for oid in range(spec.n_objects):
        best: Optional[SceneObject] = None
        best_seen = -1
        for _ in range(100):
            cand = _sample_object(spec, rng, oid)
            seen = _object_visible_frames(cand, poses[:: max(1, len(poses) // 60)], k, spec.max_depth)
            if seen > best_seen:
                best, best_seen = cand, seen
            if seen >= 5:
                break
        objects.append(best)

    points: list[ScenePoint] = []
    for i in range(spec.n_background_points):
        pos = _sample_position(spec, rng, stratum=(i, max(spec.n_background_points, 1)))
        desc = rng.integers(0, 256, size=32, dtype=np.uint8)
        points.append(ScenePoint(len(points), pos, desc, -1))
    for obj in objects:
        for pos in _surface_points(obj, spec.points_per_object, rng):
            desc = rng.integers(0, 256, size=32, dtype=np.uint8)
            points.append(ScenePoint(len(points), pos, desc, obj.id))

    positions = np.asarray([p.position for p in points])
    descriptors = np.asarray([p.descriptor for p in points])
    point_ids = np.arange(len(points))

    noise = spec.noise
    frames: list[FrameRecord] = []
    dt = 1.0 / spec.fps
    for fid, pose in enumerate(poses):
        pc = pose.transform(positions)
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = k.fx * pc[:, 0] / z + k.cx
            v = k.fy * pc[:, 1] / z + k.cy
        visible = (z > 0.4) & (z < spec.max_depth) & (u >= 1) & (u < k.width - 1) \
            & (v >= 1) & (v < k.height - 1)
        idx = np.nonzero(visible)[0]
        px = np.stack([u[idx], v[idx]], axis=1)
        if noise.keypoint_sigma > 0:
            px = px + rng.normal(scale=noise.keypoint_sigma, size=px.shape)
        depths = z[idx].copy()
        descs = np.empty((len(idx), 32), dtype=np.uint8)
        for row, pt_i in enumerate(idx):
            descs[row] = _flip_bits(descriptors[pt_i], noise.descriptor_bit_flips, rng)

        detections: list[DetectionRecord] = []
        for obj in objects:
            try:
                g = project_ellipsoid_gaussian(obj.ellipsoid, pose, k)
            except Exception:
                continue
            depth = pose.transform(obj.ellipsoid.center)[2]
            if depth > spec.max_depth:
                continue
            ell = gaussian_to_ellipse(g)
            if not (0 <= ell.center[0] < k.width and 0 <= ell.center[1] < k.height):
                continue
            if ell.area < MIN_DETECTION_AREA:
                continue
            outline = ellipse_outline_points(ell, CONTOUR_SAMPLES)
            inside = ((outline[:, 0] >= 0) & (outline[:, 0] < k.width)
                      & (outline[:, 1] >= 0) & (outline[:, 1] < k.height))
            if inside.mean() < MIN_CONTOUR_INSIDE:
                continue
            if noise.detection_dropout > 0 and rng.random() < noise.detection_dropout:
                continue
            contour = outline.copy()
            if noise.contour_sigma > 0:
                contour = contour + rng.normal(scale=noise.contour_sigma, size=contour.shape)
            category = obj.category
            if noise.misclassification > 0 and rng.random() < noise.misclassification:
                category = int((obj.category + 1 + rng.integers(0, spec.n_categories - 1))
                               % spec.n_categories) if spec.n_categories > 1 else obj.category
            confidence = float(rng.uniform(0.2, 1.0))
            members = _members_inside(px, g)
            detections.append(DetectionRecord(category, confidence, contour, members, obj.id))

        if noise.outlier_rate > 0 and rng.random() < noise.outlier_rate:
            center = rng.uniform([60.0, 60.0], [k.width - 60.0, k.height - 60.0])
            axes = np.sort(rng.uniform(6.0, 40.0, size=2))[::-1]
            fake = Ellipse2D(center, axes, rng.uniform(-np.pi / 2, np.pi / 2))
            outline = ellipse_outline_points(fake, CONTOUR_SAMPLES)
            contour = outline + rng.normal(scale=max(noise.contour_sigma, 0.1), size=outline.shape)
            members = _members_inside(px, ellipse_to_gaussian(fake))
            detections.append(DetectionRecord(int(rng.integers(0, spec.n_categories)),
                                              float(rng.uniform(0.2, 1.0)),
                                              contour, members, -1))

        frames.append(FrameRecord(fid, fid * dt, pose, px, depths, descs,
                                  point_ids[idx].copy(), detections))
    return Scene(spec, k, objects, points, frames)


def _members_inside(px: np.ndarray, g: Gaussian2D) -> np.ndarray:
    if len(px) == 0:
        return np.zeros(0, dtype=int)
    inv = np.linalg.inv(g.covariance)
    d = px - g.mean
    m2 = np.einsum("ni,ij,nj->n", d, inv, d)
    return np.nonzero(m2 <= MEMBERSHIP_DILATION**2)[0].astype(int)


def scene_with(spec: SceneSpec, **noise_overrides) -> SceneSpec:
    """Spec copy with noise fields replaced; convenience for tests/benches."""
    return replace(spec, noise=replace(spec.noise, **noise_overrides))
