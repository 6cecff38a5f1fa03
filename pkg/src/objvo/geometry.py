"""Core 2D/3D geometric types and conversions.

Ellipse fitting, Gaussian/ellipse interconversion, dual-quadric construction
and pinhole projection, plus the small SO(3)/SE(3) helpers the optimizers
build on. All types are immutable values and all operations are pure
functions, so everything here is safe for unrestricted concurrent use.

Conventions:
    * Poses map world coordinates to camera coordinates (camera-from-world),
      so the projection matrix is P = K [R | t].
    * Ellipse angles are canonicalized to [-pi/2, pi/2) with the major axis
      first; circles report angle 0.
    * Dual quadrics are stored scale-normalized so the (3, 3) entry is -1
      whenever it is nonzero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    BehindCamera,
    DegenerateConic,
    DegenerateFit,
    NotAnEllipsoid,
    NotPositiveDefinite,
    TooFewPoints,
)

_MIN_DEPTH = 1e-9


# ---------------------------------------------------------------------------
# Rotation helpers
# ---------------------------------------------------------------------------

def rot2(theta: float) -> np.ndarray:
    """2x2 counter-clockwise rotation matrix."""
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def hat3(w: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix such that hat3(w) @ v == cross(w, v)."""
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues exponential of an axis-angle 3-vector."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    K = hat3(w)
    if theta < 1e-10:
        # second-order Taylor keeps machine precision near zero
        return np.eye(3) + K + 0.5 * (K @ K)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Axis-angle 3-vector of a rotation matrix (angle in [0, pi])."""
    R = np.asarray(R, dtype=float)
    cos_theta = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta < 1e-10:
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) * 0.5
    if np.pi - theta < 1e-6:
        # near pi the antisymmetric part degenerates; use the symmetric part
        A = (R + np.eye(3)) * 0.5
        axis = np.sqrt(np.maximum(np.diag(A), 0.0))
        # fix signs from the off-diagonal entries
        i = int(np.argmax(axis))
        if axis[i] > 0:
            axis = A[:, i] / axis[i]
            axis = axis / np.linalg.norm(axis)
        return axis * theta
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return vee * (theta / (2.0 * np.sin(theta)))


def _so3_left_jacobian(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    K = hat3(w)
    if theta < 1e-10:
        return np.eye(3) + 0.5 * K + (K @ K) / 6.0
    a = (1.0 - np.cos(theta)) / theta**2
    b = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + a * K + b * (K @ K)


def se3_exp(xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """SE(3) exponential of a twist ``xi = [rho, omega]`` -> (R, t)."""
    xi = np.asarray(xi, dtype=float)
    rho, w = xi[:3], xi[3:]
    R = so3_exp(w)
    t = _so3_left_jacobian(w) @ rho
    return R, t


def se3_log(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Twist ``[rho, omega]`` such that se3_exp recovers (R, t)."""
    w = so3_log(R)
    V = _so3_left_jacobian(w)
    rho = np.linalg.solve(V, np.asarray(t, dtype=float))
    return np.concatenate([rho, w])


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (Frobenius sense) via SVD."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=float))
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt))
    return U @ D @ Vt


def _check_rotation(R: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {R.shape}")
    if not np.allclose(R @ R.T, np.eye(3), atol=tol):
        raise ValueError("rotation is not orthonormal")
    if abs(np.linalg.det(R) - 1.0) > 1e-6:
        raise ValueError("rotation determinant is not +1")
    return R


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics (pixels)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Pose:
    """Rigid camera-from-world transform: ``x_cam = rotation @ x_world + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = _check_rotation(self.rotation)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=float)
        return Pose(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "Pose") -> "Pose":
        """self * other as transforms: applies ``other`` first."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def transform(self, points: np.ndarray) -> np.ndarray:
        """World points (3,) or (N, 3) to camera coordinates."""
        p = np.asarray(points, dtype=float)
        if p.ndim == 1:
            return self.rotation @ p + self.translation
        return p @ self.rotation.T + self.translation

    def retract_left(self, xi: np.ndarray) -> "Pose":
        """Left-multiplied tangent update: ``exp(xi) * self``."""
        dR, dt = se3_exp(xi)
        return Pose(dR @ self.rotation, dR @ self.translation + dt)

    def camera_center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation


@dataclass(frozen=True)
class Ellipse2D:
    """Image ellipse: center (px), semi-axes major-first (px), angle in [-pi/2, pi/2)."""

    center: np.ndarray
    semi_axes: np.ndarray
    angle: float

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float).reshape(2)
        a = np.asarray(self.semi_axes, dtype=float).reshape(2)
        theta = float(self.angle)
        if not np.all(a > 0):
            raise ValueError("semi-axes must be positive")
        if a[0] < a[1]:
            a = a[::-1].copy()
            theta += 0.5 * np.pi
        # wrap to [-pi/2, pi/2)
        theta = (theta + 0.5 * np.pi) % np.pi - 0.5 * np.pi
        if a[0] == a[1]:
            theta = 0.0
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "semi_axes", a)
        object.__setattr__(self, "angle", theta)

    @property
    def area(self) -> float:
        return float(np.pi * self.semi_axes[0] * self.semi_axes[1])


@dataclass(frozen=True)
class Gaussian2D:
    """2D Gaussian with SPD covariance (pixels, pixels^2)."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mean, dtype=float).reshape(2)
        C = np.asarray(self.covariance, dtype=float).reshape(2, 2)
        scale = max(1.0, float(np.abs(C).max()))
        if abs(C[0, 1] - C[1, 0]) > 1e-9 * scale:
            raise ValueError("covariance must be symmetric")
        C = 0.5 * (C + C.T)
        if C[0, 0] <= 0 or C[1, 1] <= 0 or np.linalg.det(C) <= 0:
            raise NotPositiveDefinite("covariance is not SPD")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "covariance", C)


@dataclass(frozen=True)
class Ellipsoid:
    """3D ellipsoid: center, semi-axes paired with rotation columns."""

    center: np.ndarray
    semi_axes: np.ndarray
    rotation: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float).reshape(3)
        a = np.asarray(self.semi_axes, dtype=float).reshape(3)
        R = _check_rotation(self.rotation)
        if not np.all(a > 0):
            raise ValueError("semi-axes must be positive")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "semi_axes", a)
        object.__setattr__(self, "rotation", R)


@dataclass(frozen=True)
class DualQuadric:
    """Symmetric 4x4 dual-quadric matrix, defined up to scale."""

    matrix: np.ndarray

    def __post_init__(self):
        M = np.asarray(self.matrix, dtype=float).reshape(4, 4)
        scale = max(1.0, float(np.abs(M).max()))
        if np.abs(M - M.T).max() > 1e-9 * scale:
            raise ValueError("dual quadric matrix must be symmetric")
        M = 0.5 * (M + M.T)
        # scale-normalize: (3, 3) entry forced to -1 when nonzero
        m33 = M[3, 3]
        if abs(m33) > 1e-12 * scale:
            M = M / (-m33)
        object.__setattr__(self, "matrix", M)


@dataclass(frozen=True)
class BBox:
    """Axis-aligned pixel box."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=float).reshape(2)
        hi = np.asarray(self.max, dtype=float).reshape(2)
        if np.any(lo > hi):
            raise ValueError("box min must not exceed max")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def area(self) -> float:
        d = self.max - self.min
        return float(d[0] * d[1])


# ---------------------------------------------------------------------------
# Ellipse <-> Gaussian
# ---------------------------------------------------------------------------

def ellipse_to_gaussian(e: Ellipse2D) -> Gaussian2D:
    """Gaussian whose 1-sigma contour is the ellipse.

    The covariance is R(theta) diag(a^2, b^2) R(theta)^T, the inverse of the
    precision form R^T diag(1/a^2, 1/b^2) R.
    """
    R = rot2(e.angle)
    C = R @ np.diag(e.semi_axes**2) @ R.T
    return Gaussian2D(e.center.copy(), C)


def gaussian_to_ellipse(g: Gaussian2D) -> Ellipse2D:
    """Inverse of :func:`ellipse_to_gaussian` (angle modulo pi, major-first)."""
    vals, vecs = np.linalg.eigh(g.covariance)
    if vals[0] <= 0:
        raise NotPositiveDefinite("covariance is not SPD")
    major, minor = np.sqrt(vals[1]), np.sqrt(vals[0])
    if vals[1] - vals[0] <= 1e-12 * vals[1]:
        return Ellipse2D(g.mean.copy(), np.array([major, minor]), 0.0)
    v = vecs[:, 1]
    angle = float(np.arctan2(v[1], v[0]))
    return Ellipse2D(g.mean.copy(), np.array([major, minor]), angle)


def ellipse_outline_points(e: Ellipse2D, n: int) -> np.ndarray:
    """n points sampled uniformly in parameter along the ellipse outline."""
    t = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
    local = np.stack([e.semi_axes[0] * np.cos(t), e.semi_axes[1] * np.sin(t)], axis=1)
    return local @ rot2(e.angle).T + e.center


# ---------------------------------------------------------------------------
# Direct least-squares ellipse fitting
# ---------------------------------------------------------------------------

def fit_ellipse(contour: np.ndarray) -> Ellipse2D:
    """Conic-constrained least-squares ellipse fit of >= 5 contour points.

    Uses the numerically stable block formulation of the direct method with
    the ellipse discriminant constraint, after shifting the points to their
    centroid and scaling isotropically for conditioning.

    Raises:
        TooFewPoints: fewer than 5 points supplied.
        DegenerateFit: the solution is not a real ellipse (e.g. collinear
            input or a rank-deficient design).
    """
    pts = np.asarray(contour, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("contour must be an (N, 2) array")
    if pts.shape[0] < 5:
        raise TooFewPoints(f"need >= 5 points, got {pts.shape[0]}")

    mean = pts.mean(axis=0)
    rms = np.sqrt(np.mean(np.sum((pts - mean) ** 2, axis=1)))
    if rms < 1e-12:
        raise DegenerateFit("contour points are coincident")
    scale = np.sqrt(2.0) / rms
    x = (pts[:, 0] - mean[0]) * scale
    y = (pts[:, 1] - mean[1]) * scale

    D1 = np.stack([x * x, x * y, y * y], axis=1)
    D2 = np.stack([x, y, np.ones_like(x)], axis=1)
    S1 = D1.T @ D1
    S2 = D1.T @ D2
    S3 = D2.T @ D2
    try:
        T = -np.linalg.solve(S3, S2.T)
    except np.linalg.LinAlgError as exc:
        raise DegenerateFit("rank-deficient design (collinear points?)") from exc
    M = S1 + S2 @ T
    # inv(C) @ M for the constraint matrix C = [[0,0,2],[0,-1,0],[2,0,0]]
    M = np.stack([M[2] * 0.5, -M[1], M[0] * 0.5], axis=0)
    eigvals, eigvecs = np.linalg.eig(M)

    a1 = None
    for i in range(3):
        if np.abs(eigvals[i].imag) > 1e-8 * max(1.0, np.abs(eigvals[i].real)):
            continue
        v = eigvecs[:, i].real
        cond = 4.0 * v[0] * v[2] - v[1] ** 2
        if cond > 0:
            a1 = v
            break
    if a1 is None:
        raise DegenerateFit("no elliptical solution")
    a2 = T @ a1
    a, b, c, d, e, f = a1[0], a1[1], a1[2], a2[0], a2[1], a2[2]

    # conic matrix in normalized coordinates, mapped back to pixel coordinates
    Cn = np.array([[a, b / 2, d / 2], [b / 2, c, e / 2], [d / 2, e / 2, f]])
    H = np.array([[scale, 0.0, -mean[0] * scale],
                  [0.0, scale, -mean[1] * scale],
                  [0.0, 0.0, 1.0]])
    C_img = H.T @ Cn @ H
    return _conic_to_ellipse(C_img)


def _conic_to_ellipse(C: np.ndarray) -> Ellipse2D:
    """Ellipse parameters of a symmetric 3x3 point-conic matrix."""
    A = C[:2, :2]
    if A[0, 0] < 0:
        C = -C
        A = C[:2, :2]
    if np.linalg.det(A) <= 0:
        raise DegenerateFit("conic is not an ellipse")
    b = C[:2, 2]
    center = -np.linalg.solve(A, b)
    # constant term after completing the square
    k = float(center @ A @ center) - C[2, 2]
    if k <= 0:
        raise DegenerateFit("conic has no real points")
    cov = k * np.linalg.inv(A)
    return gaussian_to_ellipse(Gaussian2D(center, cov))


# ---------------------------------------------------------------------------
# Ellipsoids and dual quadrics
# ---------------------------------------------------------------------------

def ellipsoid_to_dual_quadric(e: Ellipsoid) -> DualQuadric:
    """Dual form T diag(a^2, b^2, c^2, -1) T^T with T the rigid placement."""
    T = np.eye(4)
    T[:3, :3] = e.rotation
    T[:3, 3] = e.center
    D = np.diag(np.concatenate([e.semi_axes**2, [-1.0]]))
    return DualQuadric(T @ D @ T.T)


def dual_quadric_to_ellipsoid(q: DualQuadric) -> Ellipsoid:
    """Inverse of :func:`ellipsoid_to_dual_quadric`.

    Raises NotAnEllipsoid when the (scale-normalized) matrix does not have
    the signature of a real ellipsoid.
    """
    M = q.matrix
    if M[3, 3] >= -0.5:  # normalization pins it to -1 for any valid ellipsoid
        raise NotAnEllipsoid("dual quadric has a vanishing homogeneous part")
    center = -M[:3, 3]
    E = M[:3, :3] + np.outer(center, center)
    vals, vecs = np.linalg.eigh(E)
    if vals[0] <= 0:
        raise NotAnEllipsoid("dual quadric signature is not ellipsoidal")
    if np.linalg.det(vecs) < 0:
        vecs = vecs.copy()
        vecs[:, 2] = -vecs[:, 2]
    return Ellipsoid(center, np.sqrt(vals), vecs)


def project_dual_quadric_gaussian(q: DualQuadric, pose: Pose, k: Intrinsics) -> Gaussian2D:
    """Project a dual quadric to the image as a Gaussian (mean, covariance).

    Computes C* = P Q* P^T with P = K [R | t], normalizes the dual conic and
    reads off the Gaussian of the corresponding ellipse.
    """
    M = q.matrix
    if M[3, 3] >= -0.5:
        raise NotAnEllipsoid("dual quadric has a vanishing homogeneous part")
    center = -M[:3, 3]
    depth = float(pose.transform(center)[2])
    if depth <= _MIN_DEPTH:
        raise BehindCamera(f"quadric center depth {depth:.3g}")
    P = k.K @ pose.matrix()[:3, :]
    C = P @ M @ P.T
    c22 = C[2, 2]
    if c22 >= -1e-12 * max(1.0, np.abs(C).max()):
        raise DegenerateConic("camera lies inside or grazes the quadric")
    C = C / (-c22)
    mean = -C[:2, 2]
    cov = C[:2, :2] + np.outer(mean, mean)
    cov = 0.5 * (cov + cov.T)
    if cov[0, 0] <= 0 or cov[1, 1] <= 0 or np.linalg.det(cov) <= 0:
        raise DegenerateConic("projected conic is not an ellipse")
    return Gaussian2D(mean, cov)


def project_dual_quadric(q: DualQuadric, pose: Pose, k: Intrinsics) -> Ellipse2D:
    """Project a dual quadric to its image ellipse (see the Gaussian variant)."""
    return gaussian_to_ellipse(project_dual_quadric_gaussian(q, pose, k))


def project_ellipsoid_gaussian(e: Ellipsoid, pose: Pose, k: Intrinsics) -> Gaussian2D:
    """Convenience composition of dual-quadric construction and projection."""
    return project_dual_quadric_gaussian(ellipsoid_to_dual_quadric(e), pose, k)


def project_point(p: np.ndarray, pose: Pose, k: Intrinsics) -> np.ndarray:
    """Pinhole projection of a world point; raises BehindCamera for depth <= 0."""
    pc = pose.transform(np.asarray(p, dtype=float))
    if pc[2] <= _MIN_DEPTH:
        raise BehindCamera(f"point depth {pc[2]:.3g}")
    return np.array([k.fx * pc[0] / pc[2] + k.cx, k.fy * pc[1] / pc[2] + k.cy])


def project_points(points: np.ndarray, pose: Pose, k: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection: returns (pixels (N,2), valid mask). No raising."""
    pc = pose.transform(np.asarray(points, dtype=float))
    z = pc[:, 2]
    valid = z > _MIN_DEPTH
    zs = np.where(valid, z, 1.0)
    px = np.stack([k.fx * pc[:, 0] / zs + k.cx, k.fy * pc[:, 1] / zs + k.cy], axis=1)
    return px, valid


def back_project(pixel: np.ndarray, depth: float, pose: Pose, k: Intrinsics) -> np.ndarray:
    """World point of a pixel at the given camera-frame depth."""
    u, v = pixel
    pc = np.array([(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0]) * float(depth)
    return pose.inverse().transform(pc)


# ---------------------------------------------------------------------------
# Boxes and the 2x2 SPD square root
# ---------------------------------------------------------------------------

def ellipse_bbox(e: Ellipse2D) -> BBox:
    """Tight axis-aligned box of an ellipse."""
    a, b = e.semi_axes
    c, s = np.cos(e.angle), np.sin(e.angle)
    half = np.array([np.sqrt(a**2 * c**2 + b**2 * s**2),
                     np.sqrt(a**2 * s**2 + b**2 * c**2)])
    return BBox(e.center - half, e.center + half)


def bbox_iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes; 0 when disjoint."""
    lo = np.maximum(a.min, b.min)
    hi = np.minimum(a.max, b.max)
    if np.any(hi <= lo):
        return 0.0
    inter = float(np.prod(hi - lo))
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def sqrtm_spd2(m: np.ndarray) -> np.ndarray:
    """Closed-form principal square root of a 2x2 SPD matrix.

    With s = sqrt(det m) and t = sqrt(trace m + 2 s), the root is
    (m + s I) / t; exact to machine precision by Cayley-Hamilton.
    """
    M = np.asarray(m, dtype=float)
    scale = max(1.0, float(np.abs(M).max()))
    if abs(M[0, 1] - M[1, 0]) > 1e-9 * scale:
        raise NotPositiveDefinite("matrix is not symmetric")
    det = M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]
    tr = M[0, 0] + M[1, 1]
    if det <= 0 or tr <= 0:
        raise NotPositiveDefinite("matrix is not positive definite")
    s = np.sqrt(det)
    t = np.sqrt(tr + 2.0 * s)
    out = (M + s * np.eye(2)) / t
    return 0.5 * (out + out.T)
