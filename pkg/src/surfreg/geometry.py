"""Rigid transforms, pinhole cameras, point clouds and basic spatial ops.

Everything downstream (fusion, masking, registration, evaluation) is built
on the primitives in this module. All types are immutable values; all
functions are pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    DegenerateFitError,
    InsufficientPointsError,
    InvalidDepthError,
    InvalidParameterError,
)

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) element: x -> R @ x + t. Rotation must be proper to 1e-9."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-7:
            raise InvalidParameterError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-7:
            raise InvalidParameterError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        return RigidTransform(m[:3, :3], m[:3, 3])

    @staticmethod
    def from_axis_angle(axis, angle_rad, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        axis = np.asarray(axis, dtype=np.float64)
        n = np.linalg.norm(axis)
        if n == 0:
            raise InvalidParameterError("zero rotation axis")
        return RigidTransform(rodrigues(axis / n * angle_rad), np.asarray(translation, float))

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self @ other)(x) = self(other(x))."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return self.compose(other)

    def invert(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        single = pts.ndim == 1
        out = np.atleast_2d(pts) @ self.rotation.T + self.translation
        return out[0] if single else out

    def rotate(self, vectors) -> np.ndarray:
        v = np.asarray(vectors, dtype=np.float64)
        single = v.ndim == 1
        out = np.atleast_2d(v) @ self.rotation.T
        return out[0] if single else out


def rodrigues(rotvec) -> np.ndarray:
    """Rotation matrix from an axis-angle vector (angle = norm)."""
    w = np.asarray(rotvec, dtype=np.float64)
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        K = skew(w)
        return np.eye(3) + K  # first-order; exact at theta == 0
    k = w / theta
    K = skew(k)
    return np.eye(3) + np.sin(theta) * K + (1.0 - np.cos(theta)) * (K @ K)


def skew(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])


def rotation_angle_deg(R_a: np.ndarray, R_b: np.ndarray) -> float:
    """Geodesic angle between two rotations, degrees."""
    c = (np.trace(R_a.T @ R_b) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidParameterError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidParameterError("principal point outside image")


@dataclass(frozen=True)
class PointCloud:
    """World- or camera-frame points with optional colors and unit normals."""

    points: np.ndarray
    colors: np.ndarray | None = None
    normals: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        for name in ("colors", "normals"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr, dtype=np.float64).reshape(-1, 3)
                if len(arr) != len(pts):
                    raise InvalidParameterError(f"{name} length != points length")
                object.__setattr__(self, name, arr)
        if self.normals is not None and len(self.normals):
            lens = np.linalg.norm(self.normals, axis=1)
            if np.abs(lens - 1.0).max() > 1e-6:
                raise InvalidParameterError("normals are not unit length")

    def __len__(self) -> int:
        return len(self.points)

    def transformed(self, T: RigidTransform) -> "PointCloud":
        normals = None if self.normals is None else T.rotate(self.normals)
        return PointCloud(T.apply(self.points), self.colors, normals)

    def select(self, idx) -> "PointCloud":
        return PointCloud(
            self.points[idx],
            None if self.colors is None else self.colors[idx],
            None if self.normals is None else self.normals[idx],
        )


class SpatialIndex:
    """Exact nearest-neighbor index (k-d tree) over a fixed point set."""

    def __init__(self, points):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        self.points = pts
        self._tree = cKDTree(pts)

    def __len__(self) -> int:
        return len(self.points)

    def query(self, points, k: int = 1):
        """Distances and indices of the k nearest neighbors per query point."""
        d, i = self._tree.query(np.atleast_2d(np.asarray(points, float)), k=k, workers=-1)
        return d, i

    def query_radius(self, points, radius: float):
        """Lists of neighbor indices within radius per query point."""
        return self._tree.query_ball_point(
            np.atleast_2d(np.asarray(points, float)), radius
        )


def backproject(K: CameraIntrinsics, uv, z):
    """Pixel(s) + depth(s) -> camera-frame 3D point(s) on the viewing ray."""
    uv_arr = np.asarray(uv, dtype=np.float64)
    z_arr = np.asarray(z, dtype=np.float64)
    single = uv_arr.ndim == 1
    uv2 = np.atleast_2d(uv_arr)
    zf = np.atleast_1d(z_arr)
    if np.any(zf <= 0):
        raise InvalidDepthError("depth must be positive")
    x = (uv2[:, 0] - K.cx) * zf / K.fx
    y = (uv2[:, 1] - K.cy) * zf / K.fy
    out = np.stack([x, y, zf], axis=1)
    return out[0] if single else out


def project(K: CameraIntrinsics, T_world_to_cam: RigidTransform, points):
    """World point(s) -> pixel coordinates plus in-view mask.

    A point is out of view when it is behind the camera (z <= 0) or its
    projection falls outside [0, width) x [0, height).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    cam = T_world_to_cam.apply(pts)
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * cam[:, 0] / z + K.cx
        v = K.fy * cam[:, 1] / z + K.cy
    uv = np.stack([u, v], axis=1)
    valid = (z > 0) & (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
    return uv, valid


def project_point(K: CameraIntrinsics, T_world_to_cam: RigidTransform, point):
    """Single-point convenience wrapper: pixel 2-vector, or None if out of view."""
    uv, valid = project(K, T_world_to_cam, point)
    return uv[0] if valid[0] else None


def voxel_key(points, delta: float) -> np.ndarray:
    """Integer voxel index per point; boundary points go to the higher index."""
    return np.floor(np.asarray(points, float) / delta).astype(np.int64)


def voxel_downsample(cloud: PointCloud, delta: float) -> PointCloud:
    """One point per occupied voxel of side delta, at the member centroid."""
    if delta <= 0:
        raise InvalidParameterError("voxel size must be positive")
    if len(cloud) == 0:
        return cloud
    keys = voxel_key(cloud.points, delta)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    n = len(uniq)
    counts = np.bincount(inv, minlength=n).astype(np.float64)

    def mean_by_voxel(values):
        acc = np.zeros((n, 3))
        np.add.at(acc, inv, values)
        return acc / counts[:, None]

    pts = mean_by_voxel(cloud.points)
    colors = None if cloud.colors is None else mean_by_voxel(cloud.colors)
    normals = None
    if cloud.normals is not None:
        normals = mean_by_voxel(cloud.normals)
        lens = np.linalg.norm(normals, axis=1)
        lens[lens < 1e-12] = 1.0
        normals = normals / lens[:, None]
    return PointCloud(pts, colors, normals)


def estimate_normals(cloud: PointCloud, k: int = 30, viewpoint=None) -> PointCloud:
    """Per-point normals from k-NN covariance (smallest eigenvector).

    Normals are oriented toward ``viewpoint`` when given, otherwise away
    from the cloud centroid (outward for roughly convex surfaces).
    """
    if k < 3 or len(cloud) < k:
        raise InsufficientPointsError(f"need at least k={k} points, have {len(cloud)}")
    pts = cloud.points
    index = SpatialIndex(pts)
    _, nbr = index.query(pts, k=k)
    nbr_pts = pts[nbr]  # (N, k, 3)
    centered = nbr_pts - nbr_pts.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    if viewpoint is not None:
        toward = np.asarray(viewpoint, float) - pts
    else:
        toward = pts - pts.mean(axis=0)
    flip = np.einsum("ni,ni->n", normals, toward) < 0
    normals[flip] *= -1.0
    normals /= np.linalg.norm(normals, axis=1)[:, None]
    return PointCloud(pts, cloud.colors, normals)


def rigid_fit(src, dst):
    """Closed-form least-squares rigid alignment (SVD of the centered
    cross-covariance, reflection-corrected).

    Returns (transform, rms) minimizing sum ||T(src_i) - dst_i||^2.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if len(src) != len(dst):
        raise DegenerateFitError("source/target length mismatch")
    if len(src) < 3:
        raise DegenerateFitError("need at least 3 point pairs")
    return weighted_rigid_fit(src, dst, np.ones(len(src)))


def weighted_rigid_fit(src, dst, weights):
    """Weighted variant of rigid_fit; weights must be non-negative."""
    w = np.asarray(weights, dtype=np.float64)
    wsum = w.sum()
    if wsum <= 0:
        raise DegenerateFitError("all weights zero")
    wn = w / wsum
    c_src = wn @ src
    c_dst = wn @ dst
    H = (src - c_src).T @ ((dst - c_dst) * wn[:, None])
    U, S, Vt = np.linalg.svd(H)
    if S[1] < 1e-12 * max(S[0], 1e-300):
        raise DegenerateFitError("rank-deficient point configuration")
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d])
    R = Vt.T @ D @ U.T
    t = c_dst - R @ c_src
    T = RigidTransform(R, t)
    res = T.apply(src) - dst
    rms = float(np.sqrt((wn * np.einsum("ni,ni->n", res, res)).sum()))
    return T, rms
