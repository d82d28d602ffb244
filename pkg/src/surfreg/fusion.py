"""Frame-to-world fusion and the accumulated scene map.

Each depth pixel is back-projected through the depth intrinsics, carried
into the world frame via the depth extrinsic and the device pose, and
colored by sampling the PV image at its reprojection.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidParameterError, OrderingError
from .geometry import PointCloud, backproject, project, voxel_downsample, voxel_key
from .stream import SensorFrame

OUT_OF_VIEW_GRAY = np.array([0.5, 0.5, 0.5])


def fuse_frame(frame: SensorFrame, delta_send: float = 0.01) -> PointCloud:
    """World-frame colored cloud from one frame, voxel-downsampled at
    delta_send. Points whose PV reprojection is out of view keep a
    sentinel gray color."""
    if delta_send <= 0:
        raise InvalidParameterError("delta_send must be positive")
    depth = frame.depth_map
    v_idx, u_idx = np.nonzero(depth > 0)
    if len(u_idx) == 0:
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3)))
    z = depth[v_idx, u_idx]
    uv = np.stack([u_idx, v_idx], axis=1).astype(np.float64)
    cam_pts = backproject(frame.intr_depth, uv, z)
    world = frame.depth_cam_to_world().apply(cam_pts)

    colors = np.tile(OUT_OF_VIEW_GRAY, (len(world), 1))
    pv_uv, in_view = project(frame.intr_pv, frame.pv_cam_to_world().invert(), world)
    if in_view.any():
        px = np.rint(pv_uv[in_view]).astype(int)
        px[:, 0] = np.clip(px[:, 0], 0, frame.intr_pv.width - 1)
        px[:, 1] = np.clip(px[:, 1], 0, frame.intr_pv.height - 1)
        colors[in_view] = frame.pv_image[px[:, 1], px[:, 0]] / 255.0
    return voxel_downsample(PointCloud(world, colors), delta_send)


# Voxel indices packed into one int64 (21 bits per axis, offset to stay
# positive) so map merging can use sorted-array searches instead of a
# Python dict. Covers +-2^20 voxels per axis.
_PACK = np.array([1, 2**21, 2**42], dtype=np.int64)
_PACK_OFFSET = 2**20


def _pack_keys(keys: np.ndarray) -> np.ndarray:
    return ((keys.astype(np.int64) + _PACK_OFFSET) * _PACK).sum(axis=1)


class SceneMap:
    """Accumulated world cloud, deduplicated at delta_map; repeated
    observations of a voxel are averaged (running mean), which shrinks
    sensor noise by the square root of the observation count. Single
    writer; snapshot() hands immutable copies to concurrent readers."""

    def __init__(self, delta_map: float = 0.01):
        if delta_map <= 0:
            raise InvalidParameterError("delta_map must be positive")
        self.delta_map = delta_map
        self._keys = np.zeros(0, dtype=np.int64)  # sorted packed voxel keys
        self._points = np.zeros((0, 3))
        self._colors = np.zeros((0, 3))
        self._counts = np.zeros(0, dtype=np.int64)
        self._stamps = np.zeros(0)
        self.latest_timestamp = -np.inf
        self.frames_fused = 0

    def __len__(self) -> int:
        return len(self._keys)

    def accumulate(self, cloud: PointCloud, t: float) -> None:
        if t < self.latest_timestamp:
            raise OrderingError(f"timestamp {t} precedes {self.latest_timestamp}")
        self.latest_timestamp = max(self.latest_timestamp, t)
        self.frames_fused += 1
        if len(cloud) == 0:
            return
        colors = cloud.colors if cloud.colors is not None else np.tile(OUT_OF_VIEW_GRAY, (len(cloud), 1))
        pk = _pack_keys(voxel_key(cloud.points, self.delta_map))
        uniq, inv, n_new = np.unique(pk, return_inverse=True, return_counts=True)
        p_sum = np.zeros((len(uniq), 3))
        c_sum = np.zeros((len(uniq), 3))
        np.add.at(p_sum, inv, cloud.points)
        np.add.at(c_sum, inv, colors)

        pos = np.searchsorted(self._keys, uniq)
        pos_c = np.minimum(pos, len(self._keys) - 1) if len(self._keys) else pos
        known = (len(self._keys) > 0) & (self._keys[pos_c] == uniq) if len(self._keys) else np.zeros(len(uniq), bool)
        rows = pos_c[known]
        if known.any():
            n_old = self._counts[rows][:, None]
            m = n_new[known][:, None]
            self._points[rows] = (self._points[rows] * n_old + p_sum[known]) / (n_old + m)
            self._colors[rows] = (self._colors[rows] * n_old + c_sum[known]) / (n_old + m)
            self._counts[rows] += n_new[known]
            self._stamps[rows] = t
        fresh = ~known
        if fresh.any():
            m = n_new[fresh][:, None]
            keys = np.concatenate([self._keys, uniq[fresh]])
            order = np.argsort(keys, kind="stable")
            self._keys = keys[order]
            self._points = np.concatenate([self._points, p_sum[fresh] / m])[order]
            self._colors = np.concatenate([self._colors, c_sum[fresh] / m])[order]
            self._counts = np.concatenate([self._counts, n_new[fresh]])[order]
            self._stamps = np.concatenate([self._stamps, np.full(int(fresh.sum()), t)])[order]

    def snapshot(self) -> PointCloud:
        if len(self._keys) == 0:
            return PointCloud(np.zeros((0, 3)), np.zeros((0, 3)))
        return PointCloud(self._points.copy(), self._colors.copy())

    def timestamps(self) -> np.ndarray:
        return self._stamps.copy()
