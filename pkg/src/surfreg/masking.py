"""Target-surface tracking as a sparse voxel mask.

A promptable 2D segmenter seeds the mask from one frame; afterwards the
mask is propagated through a 3D-2D feedback loop (project mask ->
prompt segmenter -> depth-refine -> gate on IoU -> grow at the frontier)
and regularized by occupancy carving.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Protocol

import numpy as np
from scipy.ndimage import binary_closing, binary_erosion, distance_transform_cdt
from scipy.spatial import cKDTree

from .errors import EmptyInitializationError, EmptySurfaceError, InvalidParameterError
from .geometry import PointCloud, backproject, estimate_normals, project, voxel_key
from .stream import SensorFrame

log = logging.getLogger(__name__)

_NEIGHBORS_26 = np.array(
    [
        (dx, dy, dz)
        for dx in (-1, 0, 1)
        for dy in (-1, 0, 1)
        for dz in (-1, 0, 1)
        if (dx, dy, dz) != (0, 0, 0)
    ],
    dtype=np.int64,
)


@dataclass(frozen=True)
class SegConfig:
    tau_iou: float = 0.08
    rho_max: float = 0.35
    k_obs: int = 2
    segment_interval: float = 0.2
    depth_gate: float = 0.03
    voxel_res: float = 0.02

    def __post_init__(self):
        if not (0 < self.tau_iou <= 1):
            raise InvalidParameterError("tau_iou must be in (0, 1]")
        if self.rho_max <= 0:
            raise InvalidParameterError("rho_max must be positive")
        if self.k_obs < 1:
            raise InvalidParameterError("k_obs must be >= 1")
        if self.voxel_res <= 0 or self.depth_gate <= 0:
            raise InvalidParameterError("voxel_res and depth_gate must be positive")


class Segmenter(Protocol):
    """Promptable 2D segmenter: image + point prompts -> (mask, confidence)."""

    def segment(self, image: np.ndarray, prompts) -> tuple[np.ndarray, float]:
        ...


class OracleSegmenter:
    """Test double returning the frame's ground-truth label map.

    ``observe(frame)`` must be called with the frame whose image will be
    segmented next. With noise_radius_px = 0 the output equals the gt
    label map exactly; otherwise the border is eroded by that radius.
    """

    def __init__(self, noise_radius_px: int = 0):
        self.noise_radius_px = noise_radius_px
        self._frame: SensorFrame | None = None

    def observe(self, frame: SensorFrame) -> None:
        self._frame = frame

    def segment(self, image, prompts):
        if self._frame is None or self._frame.gt_label_map is None:
            raise InvalidParameterError("oracle segmenter needs a frame with gt_label_map")
        mask = self._frame.gt_label_map.copy()
        if self.noise_radius_px > 0:
            mask = binary_erosion(mask, iterations=self.noise_radius_px)
        return mask, 1.0


# Voxel indices packed into one int64 (21 bits per axis, offset to stay
# positive) so adjacency and dedup checks can run on flat arrays.
_PACK = np.array([1, 2**21, 2**42], dtype=np.int64)
_PACK_OFFSET = 2**20


def _pack_keys(keys: np.ndarray) -> np.ndarray:
    return ((np.asarray(keys, dtype=np.int64) + _PACK_OFFSET) * _PACK).sum(axis=1)


class VoxelMask:
    """Sparse voxel store with per-voxel occupied/free counters plus a
    pending map for voxels awaiting their k_obs-th observation."""

    def __init__(self, resolution: float):
        if resolution <= 0:
            raise InvalidParameterError("voxel resolution must be positive")
        self.resolution = resolution
        self.occ: dict[tuple, int] = {}
        self.free: dict[tuple, int] = {}
        self.pending: dict[tuple, int] = {}

    def __len__(self) -> int:
        return len(self.occ)

    def copy(self) -> "VoxelMask":
        out = VoxelMask(self.resolution)
        out.occ = dict(self.occ)
        out.free = dict(self.free)
        out.pending = dict(self.pending)
        return out

    def active_keys(self) -> np.ndarray:
        if not self.occ:
            return np.zeros((0, 3), dtype=np.int64)
        return np.array(sorted(self.occ), dtype=np.int64)

    def centers(self, keys=None) -> np.ndarray:
        keys = self.active_keys() if keys is None else keys
        return (np.asarray(keys, dtype=np.float64) + 0.5) * self.resolution

    def is_active(self, key) -> bool:
        return tuple(key) in self.occ

    def activate(self, key, occ: int = 1) -> None:
        key = tuple(key)
        self.occ[key] = occ
        self.free.setdefault(key, 0)
        self.pending.pop(key, None)

    def carve_violators(self, rho_max: float) -> list:
        """Remove voxels violating the retention condition; permanent."""
        gone = [k for k in self.occ if self.free.get(k, 0) / (self.occ[k] + 1) > rho_max]
        for k in gone:
            del self.occ[k]
            self.free.pop(k, None)
        return gone

    def frontier_keys(self) -> np.ndarray:
        """Active voxels 26-adjacent to at least one inactive voxel."""
        keys = self.active_keys()
        if not len(keys):
            return keys.reshape(-1, 3)
        active = np.sort(_pack_keys(keys))
        on_frontier = np.zeros(len(keys), dtype=bool)
        for d in _NEIGHBORS_26:
            nb = _pack_keys(keys + d)
            pos = np.searchsorted(active, nb)
            pos_c = np.minimum(pos, len(active) - 1)
            on_frontier |= active[pos_c] != nb
        return keys[on_frontier]

    def voxel_set(self) -> frozenset:
        return frozenset(self.occ)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def depth_in_pv(frame: SensorFrame) -> np.ndarray:
    """Depth map reprojected into the PV raster (z in the PV camera frame,
    0 = no sample). Each depth point is splatted over a 2x2 block with a
    min z-buffer to cover the resolution gap between the two rasters."""
    out = np.zeros((frame.intr_pv.height, frame.intr_pv.width))
    depth = frame.depth_map
    v_idx, u_idx = np.nonzero(depth > 0)
    if len(u_idx) == 0:
        return out
    z = depth[v_idx, u_idx]
    cam_pts = backproject(frame.intr_depth, np.stack([u_idx, v_idx], 1).astype(float), z)
    world = frame.depth_cam_to_world().apply(cam_pts)
    pv_cam = frame.pv_cam_to_world().invert().apply(world)
    uv, valid = project(frame.intr_pv, frame.pv_cam_to_world().invert(), world)
    zbuf = np.full(out.shape, np.inf)
    px = np.rint(uv[valid]).astype(int)
    zv = pv_cam[valid][:, 2]
    for du in (0, 1):
        for dv in (0, 1):
            uu = np.clip(px[:, 0] + du, 0, frame.intr_pv.width - 1)
            vv = np.clip(px[:, 1] + dv, 0, frame.intr_pv.height - 1)
            np.minimum.at(zbuf, (vv, uu), zv)
    hit = np.isfinite(zbuf)
    out[hit] = zbuf[hit]
    return out


def init_mask(X_t: PointCloud, mask2d: np.ndarray, frame: SensorFrame, cfg: SegConfig) -> VoxelMask:
    """Seed the voxel mask from a 2D segmentation of the current frame."""
    mask2d = np.asarray(mask2d, dtype=bool)
    uv, valid = project(frame.intr_pv, frame.pv_cam_to_world().invert(), X_t.points)
    keep = np.zeros(len(X_t), dtype=bool)
    if valid.any():
        px = np.rint(uv[valid]).astype(int)
        px[:, 0] = np.clip(px[:, 0], 0, frame.intr_pv.width - 1)
        px[:, 1] = np.clip(px[:, 1], 0, frame.intr_pv.height - 1)
        keep[valid] = mask2d[px[:, 1], px[:, 0]]
    if not keep.any():
        raise EmptyInitializationError("no points project inside the initial mask")
    mask = VoxelMask(cfg.voxel_res)
    for key in sorted(map(tuple, voxel_key(X_t.points[keep], cfg.voxel_res))):
        if not mask.is_active(key):
            mask.activate(key, occ=1)
    return mask


def project_mask(mask: VoxelMask, frame: SensorFrame, cfg: SegConfig, dpv: np.ndarray | None = None) -> np.ndarray:
    """Rasterize active voxel centers into the PV frame.

    Each visible voxel is drawn as its projected footprint (a square of
    the voxel's image-space size, at least one pixel) so the silhouette is
    solid rather than a sparse dot grid. A voxel is visible when its
    center depth is within depth_gate of the frame's depth at its pixel
    (no test where depth is unavailable). The raster is morphologically
    closed (3x3) to fill remaining pinholes.
    """
    out = np.zeros((frame.intr_pv.height, frame.intr_pv.width), dtype=bool)
    if len(mask) == 0:
        return out
    centers = mask.centers()
    world_to_pv = frame.pv_cam_to_world().invert()
    uv, valid = project(frame.intr_pv, world_to_pv, centers)
    if not valid.any():
        return out
    if dpv is None:
        dpv = depth_in_pv(frame)
    px = np.rint(uv[valid]).astype(int)
    px[:, 0] = np.clip(px[:, 0], 0, frame.intr_pv.width - 1)
    px[:, 1] = np.clip(px[:, 1], 0, frame.intr_pv.height - 1)
    z = world_to_pv.apply(centers[valid])[:, 2]
    d = dpv[px[:, 1], px[:, 0]]
    visible = (d == 0) | (np.abs(z - d) <= cfg.depth_gate)
    half = np.maximum(
        np.rint(0.5 * mask.resolution * frame.intr_pv.fx / np.maximum(z, 1e-6)).astype(int) - 0,
        0,
    )
    h, w = out.shape
    for (u, v), hh in zip(px[visible], half[visible]):
        out[max(v - hh, 0) : min(v + hh + 1, h), max(u - hh, 0) : min(u + hh + 1, w)] = True
    return binary_closing(out, structure=np.ones((3, 3), dtype=bool))


def select_prompt(proj: np.ndarray):
    """Interior pixel maximizing Chebyshev distance to background; ties
    break toward the smallest (row, col). Returns (u, v) or None."""
    proj = np.asarray(proj, dtype=bool)
    if not proj.any():
        return None
    padded = np.pad(proj, 1)
    dist = distance_transform_cdt(padded, metric="chessboard")[1:-1, 1:-1]
    flat = int(np.argmax(dist))
    row, col = np.unravel_index(flat, dist.shape)
    return (int(col), int(row))


def refine_mask2d(raw: np.ndarray, frame: SensorFrame, cfg: SegConfig, dpv: np.ndarray | None = None) -> np.ndarray:
    """Trim segmentation bleed across depth discontinuities: drop mask
    pixels whose depth differs from the 5x5 mask-neighborhood median by
    more than depth_gate. Pixels without a depth sample are kept."""
    raw = np.asarray(raw, dtype=bool)
    if not raw.any():
        return raw.copy()
    if dpv is None:
        dpv = depth_in_pv(frame)
    # Work on the mask's bounding box only; the median is undefined (and
    # unneeded) away from the mask.
    rows = np.flatnonzero(raw.any(axis=1))
    cols = np.flatnonzero(raw.any(axis=0))
    r0, r1 = rows[0], rows[-1] + 1
    c0, c1 = cols[0], cols[-1] + 1
    raw_c = raw[r0:r1, c0:c1]
    dpv_c = dpv[r0:r1, c0:c1]
    vals = np.where(raw_c & (dpv_c > 0), dpv_c, np.nan)
    padded = np.pad(vals, 2, constant_values=np.nan)
    win = np.lib.stride_tricks.sliding_window_view(padded, (5, 5))
    med = _nanmedian_lastaxis(win.reshape(win.shape[0], win.shape[1], 25))
    out = raw.copy()
    have_depth = raw_c & (dpv_c > 0) & ~np.isnan(med)
    drop = have_depth & (np.abs(dpv_c - med) > cfg.depth_gate)
    out[r0:r1, c0:c1] &= ~drop
    return out


def _nanmedian_lastaxis(arr: np.ndarray) -> np.ndarray:
    """nanmedian over the last axis via a single sort (NaNs sort last);
    all-NaN rows give NaN. Much faster than np.nanmedian's masked path."""
    srt = np.sort(arr, axis=-1)
    cnt = np.count_nonzero(~np.isnan(arr), axis=-1)
    safe = np.maximum(cnt, 1)
    lo = np.take_along_axis(srt, ((safe - 1) // 2)[..., None], axis=-1)[..., 0]
    hi = np.take_along_axis(srt, (safe // 2)[..., None], axis=-1)[..., 0]
    med = (lo + hi) / 2.0
    return np.where(cnt > 0, med, np.nan)


def propagate(
    mask: VoxelMask,
    frame: SensorFrame,
    segmenter: Segmenter,
    map_snapshot: PointCloud,
    cfg: SegConfig,
):
    """One 3D-2D feedback step. Returns (mask, accepted).

    The input mask is never modified; on rejection it is returned as-is.
    """
    dpv = depth_in_pv(frame)
    proj = project_mask(mask, frame, cfg, dpv=dpv)
    prompt = select_prompt(proj)
    if prompt is None:
        return mask, False
    if hasattr(segmenter, "observe"):
        segmenter.observe(frame)
    try:
        raw, _conf = segmenter.segment(frame.pv_image, [(prompt, True)])
    except Exception as e:  # noqa: BLE001 - segmenter is third-party code
        log.error("segmenter failed at t=%.3f: %s", frame.timestamp, e)
        return mask, False
    refined = refine_mask2d(raw, frame, cfg, dpv=dpv)
    if iou(refined, proj) < cfg.tau_iou:
        return mask, False

    new = mask.copy()
    world_to_pv = frame.pv_cam_to_world().invert()
    r = cfg.voxel_res

    # frontier growth: refined-mask depth pixels near the active frontier
    depth = frame.depth_map
    v_idx, u_idx = np.nonzero(depth > 0)
    frontier = new.frontier_keys()
    if len(u_idx) and len(frontier):
        z = depth[v_idx, u_idx]
        cam_pts = backproject(frame.intr_depth, np.stack([u_idx, v_idx], 1).astype(float), z)
        world = frame.depth_cam_to_world().apply(cam_pts)
        uv, valid = project(frame.intr_pv, world_to_pv, world)
        px = np.rint(uv).astype(int)
        px[:, 0] = np.clip(px[:, 0], 0, frame.intr_pv.width - 1)
        px[:, 1] = np.clip(px[:, 1], 0, frame.intr_pv.height - 1)
        inside = valid & refined[px[:, 1], px[:, 0]]
        if inside.any():
            cand = world[inside]
            near = cKDTree(new.centers(frontier)).query(cand, k=1)[0] <= 2 * r
            near_keys = voxel_key(cand[near], r)
            _, first = np.unique(_pack_keys(near_keys), return_index=True)
            for key in sorted(map(tuple, near_keys[first])):
                if new.is_active(key):
                    continue
                new.pending[key] = new.pending.get(key, 0) + 1
                if new.pending[key] >= cfg.k_obs:
                    new.activate(key, occ=1)

    # occupancy bookkeeping on active voxels
    keys = new.active_keys()
    if len(keys):
        centers = new.centers(keys)
        uv, valid = project(frame.intr_pv, world_to_pv, centers)
        px = np.rint(uv).astype(int)
        px[:, 0] = np.clip(px[:, 0], 0, frame.intr_pv.width - 1)
        px[:, 1] = np.clip(px[:, 1], 0, frame.intr_pv.height - 1)
        z = world_to_pv.apply(centers)[:, 2]
        d = np.where(valid, dpv[px[:, 1], px[:, 0]], 0.0)
        in_mask = valid & refined[px[:, 1], px[:, 0]]
        # Occupied evidence needs the mask pixel's depth to agree with the
        # voxel (no-return pixels get the benefit of the doubt). A voxel
        # clearly in front of a measured surface is free even inside the
        # mask: the ray passed through it. Outside the mask a voxel is free
        # unless depth shows a nearer occluder; no depth return means the
        # ray hit nothing in range, so the voxel cannot be hidden behind
        # anything. A thin halo around the mask is neutral, since
        # silhouette jitter there would otherwise erode true boundary
        # voxels.
        gate = cfg.depth_gate
        seen_occ = in_mask & ((d == 0) | (np.abs(z - d) <= gate))
        thru = valid & (d > 0) & (z < d - 2 * gate)
        # "Clearly outside" is per voxel: the pixel gap to the mask must
        # exceed the voxel's own projected radius, else quantization of a
        # true boundary voxel could read as free.
        gap = distance_transform_cdt(~refined, metric="chessboard")
        margin = frame.intr_pv.fx * r * 0.87 / np.maximum(z, 1e-6) + 2.0
        outside = valid & (gap[px[:, 1], px[:, 0]] > margin)
        seen_free = thru | (outside & ((d == 0) | (z <= d + gate)))
        for i, key in enumerate(map(tuple, keys)):
            if seen_occ[i]:
                new.occ[key] += 1
            elif seen_free[i]:
                new.free[key] = new.free.get(key, 0) + 1
        new.carve_violators(cfg.rho_max)
    return new, True


def regularize(mask: VoxelMask, cfg: SegConfig) -> VoxelMask:
    """Carve voxels whose free/occupied ratio exceeds rho_max (Eq. 4 gate);
    removals are permanent."""
    out = mask.copy()
    out.carve_violators(cfg.rho_max)
    return out


def extract_surface(mask: VoxelMask, map_snapshot: PointCloud, normal_k: int = 30) -> PointCloud:
    """Map points whose voxel is active, with estimated outward normals."""
    if len(mask) == 0:
        raise EmptySurfaceError("voxel mask is empty")
    active = set(map(tuple, mask.active_keys()))
    keys = voxel_key(map_snapshot.points, mask.resolution)
    keep = np.fromiter((tuple(k) in active for k in keys), dtype=bool, count=len(keys))
    if not keep.any():
        raise EmptySurfaceError("no map points fall inside the active mask")
    cloud = map_snapshot.select(keep)
    k = min(normal_k, len(cloud))
    if k >= 3:
        cloud = estimate_normals(cloud, k=k)
    return cloud


class SurfaceTracker:
    """Drives initialization and cadence-gated propagation over a frame
    stream. Single writer of its VoxelMask; snapshots may be shared."""

    def __init__(self, segmenter: Segmenter, cfg: SegConfig, init_prompts):
        self.segmenter = segmenter
        self.cfg = cfg
        self.init_prompts = list(init_prompts)
        self.mask: VoxelMask | None = None
        self._last_seg_time = -np.inf

    def process(self, frame: SensorFrame, frame_cloud: PointCloud, map_snapshot: PointCloud) -> dict:
        """Returns per-frame stats: {initialized, attempted, accepted, voxels}."""
        stats = {"initialized": self.mask is not None, "attempted": False,
                 "accepted": False, "voxels": 0 if self.mask is None else len(self.mask)}
        due = frame.timestamp - self._last_seg_time >= self.cfg.segment_interval - 1e-9
        if self.mask is None:
            if not due:
                return stats
            self._last_seg_time = frame.timestamp
            stats["attempted"] = True
            if hasattr(self.segmenter, "observe"):
                self.segmenter.observe(frame)
            try:
                mask2d, _ = self.segmenter.segment(frame.pv_image, self.init_prompts)
                self.mask = init_mask(frame_cloud, mask2d, frame, self.cfg)
                stats["accepted"] = True
                stats["initialized"] = True
            except Exception as e:  # noqa: BLE001 - re-prompt on next frame
                log.warning("mask initialization failed at t=%.3f: %s", frame.timestamp, e)
        elif due:
            self._last_seg_time = frame.timestamp
            stats["attempted"] = True
            self.mask, accepted = propagate(self.mask, frame, self.segmenter, map_snapshot, self.cfg)
            stats["accepted"] = accepted
        stats["voxels"] = 0 if self.mask is None else len(self.mask)
        return stats
