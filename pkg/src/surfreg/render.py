"""Synthetic RGB-D-pose renderer: substitutes for headset hardware.

Ray-casts triangle meshes into depth and PV rasters with known
ground-truth camera poses, supplying gt label maps and the ground-truth
model pose for evaluation.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidParameterError
from .geometry import CameraIntrinsics, RigidTransform
from .mesh import TriangleMesh
from .stream import DEPTH_DEFAULT, PV_DEFAULT, SensorFrame

_LIGHT_DIR = np.array([0.35, -0.45, -0.82])
_LIGHT_DIR = _LIGHT_DIR / np.linalg.norm(_LIGHT_DIR)


try:
    from numba import njit, prange

    @njit(parallel=True, cache=True, fastmath=False)
    def _cast_rays_nb(origin, dirs, cross_e2_e1, cross_e2_s, q, t_num):  # pragma: no cover
        n = dirs.shape[0]
        m = cross_e2_e1.shape[0]
        t_best = np.full(n, np.inf)
        idx_best = np.full(n, -1, dtype=np.int64)
        for i in prange(n):
            dx, dy, dz = dirs[i, 0], dirs[i, 1], dirs[i, 2]
            best = np.inf
            bidx = -1
            for j in range(m):
                a = dx * cross_e2_e1[j, 0] + dy * cross_e2_e1[j, 1] + dz * cross_e2_e1[j, 2]
                if abs(a) <= 1e-14:
                    continue
                f = 1.0 / a
                u = f * (dx * cross_e2_s[j, 0] + dy * cross_e2_s[j, 1] + dz * cross_e2_s[j, 2])
                if u < 0.0 or u > 1.0:
                    continue
                v = f * (dx * q[j, 0] + dy * q[j, 1] + dz * q[j, 2])
                if v < 0.0 or u + v > 1.0:
                    continue
                t = f * t_num[j]
                if 1e-9 < t < best:
                    best = t
                    bidx = j
            t_best[i] = best
            idx_best[i] = bidx
        return t_best, idx_best

except ImportError:  # pragma: no cover
    _cast_rays_nb = None


def _cast_rays(origin, dirs, v0, e1, e2, chunk=8192):
    """Moller-Trumbore with a common ray origin.

    Returns (t, tri_index) per ray; t = inf where nothing is hit. Ray
    parameter t equals camera-frame depth when dirs have unit z in the
    camera frame.
    """
    m = len(v0)
    n = len(dirs)
    t_best = np.full(n, np.inf)
    idx_best = np.full(n, -1, dtype=np.int64)
    if m == 0:
        return t_best, idx_best
    if _cast_rays_nb is not None:
        s = origin[None, :] - v0
        cross_e2_e1 = np.cross(e2, e1)
        cross_e2_s = np.cross(e2, s)
        q = np.cross(s, e1)
        t_num = np.einsum("mi,mi->m", e2, q)
        return _cast_rays_nb(
            origin, np.ascontiguousarray(dirs), cross_e2_e1, cross_e2_s, q, t_num
        )
    s = origin[None, :] - v0  # (M, 3)
    cross_e2_e1 = np.cross(e2, e1)
    cross_e2_s = np.cross(e2, s)
    q = np.cross(s, e1)
    t_num = np.einsum("mi,mi->m", e2, q)
    for lo in range(0, n, chunk):
        d = dirs[lo : lo + chunk]
        a = d @ cross_e2_e1.T  # (n, M), = -det
        with np.errstate(divide="ignore", invalid="ignore"):
            f = 1.0 / a
            u = f * (d @ cross_e2_s.T)
            v = f * (d @ q.T)
            t = f * t_num[None, :]
        ok = (np.abs(a) > 1e-14) & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 1e-9)
        t = np.where(ok, t, np.inf)
        j = np.argmin(t, axis=1)
        rows = np.arange(len(d))
        t_min = t[rows, j]
        t_best[lo : lo + chunk] = t_min
        idx_best[lo : lo + chunk] = np.where(np.isfinite(t_min), j, -1)
    return t_best, idx_best


def _pixel_dirs(K: CameraIntrinsics) -> np.ndarray:
    u, v = np.meshgrid(np.arange(K.width), np.arange(K.height))
    d = np.stack(
        [(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u, dtype=float)], axis=-1
    )
    return d.reshape(-1, 3)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """Camera pose (cam -> world) with +z forward and +y image-down."""
    eye = np.asarray(eye, float)
    f = np.asarray(target, float) - eye
    f = f / np.linalg.norm(f)
    up = np.asarray(up, float)
    if abs(np.dot(f, up)) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    x = np.cross(f, up)
    x /= np.linalg.norm(x)
    y = np.cross(f, x)
    R = np.stack([x, y, f], axis=1)
    return RigidTransform(R, eye)


def orbit_trajectory(center, radius: float, n: int, elevation_deg: float = 45.0,
                     start_deg: float = 0.0, span_deg: float = 360.0):
    """Camera poses on a circular arc looking at ``center``."""
    center = np.asarray(center, float)
    el = np.radians(elevation_deg)
    poses = []
    for i in range(n):
        az = np.radians(start_deg + span_deg * i / max(n, 1))
        eye = center + radius * np.array(
            [np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)]
        )
        poses.append(look_at(eye, center))
    return poses


def synth_render(
    mesh: TriangleMesh,
    model_pose: RigidTransform,
    camera_trajectory,
    noise_sigma: float = 0.0,
    intr_depth: CameraIntrinsics = DEPTH_DEFAULT,
    intr_pv: CameraIntrinsics = PV_DEFAULT,
    extr_depth_to_ref: RigidTransform | None = None,
    extr_pv_to_ref: RigidTransform | None = None,
    distractors=(),
    noise_model: str = "constant",
    seed: int = 0,
    dt: float = 0.2,
    t0: float = 0.0,
    target_color=(205, 165, 120),
    distractor_color=(95, 115, 160),
    background_color=(38, 38, 48),
    shading: float = 0.25,
):
    """Render a frame sequence of the target mesh plus optional distractors.

    Depth noise is zero-mean Gaussian per pixel: sigma(z) = noise_sigma for
    the "constant" model, noise_sigma*(z/1m)^2 for "quadratic"; noisy depth
    is clamped at 0 (invalid). The gt label map marks PV pixels whose ray
    hits the target before any distractor.
    """
    if len(camera_trajectory) == 0:
        raise InvalidParameterError("empty camera trajectory")
    if noise_sigma < 0:
        raise InvalidParameterError("noise_sigma must be >= 0")
    if noise_model not in ("constant", "quadratic"):
        raise InvalidParameterError(f"unknown noise model {noise_model!r}")
    extr_depth_to_ref = extr_depth_to_ref or RigidTransform.identity()
    extr_pv_to_ref = extr_pv_to_ref or RigidTransform.identity()
    rng = np.random.default_rng(seed)

    pieces = [mesh.transformed(model_pose)] + [m.transformed(p) for m, p in distractors]
    v0_list, e1_list, e2_list, tag_list, nrm_list = [], [], [], [], []
    for tag, piece in enumerate(pieces):
        a, b, c = piece.triangle_corners()
        v0_list.append(a)
        e1_list.append(b - a)
        e2_list.append(c - a)
        tag_list.append(np.full(len(a), tag))
        nrm_list.append(piece.triangle_normals())
    v0 = np.vstack(v0_list)
    e1 = np.vstack(e1_list)
    e2 = np.vstack(e2_list)
    tags = np.concatenate(tag_list)
    normals = np.vstack(nrm_list)
    colors = np.array([target_color] + [distractor_color] * len(distractors), float)

    depth_dirs = _pixel_dirs(intr_depth)
    pv_dirs = _pixel_dirs(intr_pv)
    frames = []
    for i, pose in enumerate(camera_trajectory):
        depth_cam = pose @ extr_depth_to_ref
        pv_cam = pose @ extr_pv_to_ref

        t_hit, _ = _cast_rays(depth_cam.translation, depth_dirs @ depth_cam.rotation.T, v0, e1, e2)
        depth = np.where(np.isfinite(t_hit), t_hit, 0.0)
        if noise_sigma > 0:
            sigma = np.where(
                depth > 0,
                noise_sigma if noise_model == "constant" else noise_sigma * depth**2,
                0.0,
            )
            depth = np.maximum(depth + rng.standard_normal(depth.shape) * sigma, 0.0)
        depth = depth.reshape(intr_depth.height, intr_depth.width)

        t_pv, idx_pv = _cast_rays(pv_cam.translation, pv_dirs @ pv_cam.rotation.T, v0, e1, e2)
        hit = idx_pv >= 0
        pv = np.tile(np.asarray(background_color, float), (len(pv_dirs), 1))
        if hit.any():
            n_hit = normals[idx_pv[hit]]
            lambert = np.maximum(0.0, -(n_hit @ _LIGHT_DIR))
            # shading mixes a diffuse term into the flat surface color;
            # 0 renders each surface as a single uniform tone
            shade = (1.0 - shading) + shading * lambert
            pv[hit] = colors[tags[idx_pv[hit]]] * shade[:, None]
        pv = np.clip(np.rint(pv), 0, 255).astype(np.uint8).reshape(intr_pv.height, intr_pv.width, 3)
        label = (hit & (tags[np.maximum(idx_pv, 0)] == 0)).reshape(intr_pv.height, intr_pv.width)

        frames.append(
            SensorFrame(
                timestamp=t0 + i * dt,
                pv_image=pv,
                depth_map=depth,
                pose_ref_to_world=pose,
                extr_depth_to_ref=extr_depth_to_ref,
                extr_pv_to_ref=extr_pv_to_ref,
                intr_depth=intr_depth,
                intr_pv=intr_pv,
                gt_label_map=label,
                gt_model_pose=model_pose,
            )
        )
    return frames
