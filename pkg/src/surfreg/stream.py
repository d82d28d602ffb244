"""Frame data model and the on-disk recording format.

A recording is a directory with `manifest.jsonl` (one frame per line),
`pv/NNNNNN.png` (8-bit RGB), `depth/NNNNNN.png` (16-bit grayscale,
millimeters, 0 = invalid) and optional `label/NNNNNN.png` (8-bit 0/255).
Pose and extrinsic matrices are stored row-major 4x4; poses map
reference-frame coordinates to world.
"""

from __future__ import annotations

import json
import os
import shutil
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import FormatError, InvalidParameterError, RecordingIOError
from .geometry import CameraIntrinsics, RigidTransform

PV_DEFAULT = CameraIntrinsics(fx=450.0, fy=450.0, cx=320.0, cy=180.0, width=640, height=360)
DEPTH_DEFAULT = CameraIntrinsics(fx=200.0, fy=200.0, cx=160.0, cy=144.0, width=320, height=288)


@dataclass(frozen=True)
class SensorFrame:
    timestamp: float
    pv_image: np.ndarray  # (H, W, 3) uint8
    depth_map: np.ndarray  # (H, W) float64 meters, 0 = invalid
    pose_ref_to_world: RigidTransform
    extr_depth_to_ref: RigidTransform
    extr_pv_to_ref: RigidTransform
    intr_depth: CameraIntrinsics
    intr_pv: CameraIntrinsics
    gt_label_map: np.ndarray | None = None  # (H, W) bool, PV-aligned
    gt_model_pose: RigidTransform | None = None

    def __post_init__(self):
        pv = np.asarray(self.pv_image, dtype=np.uint8)
        depth = np.asarray(self.depth_map, dtype=np.float64)
        if pv.shape != (self.intr_pv.height, self.intr_pv.width, 3):
            raise InvalidParameterError("pv_image does not match intr_pv dimensions")
        if depth.shape != (self.intr_depth.height, self.intr_depth.width):
            raise InvalidParameterError("depth_map does not match intr_depth dimensions")
        if depth.size and depth.min() < 0:
            raise InvalidParameterError("negative depth value")
        object.__setattr__(self, "pv_image", pv)
        object.__setattr__(self, "depth_map", depth)
        if self.gt_label_map is not None:
            lm = np.asarray(self.gt_label_map, dtype=bool)
            if lm.shape != pv.shape[:2]:
                raise InvalidParameterError("gt_label_map not aligned to pv_image")
            object.__setattr__(self, "gt_label_map", lm)

    def depth_cam_to_world(self) -> RigidTransform:
        return self.pose_ref_to_world @ self.extr_depth_to_ref

    def pv_cam_to_world(self) -> RigidTransform:
        return self.pose_ref_to_world @ self.extr_pv_to_ref


def _intr_dict(k: CameraIntrinsics) -> dict:
    return {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy, "width": k.width, "height": k.height}


def _intr_from(d: dict, field: str) -> CameraIntrinsics:
    try:
        return CameraIntrinsics(**d)
    except (TypeError, KeyError) as e:
        raise FormatError(f"manifest field {field!r}: {e}") from e


def _mat_list(T: RigidTransform) -> list:
    return [float(v) for v in T.matrix.reshape(-1)]


def _mat_from(values, field: str) -> RigidTransform:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size != 16:
        raise FormatError(f"manifest field {field!r}: expected 16 values")
    return RigidTransform.from_matrix(arr.reshape(4, 4))


def save_recording(frames, path) -> None:
    """Write frames to a recording directory, atomically (temp + rename)."""
    path = str(path)
    tmp = path + ".tmp"
    if os.path.exists(tmp):
        shutil.rmtree(tmp)
    os.makedirs(os.path.join(tmp, "pv"))
    os.makedirs(os.path.join(tmp, "depth"))
    lines = []
    last_t = None
    for i, fr in enumerate(frames):
        if last_t is not None and fr.timestamp <= last_t:
            raise InvalidParameterError("timestamps must strictly increase")
        last_t = fr.timestamp
        name = f"{i:06d}.png"
        Image.fromarray(fr.pv_image).save(os.path.join(tmp, "pv", name))
        mm = np.clip(np.rint(fr.depth_map * 1000.0), 0, 65535).astype(np.uint16)
        Image.fromarray(mm).save(os.path.join(tmp, "depth", name))
        rec = {
            "timestamp": fr.timestamp,
            "pv": f"pv/{name}",
            "depth": f"depth/{name}",
            "pose_ref_to_world": _mat_list(fr.pose_ref_to_world),
            "extr_depth_to_ref": _mat_list(fr.extr_depth_to_ref),
            "extr_pv_to_ref": _mat_list(fr.extr_pv_to_ref),
            "intr_depth": _intr_dict(fr.intr_depth),
            "intr_pv": _intr_dict(fr.intr_pv),
            "label": None,
            "gt_model_pose": None,
        }
        if fr.gt_label_map is not None:
            os.makedirs(os.path.join(tmp, "label"), exist_ok=True)
            Image.fromarray(fr.gt_label_map.astype(np.uint8) * 255, mode="L").save(
                os.path.join(tmp, "label", name)
            )
            rec["label"] = f"label/{name}"
        if fr.gt_model_pose is not None:
            rec["gt_model_pose"] = _mat_list(fr.gt_model_pose)
        lines.append(json.dumps(rec))
    with open(os.path.join(tmp, "manifest.jsonl"), "w") as f:
        f.write("\n".join(lines) + ("\n" if lines else ""))
    if os.path.exists(path):
        shutil.rmtree(path)
    os.rename(tmp, path)


def load_recording(path):
    """Yield SensorFrames in manifest (timestamp) order. Lazy: rasters are
    read as each frame is consumed."""
    manifest = os.path.join(str(path), "manifest.jsonl")
    if not os.path.isfile(manifest):
        raise FormatError(f"missing manifest: {manifest}")
    with open(manifest) as f:
        lines = [ln for ln in f.read().splitlines() if ln.strip()]
    records = []
    for i, ln in enumerate(lines):
        try:
            records.append(json.loads(ln))
        except json.JSONDecodeError as e:
            raise FormatError(f"manifest line {i}: invalid JSON ({e})") from e
    return _frame_iter(str(path), records)


def _frame_iter(root: str, records):
    last_t = None
    for i, rec in enumerate(records):
        for key in ("timestamp", "pv", "depth", "pose_ref_to_world",
                    "extr_depth_to_ref", "extr_pv_to_ref", "intr_depth", "intr_pv"):
            if key not in rec:
                raise FormatError(f"manifest frame {i}: missing field {key!r}")
        t = float(rec["timestamp"])
        if last_t is not None and t <= last_t:
            raise FormatError(f"manifest frame {i}: timestamps must strictly increase")
        last_t = t
        try:
            pv = np.asarray(Image.open(os.path.join(root, rec["pv"])).convert("RGB"))
            depth_raw = np.asarray(Image.open(os.path.join(root, rec["depth"])))
        except OSError as e:
            raise RecordingIOError(f"frame {i}: {e}") from e
        depth = depth_raw.astype(np.float64) / 1000.0
        label = None
        if rec.get("label"):
            try:
                label = np.asarray(Image.open(os.path.join(root, rec["label"]))) > 127
            except OSError as e:
                raise RecordingIOError(f"frame {i}: {e}") from e
        gt_pose = None
        if rec.get("gt_model_pose"):
            gt_pose = _mat_from(rec["gt_model_pose"], "gt_model_pose")
        yield SensorFrame(
            timestamp=t,
            pv_image=pv,
            depth_map=depth,
            pose_ref_to_world=_mat_from(rec["pose_ref_to_world"], "pose_ref_to_world"),
            extr_depth_to_ref=_mat_from(rec["extr_depth_to_ref"], "extr_depth_to_ref"),
            extr_pv_to_ref=_mat_from(rec["extr_pv_to_ref"], "extr_pv_to_ref"),
            intr_depth=_intr_from(rec["intr_depth"], "intr_depth"),
            intr_pv=_intr_from(rec["intr_pv"], "intr_pv"),
            gt_label_map=label,
            gt_model_pose=gt_pose,
        )
