"""ASCII polygon-file (PLY) point cloud I/O plus small text formats.

Field order per vertex line: x y z [nx ny nz] [red green blue].
Normals are written before colors when both are present; colors are
stored as uchar 0..255.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import FormatError
from .geometry import PointCloud, RigidTransform


def save_cloud(cloud: PointCloud, path) -> None:
    has_n = cloud.normals is not None
    has_c = cloud.colors is not None
    lines = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}"]
    lines += ["property float x", "property float y", "property float z"]
    if has_n:
        lines += ["property float nx", "property float ny", "property float nz"]
    if has_c:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines.append("end_header")
    cols = [cloud.points]
    if has_n:
        cols.append(cloud.normals)
    body = np.hstack(cols)
    out = []
    rgb = None
    if has_c:
        rgb = np.clip(np.rint(cloud.colors * 255), 0, 255).astype(int)
    for i, row in enumerate(body):
        s = " ".join(repr(float(v)) for v in row)
        if rgb is not None:
            s += " " + " ".join(str(int(v)) for v in rgb[i])
        out.append(s)
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as f:
        f.write("\n".join(lines + out) + "\n")
    os.replace(tmp, str(path))


def load_cloud(path) -> PointCloud:
    with open(path) as f:
        header = f.readline().strip()
        if header != "ply":
            raise FormatError(f"{path}: not a polygon file")
        props = []
        count = None
        for line in f:
            line = line.strip()
            if line.startswith("element vertex"):
                count = int(line.split()[-1])
            elif line.startswith("property"):
                props.append(line.split()[-1])
            elif line == "end_header":
                break
        if count is None:
            raise FormatError(f"{path}: missing vertex element")
        want = ["x", "y", "z"]
        has_n = props[:3] == want and "nx" in props
        has_c = "red" in props
        rows = [f.readline().split() for _ in range(count)]
    data = np.array(rows, dtype=np.float64) if rows else np.zeros((0, len(props)))
    pts = data[:, 0:3]
    i = 3
    normals = None
    if has_n:
        normals = data[:, i : i + 3]
        i += 3
    colors = None
    if has_c:
        colors = data[:, i : i + 3] / 255.0
    return PointCloud(pts, colors, normals)


def save_transform(T: RigidTransform, path) -> None:
    """Row-major 4x4 matrix, one row per line."""
    with open(path, "w") as f:
        for row in T.matrix:
            f.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_transform(path) -> RigidTransform:
    m = np.loadtxt(path)
    if m.shape != (4, 4):
        raise FormatError(f"{path}: expected a 4x4 matrix")
    return RigidTransform.from_matrix(m)


def save_landmarks(names, points, path) -> None:
    """Landmark file: `name x y z` per line."""
    with open(path, "w") as f:
        for name, p in zip(names, np.asarray(points, float)):
            f.write(f"{name} {float(p[0])!r} {float(p[1])!r} {float(p[2])!r}\n")


def load_landmarks(path):
    names, pts = [], []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise FormatError(f"{path}:{ln}: expected `name x y z`")
            names.append(parts[0])
            pts.append([float(v) for v in parts[1:]])
    return names, np.asarray(pts, dtype=np.float64).reshape(-1, 3)
