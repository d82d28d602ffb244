"""Triangle meshes: construction, surface sampling, distance queries.

Meshes stand in for the preoperative surface model and for the synthetic
scene geometry rendered by the stream module.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError
from .geometry import PointCloud, RigidTransform


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) meters
    triangles: np.ndarray  # (T, 3) int indices

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise InvalidParameterError("triangle index out of range")
        a, b, c = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
        areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
        if t.size and areas.min() <= 0:
            raise InvalidParameterError("degenerate zero-area triangle")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    def transformed(self, T: RigidTransform) -> "TriangleMesh":
        return TriangleMesh(T.apply(self.vertices), self.triangles)

    def triangle_corners(self):
        t = self.triangles
        v = self.vertices
        return v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]

    def triangle_normals(self) -> np.ndarray:
        a, b, c = self.triangle_corners()
        n = np.cross(b - a, c - a)
        return n / np.linalg.norm(n, axis=1)[:, None]

    def area(self) -> float:
        a, b, c = self.triangle_corners()
        return float(0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1).sum())


def sample_surface(mesh: TriangleMesh, n: int, seed: int = 0) -> PointCloud:
    """Uniform area-weighted surface sampling with outward face normals."""
    rng = np.random.default_rng(seed)
    a, b, c = mesh.triangle_corners()
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    tri = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    pts = (1 - r1)[:, None] * a[tri] + (r1 * (1 - r2))[:, None] * b[tri] + (r1 * r2)[:, None] * c[tri]
    normals = mesh.triangle_normals()[tri]
    return PointCloud(pts, normals=normals)


def point_mesh_distance(points, mesh: TriangleMesh) -> np.ndarray:
    """Exact point-to-surface distance per query point (brute force over
    triangles; intended for tests and evaluation, not hot loops)."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    a, b, c = mesh.triangle_corners()
    out = np.full(len(pts), np.inf)
    # chunk over triangles to bound memory
    step = max(1, int(2e6 // max(len(pts), 1)))
    for s in range(0, len(a), step):
        d = _point_triangle_distance(pts, a[s : s + step], b[s : s + step], c[s : s + step])
        out = np.minimum(out, d.min(axis=1))
    return out


def _point_triangle_distance(p, a, b, c):
    """Distance from each point (N,3) to each triangle (M,3): (N, M)."""
    ab = b - a
    ac = c - a
    ap = p[:, None, :] - a[None, :, :]
    d1 = np.einsum("mi,nmi->nm", ab, ap)
    d2 = np.einsum("mi,nmi->nm", ac, ap)
    bp = p[:, None, :] - b[None, :, :]
    d3 = np.einsum("mi,nmi->nm", ab, bp)
    d4 = np.einsum("mi,nmi->nm", ac, bp)
    cp = p[:, None, :] - c[None, :, :]
    d5 = np.einsum("mi,nmi->nm", ab, cp)
    d6 = np.einsum("mi,nmi->nm", ac, cp)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    denom = va + vb + vc
    denom = np.where(np.abs(denom) < 1e-300, 1e-300, denom)
    v = vb / denom
    w = vc / denom
    # clamp barycentric closest point region by region
    closest = (
        a[None, :, :]
        + v[:, :, None] * ab[None, :, :]
        + w[:, :, None] * ac[None, :, :]
    )

    # vertex regions
    cond_a = (d1 <= 0) & (d2 <= 0)
    cond_b = (d3 >= 0) & (d4 <= d3)
    cond_c = (d6 >= 0) & (d5 <= d6)
    # edge regions
    v_ab = np.clip(np.where(d1 - d3 != 0, d1 / np.where(d1 - d3 == 0, 1, d1 - d3), 0), 0, 1)
    cond_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    w_ac = np.clip(np.where(d2 - d6 != 0, d2 / np.where(d2 - d6 == 0, 1, d2 - d6), 0), 0, 1)
    cond_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    num = d4 - d3
    den = (d4 - d3) + (d5 - d6)
    w_bc = np.clip(np.where(den != 0, num / np.where(den == 0, 1, den), 0), 0, 1)
    cond_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)

    pt_ab = a[None, :, :] + v_ab[:, :, None] * ab[None, :, :]
    pt_ac = a[None, :, :] + w_ac[:, :, None] * ac[None, :, :]
    pt_bc = b[None, :, :] + w_bc[:, :, None] * (c - b)[None, :, :]

    closest = np.where(cond_bc[:, :, None], pt_bc, closest)
    closest = np.where(cond_ac[:, :, None], pt_ac, closest)
    closest = np.where(cond_ab[:, :, None], pt_ab, closest)
    closest = np.where(cond_c[:, :, None], c[None, :, :], closest)
    closest = np.where(cond_b[:, :, None], b[None, :, :], closest)
    closest = np.where(cond_a[:, :, None], a[None, :, :], closest)

    return np.linalg.norm(p[:, None, :] - closest, axis=2)


def make_quad(center, normal, size_u: float, size_v: float) -> TriangleMesh:
    """Rectangle of two triangles; normal fixes the facing direction."""
    n = np.asarray(normal, float)
    n = n / np.linalg.norm(n)
    helper = np.array([0.0, 0.0, 1.0]) if abs(n[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(helper, n)
    u /= np.linalg.norm(u)
    v = np.cross(n, u)
    c = np.asarray(center, float)
    hu, hv = size_u / 2.0, size_v / 2.0
    verts = np.array([c - hu * u - hv * v, c + hu * u - hv * v, c + hu * u + hv * v, c - hu * u + hv * v])
    tris = np.array([[0, 1, 2], [0, 2, 3]])
    return TriangleMesh(verts, tris)


def make_box(center, size) -> TriangleMesh:
    c = np.asarray(center, float)
    s = np.asarray(size, float) / 2.0
    corners = np.array(
        [[sx, sy, sz] for sx in (-s[0], s[0]) for sy in (-s[1], s[1]) for sz in (-s[2], s[2])]
    ) + c
    faces = [
        (0, 1, 3, 2), (4, 6, 7, 5),  # x faces
        (0, 4, 5, 1), (2, 3, 7, 6),  # y faces
        (0, 2, 6, 4), (1, 5, 7, 3),  # z faces
    ]
    tris = []
    for q in faces:
        tris.append([q[0], q[1], q[2]])
        tris.append([q[0], q[2], q[3]])
    return TriangleMesh(corners, np.array(tris))


def half_cylinder_radius(radius: float, length: float, taper: float, x) -> np.ndarray:
    """Local radius of a (possibly tapered) half cylinder at coordinate x;
    tapers linearly from ``radius`` at -length/2 to ``radius * taper``."""
    return radius * (1.0 + (taper - 1.0) * (np.asarray(x, float) + length / 2.0) / length)


def make_half_cylinder(radius: float, length: float, arc_segments: int = 24,
                       length_segments: int = 8, taper: float = 1.0) -> TriangleMesh:
    """Half cylinder lying along +x, curved side up (+z), flat side at z=0.

    Used as the synthetic torso analogue: closed with a flat bottom and
    two flat half-disc end caps so the shape is watertight. A taper < 1
    narrows the +x end, breaking the pi-rotation self-symmetries of the
    pure half cylinder (a pose-symmetric target would make landmark
    evaluation ill-posed).
    """
    xs = np.linspace(-length / 2.0, length / 2.0, length_segments + 1)
    angles = np.linspace(0.0, np.pi, arc_segments + 1)
    verts = []
    for x in xs:
        r_x = float(half_cylinder_radius(radius, length, taper, x))
        for ang in angles:
            verts.append([x, r_x * np.cos(ang), r_x * np.sin(ang)])
    verts = np.array(verts)
    ncol = arc_segments + 1
    tris = []
    for i in range(length_segments):
        for j in range(arc_segments):
            v00 = i * ncol + j
            v01 = i * ncol + j + 1
            v10 = (i + 1) * ncol + j
            v11 = (i + 1) * ncol + j + 1
            tris.append([v00, v11, v10])
            tris.append([v00, v01, v11])
    nv = len(verts)
    # bottom face (z = 0 plane); a trapezoid when tapered
    r0 = float(half_cylinder_radius(radius, length, taper, xs[0]))
    r1 = float(half_cylinder_radius(radius, length, taper, xs[-1]))
    bot = np.array(
        [
            [-length / 2, -r0, 0.0],
            [length / 2, -r1, 0.0],
            [length / 2, r1, 0.0],
            [-length / 2, r0, 0.0],
        ]
    )
    verts = np.vstack([verts, bot])
    tris.append([nv + 0, nv + 2, nv + 1])
    tris.append([nv + 0, nv + 3, nv + 2])
    # end caps: fan from rim center on each end
    for side, x in ((0, xs[0]), (length_segments, xs[-1])):
        center_idx = len(verts)
        verts = np.vstack([verts, [[x, 0.0, 0.0]]])
        base = side * ncol
        for j in range(arc_segments):
            a_idx, b_idx = base + j, base + j + 1
            if side == 0:
                tris.append([center_idx, b_idx, a_idx])
            else:
                tris.append([center_idx, a_idx, b_idx])
    return TriangleMesh(np.asarray(verts), np.array(tris))
