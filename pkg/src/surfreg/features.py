"""Fast point feature histograms: 33-bin rigid-invariant local descriptors.

Two passes: per-point simplified histograms over Darboux-frame angle
triples (alpha, phi, theta) of radius neighbors, 11 bins per angle, then
neighbor aggregation weighted by inverse distance.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidParameterError
from .geometry import PointCloud, SpatialIndex

N_BINS = 11


def _angle_triple(p_src, n_src, p_tgt, n_tgt):
    """Darboux angles for directed pairs (vectorized over rows)."""
    d = p_tgt - p_src
    dist = np.linalg.norm(d, axis=1)
    dist = np.where(dist < 1e-12, 1.0, dist)
    du = d / dist[:, None]
    u = n_src
    v = np.cross(du, u)
    vn = np.linalg.norm(v, axis=1)
    vn = np.where(vn < 1e-12, 1.0, vn)
    v = v / vn[:, None]
    w = np.cross(u, v)
    alpha = np.einsum("ni,ni->n", v, n_tgt)
    phi = np.einsum("ni,ni->n", u, du)
    theta = np.arctan2(np.einsum("ni,ni->n", w, n_tgt), np.einsum("ni,ni->n", u, n_tgt))
    return alpha, phi, theta


def _bin_index(alpha, phi, theta):
    ba = np.clip(((alpha + 1.0) / 2.0 * N_BINS).astype(int), 0, N_BINS - 1)
    bp = np.clip(((phi + 1.0) / 2.0 * N_BINS).astype(int), 0, N_BINS - 1)
    bt = np.clip(((theta + np.pi) / (2.0 * np.pi) * N_BINS).astype(int), 0, N_BINS - 1)
    return ba, bp, bt


def compute_fpfh(cloud: PointCloud, radius: float) -> np.ndarray:
    """Per-point 33-bin FPFH descriptor array (N, 33).

    Points with no radius-neighbor keep a zero histogram.
    """
    if cloud.normals is None:
        raise InvalidParameterError("FPFH needs normals")
    if radius <= 0:
        raise InvalidParameterError("radius must be positive")
    pts = cloud.points
    nrm = cloud.normals
    n = len(pts)
    neighbors = SpatialIndex(pts).query_radius(pts, radius)

    src, tgt = [], []
    for i, nbrs in enumerate(neighbors):
        for j in nbrs:
            if j != i:
                src.append(i)
                tgt.append(j)
    spfh = np.zeros((n, 3 * N_BINS))
    counts = np.zeros(n)
    if src:
        src = np.array(src)
        tgt = np.array(tgt)
        alpha, phi, theta = _angle_triple(pts[src], nrm[src], pts[tgt], nrm[tgt])
        ba, bp, bt = _bin_index(alpha, phi, theta)
        np.add.at(spfh, (src, ba), 1.0)
        np.add.at(spfh, (src, N_BINS + bp), 1.0)
        np.add.at(spfh, (src, 2 * N_BINS + bt), 1.0)
        counts = np.bincount(src, minlength=n).astype(float)
        nonzero = counts > 0
        spfh[nonzero] /= counts[nonzero, None]

        # second pass: inverse-distance weighted neighbor aggregation
        dist = np.linalg.norm(pts[tgt] - pts[src], axis=1)
        dist = np.where(dist < 1e-12, 1e-12, dist)
        agg = np.zeros_like(spfh)
        np.add.at(agg, src, spfh[tgt] / dist[:, None])
        fpfh = spfh.copy()
        fpfh[nonzero] += agg[nonzero] / counts[nonzero, None]
        return fpfh
    return spfh


def one_way_matches(feat_a: np.ndarray, feat_b: np.ndarray) -> np.ndarray:
    """Union of nearest-feature matches taken in both directions, as
    (i, j) index pairs into a and b; noisier than mutual matching but
    never starves a downstream robust estimator."""
    tree_b = SpatialIndexND(feat_b)
    tree_a = SpatialIndexND(feat_a)
    _, ab = tree_b.query(feat_a)
    _, ba = tree_a.query(feat_b)
    fwd = np.stack([np.arange(len(feat_a)), ab], axis=1)
    rev = np.stack([ba, np.arange(len(feat_b))], axis=1)
    return np.unique(np.vstack([fwd, rev]), axis=0)


def mutual_matches(feat_a: np.ndarray, feat_b: np.ndarray) -> np.ndarray:
    """Indices (i, j) where a_i's nearest feature is b_j and vice versa."""
    tree_b = SpatialIndexND(feat_b)
    tree_a = SpatialIndexND(feat_a)
    _, ab = tree_b.query(feat_a)
    _, ba = tree_a.query(feat_b)
    i = np.arange(len(feat_a))
    mutual = ba[ab] == i
    return np.stack([i[mutual], ab[mutual]], axis=1)


class SpatialIndexND:
    """k-d tree over arbitrary-dimension vectors (features)."""

    def __init__(self, data):
        from scipy.spatial import cKDTree

        self._tree = cKDTree(np.asarray(data, float))

    def query(self, q, k: int = 1):
        return self._tree.query(np.asarray(q, float), k=k, workers=-1)
