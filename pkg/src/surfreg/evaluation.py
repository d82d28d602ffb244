"""Accuracy evaluation: checkerboard reconstruction residuals and
landmark-based registration error (TRE, DVA, DMP)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateInputError,
    InvalidParameterError,
    NoDataError,
    NoDepthError,
)
from .geometry import PointCloud, RigidTransform, SpatialIndex, rigid_fit

DISTANCE_BINS = ((0.3, 1.0), (1.0, 1.5), (1.5, float("inf")))
DISTANCE_BIN_NAMES = ("Close", "Medium", "Far")
TILT_BINS = ((0.0, 30.0), (30.0, 60.0), (60.0, float("inf")))
TILT_BIN_NAMES = ("Low", "Mid", "High")


@dataclass(frozen=True)
class CheckerboardSpec:
    """Planar calibration target: an internal grid of cols x rows corners
    with uniform spacing (meters)."""

    cols: int = 8
    rows: int = 5
    spacing: float = 0.030

    def __post_init__(self):
        if self.cols < 2 or self.rows < 2:
            raise InvalidParameterError("checkerboard needs at least a 2x2 corner grid")
        if not self.spacing > 0:
            raise InvalidParameterError("checkerboard spacing must be positive")

    @property
    def count(self) -> int:
        return self.cols * self.rows


def checkerboard_model(spec: CheckerboardSpec) -> np.ndarray:
    """Ideal corner positions in board coordinates, row-major linear index
    k = i + j*cols; corner (i, j) sits at (i*d, j*d, 0)."""
    i = np.arange(spec.cols)
    j = np.arange(spec.rows)
    ii, jj = np.meshgrid(i, j)  # jj varies over rows (slow axis)
    pts = np.stack(
        [ii.ravel() * spec.spacing, jj.ravel() * spec.spacing, np.zeros(spec.count)],
        axis=1,
    )
    return pts


def robust_corner_depth(samples) -> float:
    """Depth estimate for a corner from nearby reconstructed samples: the
    30th percentile, which biases toward the board surface and away from
    behind-board outliers."""
    samples = np.asarray(samples, dtype=float).ravel()
    if samples.size == 0:
        raise NoDepthError("no depth samples near corner")
    return float(np.percentile(samples, 30.0))


@dataclass(frozen=True)
class ReconSample:
    """One checkerboard observation: reconstructed corners plus the
    derived best-fit residual statistics."""

    corners: np.ndarray  # (c*r, 3) reconstructed positions
    distance: float  # mean corner depth along the viewing axis, meters
    tilt_deg: float  # board tilt from frontoparallel, degrees
    residuals: np.ndarray  # (c*r,) per-corner meters
    rms: float  # meters
    nme: float  # (rms in mm / 1000) / distance

    @property
    def stats(self) -> dict:
        r = self.residuals
        return {
            "mean": float(np.mean(r)),
            "std": float(np.std(r)),
            "median": float(np.median(r)),
            "min": float(np.min(r)),
            "max": float(np.max(r)),
            "rms": self.rms,
            "nme": self.nme,
        }


def eval_reconstruction(corners, spec: CheckerboardSpec, board_normal,
                        mean_depth: float) -> ReconSample:
    """Residuals of reconstructed corners against the ideal grid after a
    best-fit rigid alignment; tilt from the board normal's z-component."""
    p = np.asarray(corners, dtype=float)
    if p.shape != (spec.count, 3):
        raise InvalidParameterError(
            f"expected {spec.count} corners, got shape {p.shape}"
        )
    if not mean_depth > 0:
        raise InvalidParameterError("mean depth must be positive")
    n = np.asarray(board_normal, dtype=float)
    if abs(np.linalg.norm(n) - 1.0) > 1e-6:
        raise InvalidParameterError("board normal must be a unit vector")
    q = checkerboard_model(spec)
    T, _ = rigid_fit(q, p)
    e = np.linalg.norm(p - T.apply(q), axis=1)
    rms = float(np.sqrt(np.mean(e**2)))
    tilt = float(np.degrees(np.arccos(np.clip(abs(n[2]), -1.0, 1.0))))
    nme = rms / mean_depth  # normalized error: residual per meter of viewing distance
    return ReconSample(corners=p, distance=float(mean_depth), tilt_deg=tilt,
                       residuals=e, rms=rms, nme=float(nme))


def _bin_index(value: float, bins) -> int | None:
    """Half-open bins [lo, hi); a value on a boundary lands in the higher
    bin. Below the first bin returns None."""
    for k, (lo, hi) in enumerate(bins):
        if lo <= value < hi:
            return k
    return None


def stratify(samples) -> dict:
    """Pools per-corner residuals into a distance x tilt grid of cells and
    computes cell statistics."""
    table: dict[tuple[str, str], dict] = {}
    for dname in DISTANCE_BIN_NAMES:
        for tname in TILT_BIN_NAMES:
            table[(dname, tname)] = {"residuals": [], "nmes": []}
    for s in samples:
        di = _bin_index(s.distance, DISTANCE_BINS)
        ti = _bin_index(s.tilt_deg, TILT_BINS)
        if di is None or ti is None:
            continue
        cell = table[(DISTANCE_BIN_NAMES[di], TILT_BIN_NAMES[ti])]
        cell["residuals"].append(s.residuals)
        cell["nmes"].append(s.nme)
    out = {}
    for key, cell in table.items():
        if not cell["residuals"]:
            out[key] = None
            continue
        e = np.concatenate(cell["residuals"])
        out[key] = {
            "count": int(len(cell["residuals"])),
            "mean": float(np.mean(e)),
            "std": float(np.std(e)),
            "median": float(np.median(e)),
            "min": float(np.min(e)),
            "max": float(np.max(e)),
            "nme": float(np.mean(cell["nmes"])),
        }
    return out


@dataclass(frozen=True)
class LandmarkSet:
    """Named landmarks with positions in both the model frame and the
    world frame (digitized or synthetic ground truth)."""

    names: tuple
    x_model: np.ndarray  # (N, 3)
    x_world: np.ndarray  # (N, 3)

    def __post_init__(self):
        xm = np.asarray(self.x_model, dtype=float)
        xw = np.asarray(self.x_world, dtype=float)
        if len(self.names) != len(xm) or len(xm) != len(xw):
            raise InvalidParameterError("landmark names/positions length mismatch")
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "x_model", xm)
        object.__setattr__(self, "x_world", xw)

    def __len__(self) -> int:
        return len(self.names)

    def subset(self, names) -> "LandmarkSet":
        idx = [self.names.index(n) for n in names]
        return LandmarkSet(tuple(names), self.x_model[idx], self.x_world[idx])


def fiducial_reference(landmarks: LandmarkSet) -> RigidTransform:
    """Least-squares rigid alignment of model-frame landmarks onto their
    world-frame positions; the reference against which poses are judged,
    never an input to registration."""
    T, _ = rigid_fit(landmarks.x_model, landmarks.x_world)
    return T


def tre(T_est: RigidTransform, landmarks: LandmarkSet) -> np.ndarray:
    """Target registration error: distance between each transformed
    model-frame landmark and its world-frame position."""
    return np.linalg.norm(T_est.apply(landmarks.x_model) - landmarks.x_world, axis=1)


def dva(landmark_world, observed: PointCloud) -> float:
    """Distance from a world-frame landmark to the nearest observed scene
    point (how far outside the visible area the target lies)."""
    if len(observed) == 0:
        raise NoDataError("observed cloud is empty")
    d = np.linalg.norm(observed.points - np.asarray(landmark_world, float), axis=1)
    return float(np.min(d))


def dva_many(landmarks_world, observed: PointCloud) -> np.ndarray:
    """Vectorized nearest-observed-point distance for several landmarks."""
    if len(observed) == 0:
        raise NoDataError("observed cloud is empty")
    idx = SpatialIndex(observed.points)
    d, _ = idx.query(np.atleast_2d(np.asarray(landmarks_world, float)))
    return np.asarray(d, float).ravel()


def dmp(landmark_model, plane_point, plane_normal) -> float:
    """Unsigned distance from a model-frame landmark to a plane given by a
    point and unit normal (e.g. the mid-sagittal analogue)."""
    n = np.asarray(plane_normal, dtype=float)
    if abs(np.linalg.norm(n) - 1.0) > 1e-6:
        raise InvalidParameterError("plane normal must be a unit vector")
    return float(abs(np.dot(np.asarray(landmark_model, float) - np.asarray(plane_point, float), n)))


def bilateral_pairs(names) -> list[tuple[int, int]]:
    """Indices of (left, right) landmark pairs matched by _l/_r suffix."""
    names = list(names)
    pairs = []
    for i, name in enumerate(names):
        if name.endswith("_l"):
            partner = name[:-2] + "_r"
            if partner in names:
                pairs.append((i, names.index(partner)))
    return pairs


def mid_plane(landmarks: LandmarkSet) -> tuple[np.ndarray, np.ndarray]:
    """Symmetry plane of the model-frame landmark set: passes through the
    centroid of bilateral-pair midpoints, normal = renormalized mean
    left-to-right direction. Needs at least one bilateral pair."""
    pairs = bilateral_pairs(landmarks.names)
    if not pairs:
        raise DegenerateInputError("no bilateral landmark pairs (_l/_r) found")
    xm = landmarks.x_model
    mids = np.stack([(xm[i] + xm[j]) / 2.0 for i, j in pairs])
    dirs = np.stack([xm[j] - xm[i] for i, j in pairs])
    n = dirs.mean(axis=0)
    norm = np.linalg.norm(n)
    if norm < 1e-12:
        raise DegenerateInputError("bilateral directions cancel; plane normal undefined")
    return mids.mean(axis=0), n / norm


def synth_checkerboard_sample(spec: CheckerboardSpec, pose: RigidTransform,
                              noise_sigma: float, rng,
                              noise_model: str = "constant") -> ReconSample:
    """Simulated checkerboard observation: ideal corners moved by ``pose``
    (board -> camera, camera looking down +z) plus isotropic Gaussian
    corner noise. With noise_model='quadratic' the noise scales as
    sigma*(z/1m)^2, mimicking stereo-style depth error growth."""
    if noise_sigma < 0:
        raise InvalidParameterError("noise sigma must be non-negative")
    if noise_model not in ("constant", "quadratic"):
        raise InvalidParameterError(f"unknown noise model '{noise_model}'")
    q = checkerboard_model(spec)
    p = pose.apply(q)
    z = p[:, 2]
    if np.any(z <= 0):
        raise InvalidParameterError("board pose places corners behind the camera")
    if noise_model == "quadratic":
        sig = noise_sigma * (z / 1.0) ** 2
    else:
        sig = np.full_like(z, noise_sigma)
    p_noisy = p + rng.normal(size=p.shape) * sig[:, None]
    normal = pose.rotation[:, 2]
    if normal[2] < 0:
        normal = -normal
    return eval_reconstruction(p_noisy, spec, normal, float(np.mean(z)))


def recon_report(samples) -> dict:
    """Machine-readable reconstruction accuracy report."""
    grid = stratify(samples)
    cells = []
    for (dname, tname), stats in grid.items():
        cells.append({"distance_bin": dname, "tilt_bin": tname, "stats": stats})
    return {
        "kind": "reconstruction-accuracy",
        "sample_count": len(list(samples)),
        "cells": cells,
    }


def recon_table(samples) -> str:
    """Aligned text table of stratified residual statistics (millimeters)."""
    grid = stratify(samples)
    header = f"{'Distance':<8} {'Tilt':<5} {'n':>4} {'mean':>7} {'std':>7} {'median':>7} {'min':>7} {'max':>7} {'NME':>8}"
    lines = [header, "-" * len(header)]
    for dname in DISTANCE_BIN_NAMES:
        for tname in TILT_BIN_NAMES:
            st = grid[(dname, tname)]
            if st is None:
                lines.append(f"{dname:<8} {tname:<5} {0:>4} {'-':>7} {'-':>7} {'-':>7} {'-':>7} {'-':>7} {'-':>8}")
                continue
            mm = lambda x: f"{x * 1000:7.2f}"
            lines.append(
                f"{dname:<8} {tname:<5} {st['count']:>4} {mm(st['mean'])} {mm(st['std'])}"
                f" {mm(st['median'])} {mm(st['min'])} {mm(st['max'])} {st['nme']:8.4f}"
            )
    return "\n".join(lines)


def tre_report(T_est: RigidTransform, landmarks: LandmarkSet,
               observed: PointCloud | None = None) -> dict:
    """Machine-readable registration accuracy report: per-landmark TRE,
    plus DVA (if an observed cloud is given) and DMP (if bilateral pairs
    define a symmetry plane)."""
    errs = tre(T_est, landmarks)
    dvas = None
    if observed is not None and len(observed) > 0:
        dvas = dva_many(landmarks.x_world, observed)
    try:
        pp, pn = mid_plane(landmarks)
        dmps = np.array([dmp(x, pp, pn) for x in landmarks.x_model])
    except DegenerateInputError:
        dmps = None
    rows = []
    for i, name in enumerate(landmarks.names):
        rows.append({
            "name": name,
            "tre": float(errs[i]),
            "dva": float(dvas[i]) if dvas is not None else None,
            "dmp": float(dmps[i]) if dmps is not None else None,
        })
    return {
        "kind": "registration-accuracy",
        "landmarks": rows,
        "tre_mean": float(np.mean(errs)),
        "tre_std": float(np.std(errs)),
        "tre_max": float(np.max(errs)),
    }


def tre_table(report: dict) -> str:
    """Aligned text table for a registration accuracy report (millimeters)."""
    header = f"{'Landmark':<16} {'TRE':>8} {'DVA':>8} {'DMP':>8}"
    lines = [header, "-" * len(header)]
    fmt = lambda v: f"{v * 1000:8.2f}" if v is not None else f"{'-':>8}"
    for row in report["landmarks"]:
        lines.append(f"{row['name']:<16} {fmt(row['tre'])} {fmt(row['dva'])} {fmt(row['dmp'])}")
    lines.append("-" * len(header))
    lines.append(
        f"{'mean/std/max':<16} {report['tre_mean'] * 1000:8.2f}"
        f" {report['tre_std'] * 1000:8.2f} {report['tre_max'] * 1000:8.2f}"
    )
    return "\n".join(lines)
