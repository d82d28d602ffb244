"""Coarse-to-fine rigid registration of a model cloud to a scene surface.

Pipeline per frame: feature-based global initialization (RANSAC with an
FGR-style fallback), a symmetry candidate pool of pi-flips, robust
multi-scale point-to-plane ICP, coverage/residual scoring, and temporal
filtering of the winning pose.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateInputError, InsufficientPointsError, InvalidParameterError, NoOverlapError
from .features import compute_fpfh, mutual_matches, one_way_matches
from .geometry import (
    PointCloud,
    RigidTransform,
    estimate_normals,
    rigid_fit,
    rodrigues,
    rotation_angle_deg,
    voxel_downsample,
    weighted_rigid_fit,
)


@dataclass(frozen=True)
class RegConfig:
    lambda_c: float = 0.7
    lambda_r: float = 0.3
    trim_alpha: float = 0.2
    d_max: float = 0.05
    delta_s_min: float = 0.02
    levels: int = 3
    delta_base: float = 0.01
    tau_scale: float = 3.0  # initial gate = tau_scale * level voxel size
    tau_shrink: float = 0.7  # per-ICP-iteration gate decay, floored at the voxel size
    huber_delta: float = 0.01
    normal_gate_deg: float = 60.0
    min_coverage: float = 0.3
    escape_after: int = 25
    icp_max_iters: int = 30
    continuity_rot_deg: float = 10.0
    continuity_trans: float = 0.05
    ransac_sample: int = 4
    ransac_max_iters: int = 100_000
    ransac_confidence: float = 0.999
    ransac_edge_ratio: float = 0.9
    ransac_inlier_scale: float = 1.5  # gate = scale * coarse voxel size
    fgr_iters: int = 64
    fgr_div_factor: float = 1.4
    fpfh_radius_scale: float = 5.0  # radius = scale * coarse voxel size
    prune_to: int = 2  # >0: keep only the best candidates after the coarsest level
    seed: int = 0

    def __post_init__(self):
        if abs(self.lambda_c + self.lambda_r - 1.0) > 1e-12:
            raise InvalidParameterError("lambda_c + lambda_r must equal 1")
        if not (0 <= self.trim_alpha < 0.5):
            raise InvalidParameterError("trim_alpha must be in [0, 0.5)")
        if self.delta_s_min < 0:
            raise InvalidParameterError("delta_s_min must be >= 0")

    def level_delta(self, level: int) -> float:
        return self.delta_base * 2 ** (self.levels - 1 - level)

    @property
    def delta_coarse(self) -> float:
        return self.level_delta(0)

    @property
    def tau_fine(self) -> float:
        return self.tau_scale * self.delta_base


@dataclass
class PyramidLevel:
    cloud: PointCloud
    delta: float
    _tree: cKDTree | None = None

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.cloud.points)
        return self._tree


@dataclass
class Pyramid:
    levels: list  # PyramidLevel, coarsest first

    @property
    def finest(self) -> PyramidLevel:
        return self.levels[-1]

    @property
    def coarsest(self) -> PyramidLevel:
        return self.levels[0]


def build_pyramid(cloud: PointCloud, levels: int, delta_base: float) -> Pyramid:
    """Voxel-downsampled levels, coarsest first; level voxel sizes are
    delta_base * 2^(levels-1-l). Normals are carried through the
    downsampling when present, estimated otherwise."""
    if levels < 1 or delta_base <= 0:
        raise InvalidParameterError("levels >= 1 and delta_base > 0 required")
    out = []
    for lvl in range(levels):
        delta = delta_base * 2 ** (levels - 1 - lvl)
        level_cloud = voxel_downsample(cloud, delta)
        if level_cloud.normals is None:
            k = min(30, len(level_cloud))
            if k < 3:
                raise InsufficientPointsError(f"level {lvl}: too few points for normals")
            level_cloud = estimate_normals(level_cloud, k=k)
        out.append(PyramidLevel(level_cloud, delta))
    if len(out[0].cloud) < 4:
        raise InsufficientPointsError("coarsest level has fewer than 4 points")
    return Pyramid(out)


@dataclass
class ModelTemplate:
    """Preprocessed model: pyramid, coarse features, centroid, PCA axes."""

    pyramid: Pyramid
    features_coarse: np.ndarray
    centroid: np.ndarray
    pca_axes: np.ndarray  # rows = principal directions, variance-descending

    @staticmethod
    def build(cloud: PointCloud, cfg: RegConfig) -> "ModelTemplate":
        pyr = build_pyramid(cloud, cfg.levels, cfg.delta_base)
        feats = compute_fpfh(pyr.coarsest.cloud, cfg.fpfh_radius_scale * cfg.delta_coarse)
        centered = cloud.points - cloud.points.mean(axis=0)
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        return ModelTemplate(pyr, feats, cloud.points.mean(axis=0), vt)


@dataclass
class RegistrationState:
    pose: RigidTransform | None = None
    score: float = 0.0
    frames_since_accept: int = 0


@dataclass(frozen=True)
class RegistrationResult:
    pose: RigidTransform
    score: float
    coverage: float
    trimmed_mean_dist: float
    accepted: bool
    candidate_count: int


def _batch_rigid_fit(a: np.ndarray, b: np.ndarray):
    """Least-squares rigid fits for a batch of point sets: a, b are
    (B, k, 3); returns rotations (B, 3, 3) and translations (B, 3).
    Reflections are corrected; rank-deficient samples yield poor fits that
    simply score few inliers downstream."""
    ca = a.mean(axis=1, keepdims=True)
    cb = b.mean(axis=1, keepdims=True)
    H = np.einsum("bki,bkj->bij", a - ca, b - cb)
    U, _, Vt = np.linalg.svd(H)
    R = np.einsum("bji,bkj->bik", Vt, U)  # V @ U^T, batched
    neg = np.linalg.det(R) < 0
    if neg.any():
        V = Vt.transpose(0, 2, 1).copy()
        V[neg, :, 2] *= -1.0
        R[neg] = np.einsum("bij,bkj->bik", V[neg], U[neg])
    t = cb[:, 0, :] - np.einsum("bij,bj->bi", R, ca[:, 0, :])
    return R, t


def global_init(model_level: PyramidLevel, model_feats, scene_level: PyramidLevel,
                scene_feats, cfg: RegConfig, rng=None) -> RigidTransform:
    """Feature-based global alignment: RANSAC over mutual FPFH matches with
    edge-length and inlier-distance checks, FGR-style graduated
    non-convexity as fallback when RANSAC fitness is too low."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    m_pts = model_level.cloud.points
    s_pts = scene_level.cloud.points
    if len(m_pts) < cfg.ransac_sample or len(s_pts) < cfg.ransac_sample:
        raise DegenerateInputError("too few points for global initialization")
    corr = mutual_matches(model_feats, scene_feats)
    if len(corr) < 3 * cfg.ransac_sample:
        # Smooth partial overlaps yield few mutual matches; fall back to
        # one-way nearest matches in both directions and let RANSAC sort
        # the outliers.
        corr = one_way_matches(model_feats, scene_feats)
    if len(corr) < cfg.ransac_sample:
        raise DegenerateInputError("too few feature correspondences")
    src = m_pts[corr[:, 0]]
    dst = s_pts[corr[:, 1]]
    gate = cfg.ransac_inlier_scale * cfg.delta_coarse

    best_T = None
    best_inliers = 0
    n = len(corr)
    pair_i, pair_j = np.triu_indices(cfg.ransac_sample, k=1)
    iters_needed = cfg.ransac_max_iters
    it = 0
    batch = 1024
    while it < min(iters_needed, cfg.ransac_max_iters):
        b_size = min(batch, cfg.ransac_max_iters - it)
        it += b_size
        picks = rng.integers(0, n, size=(b_size, cfg.ransac_sample))
        # reject samples with repeated correspondences
        distinct = np.all(picks[:, pair_i] != picks[:, pair_j], axis=1)
        a = src[picks]  # (B, sample, 3)
        b = dst[picks]
        ea = np.linalg.norm(a[:, pair_i] - a[:, pair_j], axis=2)
        eb = np.linalg.norm(b[:, pair_i] - b[:, pair_j], axis=2)
        hi = np.maximum(ea, eb)
        ok = distinct & np.all(hi > 1e-9, axis=1)
        ok &= np.all(np.minimum(ea, eb) >= cfg.ransac_edge_ratio * hi, axis=1)
        if not ok.any():
            continue
        R_b, t_b = _batch_rigid_fit(a[ok], b[ok])
        p = np.einsum("bij,nj->bni", R_b, src) + t_b[:, None, :]
        d2 = np.sum((p - dst[None]) ** 2, axis=2)
        counts = (d2 <= gate * gate).sum(axis=1)
        k = int(np.argmax(counts))
        if counts[k] > best_inliers:
            best_inliers = int(counts[k])
            best_T = RigidTransform(R_b[k], t_b[k])
            w = best_inliers / n
            denom = np.log(max(1.0 - w**cfg.ransac_sample, 1e-12))
            iters_needed = int(np.ceil(np.log(1.0 - cfg.ransac_confidence) / denom)) if denom < 0 else 1
    fitness = best_inliers / n if n else 0.0
    if best_T is not None and fitness >= cfg.min_coverage:
        d = np.linalg.norm(best_T.apply(src) - dst, axis=1)
        keep = d <= gate
        if keep.sum() >= 3:
            try:
                best_T, _ = rigid_fit(src[keep], dst[keep])
            except Exception:
                pass
        return best_T
    return _fgr(src, dst, cfg, warm_start=best_T)


def _fgr(src, dst, cfg: RegConfig, warm_start=None):
    """Graduated non-convexity (Geman-McClure line process) over a fixed
    correspondence set."""
    T = warm_start if warm_start is not None else RigidTransform.identity()
    d0 = np.linalg.norm(T.apply(src) - dst, axis=1)
    mu = max(float(np.max(d0) ** 2), 1e-8)
    floor = (cfg.delta_coarse) ** 2
    for i in range(cfg.fgr_iters):
        r = np.linalg.norm(T.apply(src) - dst, axis=1)
        w = (mu / (mu + r**2)) ** 2
        try:
            T, _ = weighted_rigid_fit(src, dst, w)
        except Exception:
            break
        if (i + 1) % 4 == 0:
            mu = max(mu / cfg.fgr_div_factor, floor)
    return T


def _pi_flip(axis, center) -> RigidTransform:
    """Rotation by pi about an axis through a given point."""
    axis = np.asarray(axis, float)
    R = rodrigues(axis / np.linalg.norm(axis) * np.pi)
    return RigidTransform(R, center - R @ center)


def spawn_candidates(prior: RigidTransform | None, T0: RigidTransform,
                     model: ModelTemplate) -> list:
    """Hypothesis pool: each base pose plus its pi-rotations about the
    world axes and the model's PCA axes, all through the transformed model
    centroid. Near-duplicates (1 deg / 1 mm) are dropped; pool <= 14."""
    bases = []
    if prior is not None:
        bases.append(prior)
    bases.append(T0)
    pool: list[RigidTransform] = []

    def add(T: RigidTransform):
        for have in pool:
            if (
                rotation_angle_deg(have.rotation, T.rotation) < 1.0
                and np.linalg.norm(have.translation - T.translation) < 1e-3
            ):
                return
        if len(pool) < 14:
            pool.append(T)

    world_axes = np.eye(3)
    for base in bases:
        add(base)
        c = base.apply(model.centroid)
        for axis in world_axes:
            add(_pi_flip(axis, c) @ base)
        for axis in model.pca_axes:
            add(_pi_flip(base.rotation @ axis, c) @ base)
    return pool


def _correspondences(T: RigidTransform, m_cloud: PointCloud, s_level: PyramidLevel,
                     tau: float, cos_gate: float):
    p = T.apply(m_cloud.points)
    d, idx = s_level.tree.query(p, workers=-1)
    ok = d <= tau
    if m_cloud.normals is not None and s_level.cloud.normals is not None:
        nm = T.rotate(m_cloud.normals)
        cosang = np.einsum("ni,ni->n", nm, s_level.cloud.normals[idx])
        ok &= cosang >= cos_gate
    return p, d, idx, ok


def icp_level(T: RigidTransform, m_cloud: PointCloud, s_level: PyramidLevel,
              cfg: RegConfig, first_level: bool,
              max_iters: int | None = None) -> RigidTransform:
    """Huber-weighted point-to-plane ICP at one pyramid level."""
    tau = cfg.tau_scale * s_level.delta
    s_normals = s_level.cloud.normals
    for it in range(max_iters if max_iters is not None else cfg.icp_max_iters):
        p, _, idx, ok = _correspondences(T, m_cloud, s_level, tau, np.cos(np.radians(cfg.normal_gate_deg)))
        if not ok.any():
            if it == 0 and first_level:
                raise NoOverlapError("no correspondences at initial pose")
            break
        pi = p[ok]
        oi = s_level.cloud.points[idx[ok]]
        ni = s_normals[idx[ok]]
        r = np.einsum("ni,ni->n", ni, pi - oi)
        absr = np.abs(r)
        w = np.where(absr <= cfg.huber_delta, 1.0, cfg.huber_delta / np.maximum(absr, 1e-12))
        J = np.hstack([np.cross(pi, ni), ni])
        A = (J * w[:, None]).T @ J
        b = -(J * w[:, None]).T @ r
        try:
            x = np.linalg.solve(A, b)
        except np.linalg.LinAlgError:
            break
        omega, v = x[:3], x[3:]
        T = RigidTransform(rodrigues(omega), v) @ T
        tau = max(tau * cfg.tau_shrink, s_level.delta)
        if np.linalg.norm(v) < 1e-4 and np.linalg.norm(omega) < 2e-4:
            break
    return T


def _polish_point(T: RigidTransform, m_cloud: PointCloud, s_level: PyramidLevel,
                  cfg: RegConfig) -> RigidTransform:
    """Trimmed point-to-point iterations at the finest level. Point-to-plane
    is blind to tangential slide on smooth surfaces (the residual lies in
    the null space of the normals), so a final point-to-point stage with a
    tight correspondence radius pins down the remaining in-surface drift."""
    radius = s_level.delta
    pts = m_cloud.points
    for _ in range(min(cfg.icp_max_iters, 10)):
        d, idx = s_level.tree.query(T.apply(pts), workers=-1)
        keep = (d <= radius) & (d <= np.quantile(d, 1.0 - cfg.trim_alpha))
        if keep.sum() < 3:
            break
        T_next, _ = rigid_fit(pts[keep], s_level.cloud.points[idx[keep]])
        delta = np.abs(T_next.matrix - T.matrix).max()
        T = T_next
        if delta < 1e-10:
            break
    return T


def refine_icp(T_init: RigidTransform, model_pyr: Pyramid, scene_pyr: Pyramid,
               cfg: RegConfig):
    """Coarse-to-fine robust ICP. Returns (pose, trimmed_mean_dist); never
    returns a pose whose fine-level trimmed distance exceeds the initial
    one."""
    d_init = _trimmed_dist(T_init, model_pyr.finest.cloud, scene_pyr.finest, cfg)
    T = T_init
    for lvl in range(len(scene_pyr.levels)):
        T = icp_level(T, model_pyr.levels[lvl].cloud, scene_pyr.levels[lvl], cfg,
                      first_level=(lvl == 0))
    T_p = _polish_point(T, model_pyr.finest.cloud, scene_pyr.finest, cfg)
    d_polish = _trimmed_dist(T_p, model_pyr.finest.cloud, scene_pyr.finest, cfg)
    d_final = _trimmed_dist(T, model_pyr.finest.cloud, scene_pyr.finest, cfg)
    if d_polish <= d_final:
        T, d_final = T_p, d_polish
    if d_final > d_init:
        return T_init, d_init
    return T, d_final


def _trimmed_dist(T, m_cloud, s_level, cfg: RegConfig) -> float:
    d, _ = s_level.tree.query(T.apply(m_cloud.points), workers=-1)
    sel = np.sort(d[d <= cfg.tau_fine])
    if len(sel) == 0:
        return cfg.d_max
    n_drop = int(np.floor(cfg.trim_alpha * len(sel)))
    kept = sel[: len(sel) - n_drop] if n_drop else sel
    return float(min(np.mean(kept), cfg.d_max))


def score(T: RigidTransform, model_fine: PointCloud, scene_fine: PyramidLevel,
          cfg: RegConfig):
    """Quality score: coverage and trimmed residual blended by
    (lambda_c, lambda_r). Returns (s, coverage, trimmed_mean_dist)."""
    d, _ = scene_fine.tree.query(T.apply(model_fine.points), workers=-1)
    inl = d <= cfg.tau_fine
    coverage = float(inl.mean()) if len(d) else 0.0
    if not inl.any():
        return 0.0, 0.0, cfg.d_max
    sel = np.sort(d[inl])
    n_drop = int(np.floor(cfg.trim_alpha * len(sel)))
    kept = sel[: len(sel) - n_drop] if n_drop else sel
    trimmed = float(min(np.mean(kept), cfg.d_max))
    s = cfg.lambda_c * coverage + cfg.lambda_r * (1.0 - trimmed / cfg.d_max)
    return float(s), coverage, trimmed


def temporal_accept(state: RegistrationState, best: RegistrationResult,
                    cfg: RegConfig) -> bool:
    """Stability filter. Accepts on: (a) first pose with enough coverage,
    (b) continuity (near the current pose, score within delta_s_min),
    (c) justified jump (score improves by at least delta_s_min),
    (d) escape after prolonged inactivity."""
    accept = False
    if state.pose is None:
        accept = best.coverage >= cfg.min_coverage
    else:
        near = (
            rotation_angle_deg(state.pose.rotation, best.pose.rotation) <= cfg.continuity_rot_deg
            and np.linalg.norm(state.pose.translation - best.pose.translation) <= cfg.continuity_trans
        )
        if near:
            accept = best.score >= state.score - cfg.delta_s_min
        else:
            accept = best.score >= state.score + cfg.delta_s_min
        if not accept and state.frames_since_accept > cfg.escape_after:
            accept = best.coverage >= cfg.min_coverage
    if accept:
        state.pose = best.pose
        state.score = best.score
        state.frames_since_accept = 0
    else:
        state.frames_since_accept += 1
    return accept


def register_frame(state: RegistrationState, model: ModelTemplate,
                   scene_cloud: PointCloud, cfg: RegConfig, rng=None) -> RegistrationResult:
    """Full per-frame registration: init, candidate pool, multi-scale
    refinement, scoring, temporal filtering."""
    if len(scene_cloud) < 4 * cfg.ransac_sample:
        raise DegenerateInputError(f"scene too small ({len(scene_cloud)} points)")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    try:
        scene_pyr = build_pyramid(scene_cloud, cfg.levels, cfg.delta_base)
    except InsufficientPointsError as e:
        raise DegenerateInputError(str(e)) from e
    # Global feature-based initialization runs when tracking is cold or has
    # been lost for a while; with a trusted prior the candidate pool (prior
    # plus symmetry flips) already covers the search space and skipping the
    # feature stage keeps per-frame cost down.
    if state.pose is None or state.frames_since_accept > cfg.escape_after:
        scene_feats = compute_fpfh(scene_pyr.coarsest.cloud, cfg.fpfh_radius_scale * cfg.delta_coarse)
        T0 = global_init(model.pyramid.coarsest, model.features_coarse,
                         scene_pyr.coarsest, scene_feats, cfg, rng=rng)
    else:
        T0 = state.pose
    pool = spawn_candidates(state.pose, T0, model)

    # Pruning only needs a rough ranking, so the per-candidate pass runs a
    # short coarse-level ICP and scores on the mid pyramid level; survivors
    # are re-scored on the finest level after full refinement.
    mid = scene_pyr.levels[len(scene_pyr.levels) // 2]
    candidates = []
    for order, T in enumerate(pool):
        try:
            if cfg.prune_to > 0:
                T_c = icp_level(T, model.pyramid.coarsest.cloud, scene_pyr.coarsest, cfg, True,
                                max_iters=min(cfg.icp_max_iters, 10))
            else:
                T_c, _ = refine_icp(T, model.pyramid, scene_pyr, cfg)
        except NoOverlapError:
            candidates.append((0.0, 0.0, cfg.d_max, order, T))
            continue
        if cfg.prune_to > 0:
            s, cov, dist = score(T_c, model.pyramid.levels[len(model.pyramid.levels) // 2].cloud,
                                 mid, cfg)
        else:
            s, cov, dist = score(T_c, model.pyramid.finest.cloud, scene_pyr.finest, cfg)
        candidates.append((s, cov, dist, order, T_c))

    if cfg.prune_to > 0:
        candidates.sort(key=lambda c: (-c[0], c[2], c[3]))
        keep = candidates[: cfg.prune_to]
        # the prior-seeded candidate (order 0) always earns full refinement:
        # coarse-level scoring is too blunt to arbitrate temporal continuity
        if state.pose is not None and all(c[3] != 0 for c in keep):
            prior_c = next((c for c in candidates if c[3] == 0), None)
            if prior_c is not None:
                keep = keep + [prior_c]
        refined = []
        for s, cov, dist, order, T in keep:
            try:
                T_f, _ = refine_icp(T, model.pyramid, scene_pyr, cfg)
            except NoOverlapError:
                refined.append((0.0, 0.0, cfg.d_max, order, T))
                continue
            s, cov, dist = score(T_f, model.pyramid.finest.cloud, scene_pyr.finest, cfg)
            refined.append((s, cov, dist, order, T_f))
        candidates = refined

    if state.pose is not None:
        # the unrefined prior competes too: when ICP only slides the pose
        # along a weakly constrained direction, staying put should win
        s_p, cov_p, dist_p = score(state.pose, model.pyramid.finest.cloud,
                                   scene_pyr.finest, cfg)
        candidates.append((s_p, cov_p, dist_p, -1, state.pose))

    candidates.sort(key=lambda c: (-c[0], c[2], c[3]))
    s, cov, dist, _, T_best = candidates[0]
    result = RegistrationResult(
        pose=T_best, score=s, coverage=cov, trimmed_mean_dist=dist,
        accepted=False, candidate_count=len(pool),
    )
    accepted = temporal_accept(state, result, cfg)
    return replace(result, accepted=accepted)
