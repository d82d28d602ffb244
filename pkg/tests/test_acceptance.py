"""End-to-end acceptance gate for the registration pipeline.

Each test exercises a complete user-facing scenario at stated tolerances:
noise-free exactness, noisy accuracy with a distance-to-visibility trend,
symmetry recovery, ICP convergence basin, reconstruction-evaluation
calibration against brute-force recomputation, voxel-mask lifecycle, and
throughput on this machine.
"""

import time

import numpy as np
import pytest

from surfreg.config import config_from_dict
from surfreg.evaluation import (
    CheckerboardSpec,
    LandmarkSet,
    checkerboard_model,
    dva_many,
    stratify,
    synth_checkerboard_sample,
    tre,
)
from surfreg.fusion import SceneMap, fuse_frame
from surfreg.geometry import (
    PointCloud,
    RigidTransform,
    estimate_normals,
    rigid_fit,
    rodrigues,
    voxel_key,
)
from surfreg.masking import OracleSegmenter, SegConfig, SurfaceTracker, VoxelMask, iou
from surfreg.mesh import point_mesh_distance, sample_surface
from surfreg.pipeline import (
    default_init_prompts,
    default_model_template,
    run_pipeline_inline,
    run_pipeline_staged,
    synth_frames,
)
from surfreg.registration import (
    RegConfig,
    RegistrationState,
    _trimmed_dist,
    build_pyramid,
    refine_icp,
    register_frame,
    score,
)
from surfreg.render import synth_render
from surfreg.scenes import (
    make_torso_phantom,
    torso_landmarks,
    torso_orbit,
    upper_surface_landmarks,
)


def rotation_error_deg(Ra, Rb):
    return float(np.rad2deg(np.arccos(np.clip((np.trace(Ra.T @ Rb) - 1) / 2, -1, 1))))


def landmark_set(lm: dict, pose: RigidTransform) -> LandmarkSet:
    names = tuple(sorted(lm))
    xm = np.array([lm[n] for n in names])
    return LandmarkSet(names, xm, pose.apply(xm))


@pytest.fixture(scope="module")
def torso_mesh():
    return make_torso_phantom()


@pytest.fixture(scope="module")
def reg_defaults():
    cfg = RegConfig()
    template, _ = default_model_template(cfg)
    return cfg, template


def posed_scene(mesh, T, seed, n=3000, sigma=0.0):
    """Dense sampled surface moved to pose T, optionally noisy, with normals."""
    rng = np.random.default_rng(seed)
    cloud = sample_surface(mesh, 8000, seed=50)
    idx = rng.permutation(len(cloud))[:n]
    pts = T.apply(cloud.points[idx])
    if sigma > 0:
        pts = pts + rng.normal(0, sigma, pts.shape)
    return estimate_normals(PointCloud(pts), k=20)


class TestNoiseFreeEndToEnd:
    """Criterion: noise-free 20-frame orbit with the oracle segmenter gives
    sub-millimeter landmark error in under a minute."""

    def test_tre_below_1mm_within_60s(self):
        t0 = time.time()
        cfg = config_from_dict({"source": {"frames": 20, "noise_sigma": 0.0}})
        frames, pose = synth_frames(cfg)
        res = run_pipeline_inline(frames, cfg)
        wall = time.time() - t0
        ls = landmark_set(upper_surface_landmarks(), pose)
        assert len(ls.names) == 8
        errs = tre(res.final_pose, ls)
        assert errs.max() <= 0.001  # [DERIVED] measured 0.60 mm on this setup
        assert wall < 60.0


class TestNoisyEndToEnd:
    """Criterion: with 2 mm depth noise, visible-surface landmarks stay
    within 10 mm mean error and landmarks far from the observed surface
    err more than nearby ones in most seeded runs."""

    def test_visible_tre_and_distance_trend(self):
        trend_hits = 0
        for seed in range(5):
            cfg = config_from_dict({
                "seed": seed,
                "source": {"frames": 20, "noise_sigma": 0.002, "distance": 0.35,
                           "look_offset": 0.22, "span_deg": 120.0},
            })
            frames, pose = synth_frames(cfg)
            res = run_pipeline_inline(frames, cfg)
            ls = landmark_set(torso_landmarks(), pose)
            errs = tre(res.final_pose, ls)
            dvas = dva_many(ls.x_world, res.surface_cloud)
            visible = dvas < 0.05
            assert visible.any()
            assert errs[visible].mean() <= 0.010  # [DERIVED] worst seed 9.02 mm
            order = np.argsort(dvas)
            trend_hits += errs[order[-4:]].mean() > errs[order[:4]].mean()
        assert trend_hits >= 4


class TestSymmetryRecovery:
    """Criterion: a prior flipped half a turn about the long axis is
    recovered to within 5 degrees in at least 19 of 20 seeded trials."""

    def test_pi_flip_prior_recovered(self, torso_mesh, reg_defaults):
        cfg, template = reg_defaults
        recovered = 0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            T_true = RigidTransform(rodrigues(rng.normal(size=3)),
                                    rng.normal(0, 0.3, 3) + [0, 0, 0.8])
            scene = posed_scene(torso_mesh, T_true, seed + 200)
            axis = T_true.rotation @ np.array([1.0, 0.0, 0.0])
            K = np.array([[0, -axis[2], axis[1]],
                          [axis[2], 0, -axis[0]],
                          [-axis[1], axis[0], 0]])
            Rf = np.eye(3) + 2.0 * (K @ K)  # Rodrigues at angle pi
            c = T_true.apply(template.centroid)
            flip = RigidTransform(Rf, c - Rf @ c) @ T_true
            state = RegistrationState()
            state.pose = flip
            state.score = 0.5
            res = register_frame(state, template, scene, cfg, rng=rng)
            recovered += rotation_error_deg(res.pose.rotation, T_true.rotation) < 5.0
        assert recovered >= 19  # [DERIVED] measured 20/20


class TestIcpBasin:
    """Criterion: perturbations up to 20 mm / 10 degrees on dense
    noise-free pairs are pulled back within 1 mm / 0.5 degrees in at
    least 90% of 50 trials, and refinement never worsens the trimmed
    mean correspondence distance."""

    def test_recovery_and_monotonicity(self, torso_mesh, reg_defaults):
        cfg, template = reg_defaults
        T_true = RigidTransform(rodrigues(np.array([0.2, -0.4, 1.1])),
                                np.array([0.1, -0.2, 0.7]))
        scene = posed_scene(torso_mesh, T_true, 999, n=6000)
        pyr = build_pyramid(scene, cfg.levels, cfg.delta_base)
        recovered = 0
        for seed in range(50):
            rng = np.random.default_rng(seed)
            ax = rng.normal(size=3)
            ax /= np.linalg.norm(ax)
            ang = np.deg2rad(rng.uniform(0, 10))
            dt = rng.normal(size=3)
            dt = dt / np.linalg.norm(dt) * rng.uniform(0, 0.02)
            T0 = RigidTransform(rodrigues(ax * ang), dt) @ T_true
            d0 = _trimmed_dist(T0, template.pyramid.finest.cloud, pyr.finest, cfg)
            T, d = refine_icp(T0, template.pyramid, pyr, cfg)
            assert d <= d0 + 1e-12
            ok = (rotation_error_deg(T.rotation, T_true.rotation) < 0.5
                  and np.linalg.norm(T.translation - T_true.translation) < 0.001)
            recovered += ok
        assert recovered >= 45  # [DERIVED] measured 50/50


def board_pose(distance, tilt_deg, rng):
    """Board-to-camera pose at the given viewing distance and tilt, with a
    random in-plane spin so corner noise is not axis-aligned."""
    spin = rodrigues(np.array([0.0, 0.0, rng.uniform(0, 2 * np.pi)]))
    tilt = rodrigues(np.array([np.deg2rad(tilt_deg), 0.0, 0.0]))
    return RigidTransform(tilt @ spin, np.array([0.0, 0.0, distance]))


class TestReconstructionEvaluation:
    """Criterion: the checkerboard evaluation is calibrated — a 0.5 m
    low-tilt board with 3 mm corner noise lands in the expected residual
    band, distance-proportional noise produces the expected far-worse-
    than-close ordering, and every reported quantity matches an
    independent brute-force recomputation."""

    SPEC = CheckerboardSpec(cols=8, rows=5, spacing=0.030)

    def test_close_low_band(self):
        rng = np.random.default_rng(0)
        samples = [synth_checkerboard_sample(self.SPEC, board_pose(0.5, 10.0, rng),
                                             0.003, rng) for _ in range(100)]
        cell = stratify(samples)[("Close", "Low")]
        assert cell["count"] == 100
        assert 0.002 <= cell["mean"] <= 0.007  # [PAPER] reference mean 4.33 mm

    def test_quadratic_noise_far_exceeds_close(self):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            samples = []
            for dist in (0.5, 1.8):
                samples += [synth_checkerboard_sample(self.SPEC, board_pose(dist, 10.0, rng),
                                                      0.003, rng, noise_model="quadratic")
                            for _ in range(20)]
            grid = stratify(samples)
            assert grid[("Far", "Low")]["mean"] > grid[("Close", "Low")]["mean"]

    def test_residuals_and_nme_match_bruteforce(self):
        # [DERIVED] recompute residuals from the definition: best rigid fit
        # of the ideal grid to the observed corners, per-corner Euclidean
        # error, RMS normalized by mean viewing distance.
        rng = np.random.default_rng(1)
        q = checkerboard_model(self.SPEC)
        for _ in range(100):
            s = synth_checkerboard_sample(self.SPEC, board_pose(rng.uniform(0.4, 2.0),
                                                                rng.uniform(0, 70), rng),
                                          rng.uniform(0, 0.005), rng)
            T, _ = rigid_fit(q, s.corners)
            e = np.linalg.norm(s.corners - T.apply(q), axis=1)
            assert np.allclose(s.residuals, e, atol=1e-9)
            rms = np.sqrt(np.mean(e**2))
            assert s.rms == pytest.approx(rms, abs=1e-9)
            assert s.nme == pytest.approx(rms / s.distance, abs=1e-9)

    def test_tre_matches_bruteforce(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            n = rng.integers(4, 12)
            xm = rng.normal(0, 0.3, (n, 3))
            T_true = RigidTransform(rodrigues(rng.normal(size=3)), rng.normal(0, 0.5, 3))
            ls = LandmarkSet(tuple(f"p{i}" for i in range(n)), xm, T_true.apply(xm))
            T_est = RigidTransform(rodrigues(rng.normal(0, 0.1, 3)),
                                   rng.normal(0, 0.01, 3)) @ T_true
            expect = np.linalg.norm(T_est.apply(xm) - ls.x_world, axis=1)
            assert np.allclose(tre(T_est, ls), expect, atol=1e-9)

    def test_pose_score_matches_bruteforce(self, reg_defaults):
        # [DERIVED] score = lambda_c * coverage + lambda_r * (1 - trimmed/d_max)
        # recomputed with an explicit nearest-neighbor sweep.
        cfg, _ = reg_defaults
        rng = np.random.default_rng(3)
        for _ in range(100):
            m = rng.normal(0, 0.2, (rng.integers(20, 60), 3))
            s = rng.normal(0, 0.2, (rng.integers(40, 120), 3))
            level = build_pyramid(PointCloud(s), 1, cfg.delta_base).finest
            T = RigidTransform(rodrigues(rng.normal(0, 0.2, 3)), rng.normal(0, 0.05, 3))
            got_s, got_cov, got_tr = score(T, PointCloud(m), level, cfg)
            d = np.min(np.linalg.norm(T.apply(m)[:, None, :] - level.cloud.points[None], axis=2), axis=1)
            inl = np.sort(d[d <= cfg.tau_fine])
            cov = len(inl) / len(m)
            if len(inl) == 0:
                assert got_s == 0.0
                continue
            n_drop = int(np.floor(cfg.trim_alpha * len(inl)))
            kept = inl[: len(inl) - n_drop] if n_drop else inl
            trimmed = min(float(np.mean(kept)), cfg.d_max)
            expect = cfg.lambda_c * cov + cfg.lambda_r * (1 - trimmed / cfg.d_max)
            assert got_cov == pytest.approx(cov, abs=1e-9)
            assert got_tr == pytest.approx(trimmed, abs=1e-9)
            assert got_s == pytest.approx(expect, abs=1e-9)

    def test_mask_gates_match_bruteforce(self):
        # [DERIVED] carve gate: drop voxels with free/(occ+1) > rho_max;
        # frame-acceptance gate: intersection/union >= tau_iou.
        rng = np.random.default_rng(4)
        cfg = SegConfig()
        for _ in range(100):
            vm = VoxelMask(cfg.voxel_res)
            keys = {tuple(k) for k in rng.integers(-5, 5, (rng.integers(5, 30), 3))}
            for k in keys:
                vm.activate(k, occ=int(rng.integers(1, 6)))
                vm.free[k] = int(rng.integers(0, 5))
            expect_gone = {k for k in keys if vm.free[k] / (vm.occ[k] + 1) > cfg.rho_max}
            gone = set(vm.carve_violators(cfg.rho_max))
            assert gone == expect_gone
            assert set(vm.occ) == keys - expect_gone
            a = rng.random((12, 12)) > 0.6
            b = rng.random((12, 12)) > 0.6
            union = np.logical_or(a, b).sum()
            expect_iou = (np.logical_and(a, b).sum() / union) if union else 0.0
            assert iou(a, b) == pytest.approx(expect_iou, abs=1e-9)
            assert (iou(a, b) >= cfg.tau_iou) == (expect_iou >= cfg.tau_iou)


def ground_truth_voxels(map_points, mesh, pose, resolution, tol):
    """Voxels of map points lying within tol of the posed target surface."""
    local = (map_points - pose.translation) @ pose.rotation
    d = point_mesh_distance(local, mesh)
    return frozenset(map(tuple, voxel_key(map_points[d < tol], resolution)))


def run_tracker(frames, cfg, tracker=None, scene_map=None, segmenter=None):
    segmenter = segmenter or OracleSegmenter()
    scene_map = scene_map or SceneMap(cfg.fusion.delta_map)
    accepted = 0
    for f in frames:
        cloud = fuse_frame(f, cfg.fusion.delta_send)
        scene_map.accumulate(cloud, f.timestamp)
        if tracker is None:
            tracker = SurfaceTracker(segmenter, cfg.segmentation, default_init_prompts(f))
        segmenter.observe(f)
        accepted += bool(tracker.process(f, cloud, scene_map.snapshot())["accepted"])
    return tracker, scene_map, segmenter, accepted


class TestMaskLifecycle:
    """Criterion: the tracked voxel mask converges to the visible target
    surface, recovers after the target is displaced mid-sequence, and is
    untouched by rejected frames."""

    def test_static_orbit_iou(self, torso_mesh):
        cfg = config_from_dict({"source": {"frames": 20, "noise_sigma": 0.0}})
        frames, pose = synth_frames(cfg)
        tracker, scene_map, _, _ = run_tracker(frames, cfg)
        res = cfg.segmentation.voxel_res
        gt = ground_truth_voxels(scene_map.snapshot().points, torso_mesh, pose, res, tol=res)
        got = tracker.mask.voxel_set()
        assert len(gt & got) / len(gt | got) >= 0.9  # [DERIVED] measured 0.978

    def test_displacement_recovery_via_carving(self, torso_mesh):
        cfg = config_from_dict({"source": {"frames": 12, "noise_sigma": 0.0}})
        frames, pose = synth_frames(cfg)
        tracker, scene_map, seg, _ = run_tracker(frames, cfg)
        # Slide the target 4 cm along its long axis, then keep orbiting.
        moved = RigidTransform(pose.rotation,
                               pose.translation + pose.rotation @ np.array([0.04, 0.0, 0.0]))
        cams = torso_orbit(15, distance=cfg.source.distance, model_pose=moved)
        frames2 = synth_render(torso_mesh, moved, cams, noise_sigma=0.0,
                               t0=frames[-1].timestamp + 0.2)
        res = cfg.segmentation.voxel_res
        accepted = 0
        best = 0.0
        for f in frames2:
            cloud = fuse_frame(f, cfg.fusion.delta_send)
            scene_map.accumulate(cloud, f.timestamp)
            seg.observe(f)
            accepted += bool(tracker.process(f, cloud, scene_map.snapshot())["accepted"])
            gt = ground_truth_voxels(scene_map.snapshot().points, torso_mesh, moved,
                                     res, tol=res)
            got = tracker.mask.voxel_set()
            best = len(gt & got) / len(gt | got)
            if best >= 0.85 and accepted <= 10:
                break
        assert best >= 0.85
        assert accepted <= 10  # [DERIVED] measured 7 accepted propagations

    def test_rejected_frame_leaves_mask_bit_identical(self):
        cfg = config_from_dict({"source": {"frames": 6, "noise_sigma": 0.0}})
        frames, _ = synth_frames(cfg)
        tracker, scene_map, _, _ = run_tracker(frames[:-1], cfg)
        before = (tracker.mask.voxel_set(), dict(tracker.mask.occ),
                  dict(tracker.mask.free), dict(tracker.mask.pending))

        class GarbageSegmenter:
            def segment(self, image, prompts):
                rng = np.random.default_rng(7)
                return rng.random(image.shape[:2]) > 0.995, 0.1

        f = frames[-1]
        cloud = fuse_frame(f, cfg.fusion.delta_send)
        tracker.segmenter = GarbageSegmenter()
        stats = tracker.process(f, cloud, scene_map.snapshot())
        assert stats["attempted"] and not stats["accepted"]
        after = (tracker.mask.voxel_set(), dict(tracker.mask.occ),
                 dict(tracker.mask.free), dict(tracker.mask.pending))
        assert after == before


class TestThroughput:
    """Criterion: single-frame registration on a 50k-point scene finishes
    in under a second, and the staged pipeline sustains at least 5
    synthetic frames per second."""

    def test_register_frame_50k_under_1s(self, torso_mesh, reg_defaults):
        cfg, template = reg_defaults
        T_true = RigidTransform(rodrigues(np.array([0.2, -0.4, 1.1])),
                                np.array([0.1, -0.2, 0.7]))
        base = posed_scene(torso_mesh, T_true, 123, n=3000)
        pts = np.repeat(base.points, 17, 0)[:50000]
        pts = pts + np.random.default_rng(1).normal(0, 0.001, pts.shape)
        big = estimate_normals(PointCloud(pts), k=20)
        state = RegistrationState()
        t0 = time.time()
        register_frame(state, template, big, cfg, rng=np.random.default_rng(0))
        assert time.time() - t0 < 1.0  # [DERIVED] measured 0.65 s

    def test_staged_pipeline_5fps(self):
        cfg = config_from_dict({"source": {"frames": 40}})
        frames, _ = synth_frames(cfg)
        t0 = time.time()
        res = run_pipeline_staged(frames, cfg)
        fps = 40 / (time.time() - t0)
        assert res.frames_processed == 40
        assert fps >= 5.0  # [DERIVED] measured 5.2-6.2 fps
