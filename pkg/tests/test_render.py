import numpy as np
import pytest

from surfreg.errors import InvalidParameterError
from surfreg.geometry import RigidTransform, backproject
from surfreg.mesh import make_quad
from surfreg.render import look_at, orbit_trajectory, synth_render
from surfreg.scenes import default_model_pose, make_torso_phantom


def _quad_facing_camera(z=2.0, size=2.0):
    """A quad in the z = z plane, normal toward the origin."""
    return make_quad(np.array([0.0, 0.0, z]), np.array([0.0, 0.0, -1.0]), size, size)


class TestLookAt:
    def test_camera_z_axis_points_at_target(self, rng):
        eye = rng.normal(size=3)
        target = rng.normal(size=3)
        T = look_at(eye, target)
        fwd = T.rotation[:, 2]
        want = (target - eye) / np.linalg.norm(target - eye)
        assert np.allclose(fwd, want, atol=1e-12)

    def test_orbit_radius_and_count(self):
        center = np.array([1.0, 2.0, 3.0])
        poses = orbit_trajectory(center, 1.5, 12, elevation_deg=30.0)
        assert len(poses) == 12
        for T in poses:
            assert abs(np.linalg.norm(T.translation - center) - 1.5) < 1e-12


class TestSynthRender:
    def test_depth_matches_analytic_plane_distance(self):
        quad = _quad_facing_camera(z=2.0)
        cam = RigidTransform.identity()  # camera at origin looking +z
        frames = synth_render(quad, RigidTransform.identity(), [cam], noise_sigma=0.0)
        fr = frames[0]
        z = fr.depth_map
        hit = z > 0
        assert hit.any()
        # For a frontoparallel plane at 2 m, every ray's z-coordinate is 2.
        K = fr.intr_depth
        vs, us = np.nonzero(hit)
        pts = backproject(K, np.stack([us, vs], 1).astype(float), z[hit])
        assert np.allclose(pts[:, 2], 2.0, atol=1e-9)

    def test_label_map_marks_target_only(self):
        mesh = make_torso_phantom()
        pose = default_model_pose()
        cam = look_at(pose.translation + np.array([0.0, 0.0, 1.0]), pose.translation)
        fr = synth_render(mesh, pose, [cam])[0]
        assert fr.gt_label_map is not None
        assert fr.gt_label_map.any()
        assert fr.gt_label_map.shape == fr.pv_image.shape[:2]

    def test_distractor_not_in_label_map(self):
        quad = _quad_facing_camera(z=2.0, size=0.5)
        side = make_quad(np.array([0.0, 0.0, 1.0]), np.array([0.0, 0.0, -1.0]), 4.0, 4.0)
        cam = RigidTransform.identity()
        fr = synth_render(quad, RigidTransform.identity(), [cam],
                          distractors=[(side, RigidTransform.identity())])[0]
        # the distractor plane occludes everything except... nothing of the
        # target: label map must be empty where the distractor is in front
        assert not fr.gt_label_map.any()

    def test_depth_noise_statistics(self):
        quad = _quad_facing_camera(z=2.0)
        cam = RigidTransform.identity()
        clean = synth_render(quad, RigidTransform.identity(), [cam], noise_sigma=0.0)[0]
        noisy = synth_render(quad, RigidTransform.identity(), [cam], noise_sigma=0.005,
                             seed=3)[0]
        hit = clean.depth_map > 0
        resid = noisy.depth_map[hit] - clean.depth_map[hit]
        assert 0.004 < resid.std() < 0.006
        assert abs(resid.mean()) < 5e-4

    def test_quadratic_noise_grows_with_distance(self):
        near = _quad_facing_camera(z=1.0, size=1.0)
        far = _quad_facing_camera(z=3.0, size=3.0)
        cam = RigidTransform.identity()
        fr_n = synth_render(near, RigidTransform.identity(), [cam], noise_sigma=0.003,
                            noise_model="quadratic", seed=1)[0]
        fr_f = synth_render(far, RigidTransform.identity(), [cam], noise_sigma=0.003,
                            noise_model="quadratic", seed=1)[0]
        clean_n = synth_render(near, RigidTransform.identity(), [cam])[0]
        clean_f = synth_render(far, RigidTransform.identity(), [cam])[0]
        s_n = (fr_n.depth_map - clean_n.depth_map)[clean_n.depth_map > 0].std()
        s_f = (fr_f.depth_map - clean_f.depth_map)[clean_f.depth_map > 0].std()
        assert s_f > 4 * s_n  # sigma scales with z^2: 9x expected

    def test_rendering_is_seed_deterministic(self):
        quad = _quad_facing_camera()
        cam = RigidTransform.identity()
        a = synth_render(quad, RigidTransform.identity(), [cam], noise_sigma=0.002, seed=5)[0]
        b = synth_render(quad, RigidTransform.identity(), [cam], noise_sigma=0.002, seed=5)[0]
        assert np.array_equal(a.depth_map, b.depth_map)
        assert np.array_equal(a.pv_image, b.pv_image)

    def test_negative_noise_rejected(self):
        quad = _quad_facing_camera()
        with pytest.raises(InvalidParameterError):
            synth_render(quad, RigidTransform.identity(), [RigidTransform.identity()],
                         noise_sigma=-0.001)

    def test_empty_trajectory_rejected(self):
        with pytest.raises(InvalidParameterError):
            synth_render(_quad_facing_camera(), RigidTransform.identity(), [])
