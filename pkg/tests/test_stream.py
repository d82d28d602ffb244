import json

import numpy as np
import pytest

from surfreg.errors import FormatError, InvalidParameterError
from surfreg.geometry import RigidTransform
from surfreg.stream import (
    DEPTH_DEFAULT,
    PV_DEFAULT,
    SensorFrame,
    load_recording,
    save_recording,
)


def _make_frame(t, rng, with_label=False, with_gt_pose=False):
    depth = rng.uniform(0.3, 3.0, size=(DEPTH_DEFAULT.height, DEPTH_DEFAULT.width))
    depth = np.round(depth * 1000.0) / 1000.0  # millimeter-exact for round trips
    depth[rng.random(depth.shape) < 0.05] = 0.0  # invalid pixels
    pv = rng.integers(0, 256, size=(PV_DEFAULT.height, PV_DEFAULT.width, 3), dtype=np.uint8)
    label = rng.random((PV_DEFAULT.height, PV_DEFAULT.width)) < 0.2 if with_label else None
    return SensorFrame(
        timestamp=t,
        pv_image=pv,
        depth_map=depth,
        pose_ref_to_world=RigidTransform.identity(),
        extr_depth_to_ref=RigidTransform.identity(),
        extr_pv_to_ref=RigidTransform.identity(),
        intr_depth=DEPTH_DEFAULT,
        intr_pv=PV_DEFAULT,
        gt_label_map=label,
        gt_model_pose=RigidTransform.identity() if with_gt_pose else None,
    )


class TestRoundTrip:
    def test_recording_round_trip_is_exact(self, tmp_path, rng):
        frames = [_make_frame(0.1 * i, rng, with_label=True, with_gt_pose=True)
                  for i in range(3)]
        save_recording(frames, tmp_path / "rec")
        loaded = list(load_recording(tmp_path / "rec"))
        assert len(loaded) == 3
        for a, b in zip(frames, loaded):
            assert a.timestamp == b.timestamp
            assert np.array_equal(a.pv_image, b.pv_image)
            assert np.array_equal(a.depth_map, b.depth_map)
            assert np.array_equal(a.gt_label_map, b.gt_label_map)
            assert np.allclose(a.pose_ref_to_world.matrix, b.pose_ref_to_world.matrix)
            assert np.allclose(a.gt_model_pose.matrix, b.gt_model_pose.matrix)

    def test_invalid_depth_stays_invalid(self, tmp_path, rng):
        fr = _make_frame(0.0, rng)
        save_recording([fr], tmp_path / "rec")
        back = next(iter(load_recording(tmp_path / "rec")))
        assert np.array_equal(back.depth_map == 0.0, fr.depth_map == 0.0)


class TestValidation:
    def test_non_increasing_timestamps_rejected(self, tmp_path, rng):
        frames = [_make_frame(1.0, rng), _make_frame(1.0, rng)]
        with pytest.raises(InvalidParameterError):
            save_recording(frames, tmp_path / "rec")

    def test_missing_manifest_is_io_error(self, tmp_path):
        with pytest.raises(FormatError):
            list(load_recording(tmp_path))

    def test_corrupt_manifest_names_missing_field(self, tmp_path, rng):
        save_recording([_make_frame(0.0, rng)], tmp_path / "rec")
        manifest = tmp_path / "rec" / "manifest.jsonl"
        rec = json.loads(manifest.read_text())
        del rec["pose_ref_to_world"]
        manifest.write_text(json.dumps(rec) + "\n")
        with pytest.raises(FormatError, match="pose_ref_to_world"):
            list(load_recording(tmp_path / "rec"))

    def test_manifest_parse_fails_before_any_frame_is_yielded(self, tmp_path, rng):
        save_recording([_make_frame(0.0, rng)], tmp_path / "rec")
        manifest = tmp_path / "rec" / "manifest.jsonl"
        manifest.write_text(manifest.read_text() + "{not json\n")
        with pytest.raises(FormatError):
            load_recording(tmp_path / "rec")  # eager manifest validation
