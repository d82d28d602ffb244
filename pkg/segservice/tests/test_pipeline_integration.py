"""Conformance against the registration pipeline's HTTP segmenter client.

These tests run a real uvicorn server and drive it through `surfreg`'s
public client and tracking APIs, the same path a deployment would use.
"""

import socket
import threading
import time

import numpy as np
import pytest
import uvicorn

from segservice import create_app
from segservice.growing import segment as local_segment

from surfreg.config import config_from_dict
from surfreg.fusion import SceneMap, fuse_frame
from surfreg.geometry import voxel_key
from surfreg.masking import SurfaceTracker
from surfreg.mesh import point_mesh_distance
from surfreg.render import synth_render
from surfreg.scenes import (
    default_model_pose,
    make_distractor_box,
    make_torso_phantom,
    torso_orbit,
)
from surfreg.segclient import ServiceSegmenter


@pytest.fixture(scope="module")
def server_url():
    sock = socket.socket()
    sock.bind(("127.0.0.1", 0))
    port = sock.getsockname()[1]
    sock.close()
    server = uvicorn.Server(uvicorn.Config(create_app(), host="127.0.0.1", port=port,
                                           log_level="error"))
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.time() + 10
    while not server.started:
        assert time.time() < deadline, "server did not start"
        time.sleep(0.05)
    yield f"http://127.0.0.1:{port}"
    server.should_exit = True
    thread.join(timeout=5)


class TestClientConformance:
    def test_health_probe(self, server_url):
        info = ServiceSegmenter(server_url).health()
        assert info["status"] == "ok"
        assert info["backend"] == "region-growing"

    def test_raster_roundtrip_lossless(self, server_url):
        # encode/decode identity through the real wire on 10 random images:
        # the served mask equals segmenting the same pixels in-process
        seg = ServiceSegmenter(server_url)
        rng = np.random.default_rng(42)
        for _ in range(10):
            img = rng.integers(0, 255, (20, 26, 3), dtype=np.uint8)
            mask, conf = seg.segment(img, [((13, 10), True)])
            local_mask, local_conf = local_segment(img, [{"x": 13, "y": 10, "positive": True}])
            assert np.array_equal(mask, local_mask)
            assert conf == pytest.approx(local_conf)


class TestTrackingThroughService:
    def test_final_voxel_mask_iou(self, server_url):
        # 20-frame orbit of the flat-shaded (two-tone) target with a
        # distractor, segmented remotely frame by frame
        cfg = config_from_dict({"source": {"frames": 20, "noise_sigma": 0.0}})
        mesh = make_torso_phantom()
        pose = default_model_pose()
        cams = torso_orbit(20, distance=cfg.source.distance)
        frames = synth_render(mesh, pose, cams, distractors=[make_distractor_box()],
                              shading=0.0)
        seg = ServiceSegmenter(server_url)
        scene_map = SceneMap(cfg.fusion.delta_map)
        tracker = None
        for f in frames:
            cloud = fuse_frame(f, cfg.fusion.delta_send)
            scene_map.accumulate(cloud, f.timestamp)
            if tracker is None:
                h, w = f.pv_image.shape[:2]
                tracker = SurfaceTracker(seg, cfg.segmentation, [((w // 2, h // 2), True)])
            tracker.process(f, cloud, scene_map.snapshot())
        pts = scene_map.snapshot().points
        local = (pts - pose.translation) @ pose.rotation
        d = point_mesh_distance(local, mesh)
        res = cfg.segmentation.voxel_res
        gt = frozenset(map(tuple, voxel_key(pts[d < res], res)))
        got = frozenset(tracker.mask.voxel_set())
        assert len(gt & got) / len(gt | got) >= 0.85  # [DERIVED] measured 0.978
