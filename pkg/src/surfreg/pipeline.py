"""End-to-end orchestration: frame source -> fusion -> surface tracking ->
registration, runnable inline or as queue-connected stages."""
from __future__ import annotations

import json
import logging
import queue
import threading
from dataclasses import dataclass, field

import numpy as np

from .config import PipelineConfig
from .errors import DegenerateInputError, EmptySurfaceError
from .fusion import SceneMap, fuse_frame
from .geometry import PointCloud, RigidTransform, estimate_normals
from .masking import OracleSegmenter, SurfaceTracker, extract_surface
from .mesh import sample_surface
from .registration import (
    ModelTemplate,
    RegConfig,
    RegistrationState,
    register_frame,
)
from .render import synth_render
from .scenes import (
    default_model_pose,
    make_distractor_box,
    make_torso_phantom,
    torso_orbit,
)
from .segclient import ServiceSegmenter
from .stream import load_recording

log = logging.getLogger(__name__)

MODEL_SAMPLES = 8000


def synth_frames(cfg: PipelineConfig, model_pose: RigidTransform | None = None):
    """Renders the built-in torso scene per the source config. Returns
    (frames, model_pose)."""
    pose = default_model_pose() if model_pose is None else model_pose
    mesh = make_torso_phantom()
    distractors = []
    if cfg.source.distractor:
        distractors.append(make_distractor_box())
    traj = torso_orbit(cfg.source.frames, distance=cfg.source.distance,
                       elevation_deg=cfg.source.elevation_deg,
                       span_deg=cfg.source.span_deg, model_pose=pose,
                       look_offset=cfg.source.look_offset)
    frames = synth_render(
        mesh, pose, traj,
        noise_sigma=cfg.source.noise_sigma,
        noise_model=cfg.source.noise_model,
        distractors=distractors,
        seed=cfg.seed,
    )
    return frames, pose


def frame_source(cfg: PipelineConfig):
    """Frames per the source config: recorded stream or synthetic scene."""
    if cfg.source.kind == "recording":
        return load_recording(cfg.source.path)
    frames, _ = synth_frames(cfg)
    return frames


def make_segmenter(cfg: PipelineConfig):
    if cfg.segmenter == "oracle":
        return OracleSegmenter()
    url = cfg.segmenter.split(":", 1)[1]
    return ServiceSegmenter(url)


def default_init_prompts(frame) -> list:
    """A single positive prompt at the projected target centroid (synthetic
    frames) or the image center (recordings without ground truth)."""
    if frame.gt_label_map is not None and frame.gt_label_map.any():
        vs, us = np.nonzero(frame.gt_label_map)
        return [((int(np.median(us)), int(np.median(vs))), True)]
    h, w = frame.pv_image.shape[:2]
    return [((w // 2, h // 2), True)]


def default_model_template(cfg: RegConfig, seed: int = 1) -> tuple[ModelTemplate, PointCloud]:
    """Model template sampled from the built-in torso phantom."""
    cloud = sample_surface(make_torso_phantom(), MODEL_SAMPLES, seed=seed)
    cloud = estimate_normals(cloud, k=20)
    return ModelTemplate.build(cloud, cfg), cloud


@dataclass
class PipelineResult:
    poses: list = field(default_factory=list)  # (frame_index, RigidTransform, score, accepted)
    seg_stats: list = field(default_factory=list)
    map_cloud: PointCloud | None = None
    surface_cloud: PointCloud | None = None
    frames_processed: int = 0

    @property
    def final_pose(self) -> RigidTransform | None:
        accepted = [p for p in self.poses if p[3]]
        return accepted[-1][1] if accepted else None


def _register_due(index: int, every: int) -> bool:
    return (index + 1) % every == 0


def run_pipeline_inline(frames, cfg: PipelineConfig,
                        template: ModelTemplate | None = None) -> PipelineResult:
    """Single-threaded reference pipeline; registration runs every
    cfg.register_every frames on the tracked surface."""
    reg_cfg = cfg.registration
    if template is None:
        template, _ = default_model_template(reg_cfg)
    segmenter = make_segmenter(cfg)
    tracker: SurfaceTracker | None = None
    scene_map = SceneMap(cfg.fusion.delta_map)
    state = RegistrationState()
    rng = np.random.default_rng(reg_cfg.seed)
    result = PipelineResult()
    for i, frame in enumerate(frames):
        cloud = fuse_frame(frame, cfg.fusion.delta_send)
        scene_map.accumulate(cloud, frame.timestamp)
        snapshot = scene_map.snapshot()
        if tracker is None:
            tracker = SurfaceTracker(segmenter, cfg.segmentation, default_init_prompts(frame))
        if hasattr(segmenter, "observe"):
            segmenter.observe(frame)
        stats = tracker.process(frame, cloud, snapshot)
        stats["frame"] = i
        result.seg_stats.append(stats)
        if tracker.mask is not None and _register_due(i, cfg.register_every):
            try:
                surface = extract_surface(tracker.mask, snapshot)
            except EmptySurfaceError:
                surface = None
            if surface is not None and len(surface) >= 4 * reg_cfg.ransac_sample:
                result.surface_cloud = surface
                try:
                    res = register_frame(state, template, surface, reg_cfg, rng=rng)
                except DegenerateInputError as e:
                    log.info("registration skipped at frame %d: %s", i, e)
                    continue
                result.poses.append((i, res.pose, res.score, res.accepted))
        result.frames_processed = i + 1
    result.map_cloud = scene_map.snapshot()
    if result.surface_cloud is None and tracker is not None and tracker.mask is not None:
        try:
            result.surface_cloud = extract_surface(tracker.mask, result.map_cloud)
        except EmptySurfaceError:
            pass
    return result


_SENTINEL = object()


def run_pipeline_staged(frames, cfg: PipelineConfig,
                        template: ModelTemplate | None = None,
                        queue_size: int = 4) -> PipelineResult:
    """Three-stage pipeline (fuse -> track -> register) connected by
    bounded queues. Producers block when a queue fills (back-pressure); a
    stage failure drains the queues and aborts with that stage's error.
    Stage outputs are identical to the inline pipeline: work items carry
    frame indices, so registration cadence does not depend on timing."""
    reg_cfg = cfg.registration
    if template is None:
        template, _ = default_model_template(reg_cfg)
    segmenter = make_segmenter(cfg)
    q_fused: queue.Queue = queue.Queue(maxsize=queue_size)
    q_surface: queue.Queue = queue.Queue(maxsize=queue_size)
    result = PipelineResult()
    errors: list[BaseException] = []
    stop = threading.Event()

    def _put(q, item):
        while not stop.is_set():
            try:
                q.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def fuse_stage():
        try:
            scene_map = SceneMap(cfg.fusion.delta_map)
            for i, frame in enumerate(frames):
                if stop.is_set():
                    return
                cloud = fuse_frame(frame, cfg.fusion.delta_send)
                scene_map.accumulate(cloud, frame.timestamp)
                if not _put(q_fused, (i, frame, cloud, scene_map.snapshot())):
                    return
            result.map_cloud = scene_map.snapshot()
        except BaseException as e:  # noqa: BLE001 - reported to the caller
            errors.append(e)
            stop.set()
        finally:
            _put(q_fused, _SENTINEL)

    def track_stage():
        tracker: SurfaceTracker | None = None
        try:
            while True:
                item = q_fused.get()
                if item is _SENTINEL or stop.is_set():
                    return
                i, frame, cloud, snapshot = item
                if tracker is None:
                    tracker = SurfaceTracker(segmenter, cfg.segmentation,
                                             default_init_prompts(frame))
                if hasattr(segmenter, "observe"):
                    segmenter.observe(frame)
                stats = tracker.process(frame, cloud, snapshot)
                stats["frame"] = i
                result.seg_stats.append(stats)
                result.frames_processed = i + 1
                if tracker.mask is not None and _register_due(i, cfg.register_every):
                    try:
                        surface = extract_surface(tracker.mask, snapshot)
                    except EmptySurfaceError:
                        continue
                    if len(surface) >= 4 * reg_cfg.ransac_sample:
                        if not _put(q_surface, (i, surface)):
                            return
        except BaseException as e:  # noqa: BLE001
            errors.append(e)
            stop.set()
        finally:
            _put(q_surface, _SENTINEL)

    def register_stage():
        state = RegistrationState()
        rng = np.random.default_rng(reg_cfg.seed)
        try:
            while True:
                item = q_surface.get()
                if item is _SENTINEL or stop.is_set():
                    return
                i, surface = item
                result.surface_cloud = surface
                try:
                    res = register_frame(state, template, surface, reg_cfg, rng=rng)
                except DegenerateInputError as e:
                    log.info("registration skipped at frame %d: %s", i, e)
                    continue
                result.poses.append((i, res.pose, res.score, res.accepted))
        except BaseException as e:  # noqa: BLE001
            errors.append(e)
            stop.set()

    threads = [threading.Thread(target=f, name=f.__name__) for f in
               (fuse_stage, track_stage, register_stage)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    return result


def poses_jsonl(result: PipelineResult) -> str:
    lines = []
    for i, pose, score, accepted in result.poses:
        lines.append(json.dumps({
            "frame": i,
            "pose": [[float(v) for v in row] for row in pose.matrix],
            "score": float(score),
            "accepted": bool(accepted),
        }))
    return "\n".join(lines) + ("\n" if lines else "")
