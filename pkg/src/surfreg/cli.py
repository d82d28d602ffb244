"""Command-line entry point: every pipeline stage plus evaluation, driven
by a YAML config with dotted-key flag overrides."""
from __future__ import annotations

import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import __version__
from .cloudio import (
    load_cloud,
    load_landmarks,
    load_transform,
    save_cloud,
    save_landmarks,
    save_transform,
)
from .config import PipelineConfig, apply_overrides, config_to_dict, load_config
from .errors import ConfigError, SurfregError
from .evaluation import (
    CheckerboardSpec,
    LandmarkSet,
    eval_reconstruction,
    recon_report,
    recon_table,
    tre_report,
    tre_table,
)
from .fusion import SceneMap, fuse_frame
from .geometry import estimate_normals
from .pipeline import (
    default_model_template,
    frame_source,
    poses_jsonl,
    run_pipeline_inline,
    run_pipeline_staged,
    synth_frames,
)
from .registration import ModelTemplate, RegistrationState, register_frame
from .scenes import torso_landmarks
from .stream import save_recording

log = logging.getLogger(__name__)

EXIT_CODES = {"config": 2, "io": 3, "degenerate-input": 4, "internal": 5}
CONFIG_ENV_VAR = "SURFREG_CONFIG"


def _load_effective_config(config_path, overrides) -> PipelineConfig:
    path = config_path or os.environ.get(CONFIG_ENV_VAR)
    cfg = load_config(path) if path else PipelineConfig()
    if overrides:
        cfg = apply_overrides(cfg, list(overrides))
    return cfg


def _write_run_record(out_dir: Path, subcommand: str, cfg: PipelineConfig) -> None:
    record = {
        "subcommand": subcommand,
        "argv": sys.argv[1:],
        "config": config_to_dict(cfg),
        "seed": cfg.seed,
        "versions": {
            "surfreg": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
        },
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run.json").write_text(json.dumps(record, indent=2) + "\n")


def _run(subcommand: str, config_path, overrides, body):
    """Shared harness: resolve config, write provenance, run, map errors to
    categorized exit codes."""
    try:
        cfg = _load_effective_config(config_path, overrides)
        out_dir = Path(cfg.output_dir)
        _write_run_record(out_dir, subcommand, cfg)
        body(cfg, out_dir)
    except SurfregError as e:
        click.echo(f"error [{e.category}]: {e}", err=True)
        raise SystemExit(EXIT_CODES.get(e.category, 5))
    except Exception as e:  # noqa: BLE001 - anything else is an internal fault
        click.echo(f"error [internal]: {e}", err=True)
        raise SystemExit(EXIT_CODES["internal"])


def _common_options(fn):
    fn = click.option("--config", "-c", "config_path", type=click.Path(), default=None,
                      help=f"YAML config file (default: ${CONFIG_ENV_VAR}).")(fn)
    fn = click.option("--set", "-s", "overrides", multiple=True, metavar="KEY=VALUE",
                      help="Override a config key (dotted path), e.g. -s seed=3.")(fn)
    fn = click.option("--output", "-o", "output_dir", type=click.Path(), default=None,
                      help="Output directory (overrides config output_dir).")(fn)
    return fn


def _merge_output(overrides, output_dir):
    ov = list(overrides)
    if output_dir is not None:
        ov.append(f"output_dir={output_dir}")
    return ov


@click.group()
@click.version_option(__version__)
def main():
    """Surface reconstruction, tracking, and model registration toolkit."""
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@_common_options
def synth(config_path, overrides, output_dir):
    """Render the built-in synthetic scene to a recording directory."""
    def body(cfg, out):
        frames, pose = synth_frames(cfg)
        save_recording(frames, out / "recording")
        save_transform(pose, out / "gt_pose.txt")
        lms = torso_landmarks()
        names = list(lms)
        x_model = np.stack([lms[n] for n in names])
        save_landmarks(names, x_model, out / "landmarks_model.txt")
        save_landmarks(names, pose.apply(x_model), out / "landmarks_world.txt")
        click.echo(f"wrote {len(frames)}-frame recording to {out / 'recording'}")
    _run("synth", config_path, _merge_output(overrides, output_dir), body)


@main.command()
@_common_options
def reconstruct(config_path, overrides, output_dir):
    """Fuse a frame stream into a world point cloud."""
    def body(cfg, out):
        scene_map = SceneMap(cfg.fusion.delta_map)
        for frame in frame_source(cfg):
            scene_map.accumulate(fuse_frame(frame, cfg.fusion.delta_send), frame.timestamp)
        cloud = scene_map.snapshot()
        save_cloud(cloud, out / "map.ply")
        click.echo(f"fused {scene_map.frames_fused} frames into {len(cloud)} points -> {out / 'map.ply'}")
    _run("reconstruct", config_path, _merge_output(overrides, output_dir), body)


@main.command()
@_common_options
def segment(config_path, overrides, output_dir):
    """Track the target surface through a frame stream; write the tracked
    surface cloud and per-frame stats."""
    def body(cfg, out):
        bundle = _no_registration(cfg)
        result = run_pipeline_inline(bundle["frames"], bundle["cfg"])
        _write_seg_outputs(result, out)
    _run("segment", config_path, _merge_output(overrides, output_dir), body)


def _no_registration(cfg: PipelineConfig):
    """Frames plus a config whose registration cadence is beyond the stream
    length, so only fusion + tracking run."""
    frames = frame_source(cfg)
    frames = list(frames)
    quiet = apply_overrides(cfg, [f"register_every={len(frames) + 1}"])
    return {"frames": frames, "cfg": quiet}


def _write_seg_outputs(result, out: Path) -> None:
    if result.surface_cloud is not None:
        save_cloud(result.surface_cloud, out / "surface.ply")
    with open(out / "seg_stats.jsonl", "w") as f:
        for s in result.seg_stats:
            f.write(json.dumps(s) + "\n")
    n_acc = sum(1 for s in result.seg_stats if s["accepted"])
    click.echo(f"processed {result.frames_processed} frames, {n_acc} accepted segmentations")


@main.command()
@_common_options
@click.option("--scene", "scene_path", type=click.Path(exists=True), required=True,
              help="Scene surface cloud (PLY).")
@click.option("--model", "model_path", type=click.Path(exists=True), default=None,
              help="Model surface cloud (PLY); default: built-in torso phantom.")
def register(config_path, overrides, output_dir, scene_path, model_path):
    """Register the model surface to a scene cloud; write the pose."""
    def body(cfg, out):
        reg_cfg = cfg.registration
        if model_path:
            model_cloud = load_cloud(model_path)
            if model_cloud.normals is None:
                model_cloud = estimate_normals(model_cloud, k=20)
            template = ModelTemplate.build(model_cloud, reg_cfg)
        else:
            template, _ = default_model_template(reg_cfg)
        scene = load_cloud(scene_path)
        if scene.normals is None:
            scene = estimate_normals(scene, k=20)
        state = RegistrationState()
        res = register_frame(state, template, scene, reg_cfg)
        save_transform(res.pose, out / "pose.txt")
        report = {
            "score": res.score,
            "coverage": res.coverage,
            "trimmed_mean_dist": res.trimmed_mean_dist,
            "accepted": res.accepted,
            "candidates": res.candidate_count,
        }
        (out / "register_report.json").write_text(json.dumps(report, indent=2) + "\n")
        click.echo(f"score {res.score:.3f} coverage {res.coverage:.3f} "
                   f"trimmed {res.trimmed_mean_dist * 1000:.2f} mm -> {out / 'pose.txt'}")
    _run("register", config_path, _merge_output(overrides, output_dir), body)


@main.command()
@_common_options
@click.option("--model", "model_path", type=click.Path(exists=True), default=None,
              help="Model surface cloud (PLY); default: built-in torso phantom.")
@click.option("--staged/--inline", default=True, show_default=True,
              help="Run stages in queue-connected threads or inline.")
def pipeline(config_path, overrides, output_dir, model_path, staged):
    """End-to-end run: fuse, track, register; write poses and metrics."""
    def body(cfg, out):
        template = None
        if model_path:
            model_cloud = load_cloud(model_path)
            if model_cloud.normals is None:
                model_cloud = estimate_normals(model_cloud, k=20)
            template = ModelTemplate.build(model_cloud, cfg.registration)
        frames = frame_source(cfg)
        t0 = time.perf_counter()
        runner = run_pipeline_staged if staged else run_pipeline_inline
        result = runner(frames, cfg, template=template)
        elapsed = time.perf_counter() - t0
        (out / "poses.jsonl").write_text(poses_jsonl(result))
        if result.map_cloud is not None:
            save_cloud(result.map_cloud, out / "map.ply")
        _write_seg_outputs(result, out)
        final = result.final_pose
        if final is not None:
            save_transform(final, out / "pose.txt")
        metrics = {
            "frames": result.frames_processed,
            "elapsed_s": elapsed,
            "fps": result.frames_processed / elapsed if elapsed > 0 else None,
            "registrations": len(result.poses),
            "accepted_registrations": sum(1 for p in result.poses if p[3]),
            "final_score": result.poses[-1][2] if result.poses else None,
        }
        (out / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")
        click.echo(f"{result.frames_processed} frames in {elapsed:.1f} s "
                   f"({metrics['fps']:.2f} fps), {metrics['registrations']} registrations")
    _run("pipeline", config_path, _merge_output(overrides, output_dir), body)


@main.command("eval-recon")
@_common_options
@click.argument("corner_files", nargs=-1, required=True, type=click.Path(exists=True))
@click.option("--cols", default=8, show_default=True)
@click.option("--rows", default=5, show_default=True)
@click.option("--spacing", default=0.030, show_default=True)
def eval_recon(config_path, overrides, output_dir, corner_files, cols, rows, spacing):
    """Reconstruction accuracy from corner sample files.

    Each file holds one observation: lines of "x y z" reconstructed corner
    positions in row-major grid order, plus header lines
    "# normal nx ny nz" and "# depth z".
    """
    def body(cfg, out):
        spec = CheckerboardSpec(cols=cols, rows=rows, spacing=spacing)
        samples = [_eval_sample(p, spec) for p in corner_files]
        report = recon_report(samples)
        (out / "recon_report.json").write_text(json.dumps(report, indent=2) + "\n")
        table = recon_table(samples)
        (out / "recon_table.txt").write_text(table + "\n")
        click.echo(table)
    _run("eval-recon", config_path, _merge_output(overrides, output_dir), body)


def _read_corner_file(path, spec: CheckerboardSpec):
    """Returns (corners, normal, depth) keyword-ready tuple for
    eval_reconstruction."""
    normal = None
    depth = None
    pts = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if parts and parts[0] == "normal":
                normal = np.array([float(v) for v in parts[1:4]])
            elif parts and parts[0] == "depth":
                depth = float(parts[1])
            continue
        pts.append([float(v) for v in line.split()[:3]])
    if normal is None or depth is None:
        raise ConfigError(f"corner file {path} is missing '# normal' or '# depth' header")
    return np.array(pts), normal, depth


def _eval_sample(path, spec: CheckerboardSpec):
    corners, normal, depth = _read_corner_file(path, spec)
    return eval_reconstruction(corners, spec, normal, depth)


@main.command("eval-tre")
@_common_options
@click.option("--pose", "pose_path", type=click.Path(exists=True), required=True,
              help="Estimated model-to-world pose (4x4 text).")
@click.option("--landmarks-model", type=click.Path(exists=True), required=True)
@click.option("--landmarks-world", type=click.Path(exists=True), required=True)
@click.option("--observed", "observed_path", type=click.Path(exists=True), default=None,
              help="Observed scene cloud (PLY) for distance-to-visible-area.")
def eval_tre(config_path, overrides, output_dir, pose_path, landmarks_model,
             landmarks_world, observed_path):
    """Registration accuracy (TRE/DVA/DMP) from a pose and landmark files."""
    def body(cfg, out):
        T = load_transform(pose_path)
        names_m, xm = load_landmarks(landmarks_model)
        names_w, xw = load_landmarks(landmarks_world)
        if list(names_m) != list(names_w):
            raise ConfigError("model and world landmark files list different names")
        lset = LandmarkSet(tuple(names_m), xm, xw)
        observed = load_cloud(observed_path) if observed_path else None
        report = tre_report(T, lset, observed)
        (out / "tre_report.json").write_text(json.dumps(report, indent=2) + "\n")
        table = tre_table(report)
        (out / "tre_table.txt").write_text(table + "\n")
        click.echo(table)
    _run("eval-tre", config_path, _merge_output(overrides, output_dir), body)
