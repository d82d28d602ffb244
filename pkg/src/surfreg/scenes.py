"""Synthetic test scenes: torso phantom mesh, landmark sets, camera orbits."""
from __future__ import annotations

import numpy as np

from .geometry import RigidTransform
from .mesh import TriangleMesh, half_cylinder_radius, make_box, make_half_cylinder
from .render import orbit_trajectory

TORSO_RADIUS = 0.15
TORSO_LENGTH = 0.6
TORSO_TAPER = 0.7


def make_torso_phantom(radius: float = TORSO_RADIUS, length: float = TORSO_LENGTH,
                       taper: float = TORSO_TAPER, arc_segments: int = 24,
                       length_segments: int = 12) -> TriangleMesh:
    """Tapered half-cylinder standing in for a supine torso.

    Lies along +x with the narrow ("head") end at +x, curved side up.
    The taper removes every exact pi-rotation self-symmetry so a single
    correct pose exists for landmark evaluation.
    """
    return make_half_cylinder(radius, length, arc_segments=arc_segments,
                              length_segments=length_segments, taper=taper)


def _arc_point(x: float, angle: float, radius: float, length: float, taper: float) -> list[float]:
    r = float(half_cylinder_radius(radius, length, taper, x))
    return [x, r * np.cos(angle), r * np.sin(angle)]


def torso_landmarks(radius: float = TORSO_RADIUS, length: float = TORSO_LENGTH,
                    taper: float = TORSO_TAPER) -> dict[str, np.ndarray]:
    """Thirteen named anatomical-analogue landmarks in model coordinates.

    Bilateral pairs are mirrored across the y = 0 plane (the mid-sagittal
    analogue). All points lie exactly on the analytic curved surface except
    the toe tips, which sit on the wide end cap's bottom rim.
    """
    top = np.pi / 2.0
    pts = {
        "eye_corner_l": _arc_point(0.26, top + 0.25, radius, length, taper),
        "eye_corner_r": _arc_point(0.26, top - 0.25, radius, length, taper),
        "mouth_corner_l": _arc_point(0.285, top + 0.12, radius, length, taper),
        "mouth_corner_r": _arc_point(0.285, top - 0.12, radius, length, taper),
        "nipple_l": _arc_point(0.1, top + 0.5, radius, length, taper),
        "nipple_r": _arc_point(0.1, top - 0.5, radius, length, taper),
        "navel": _arc_point(0.0, top, radius, length, taper),
        "groin": _arc_point(-0.12, top, radius, length, taper),
        "fingertip_l": _arc_point(-0.05, np.pi - 0.1, radius, length, taper),
        "fingertip_r": _arc_point(-0.05, 0.1, radius, length, taper),
        "toe_tip_l": _arc_point(-length / 2.0, np.pi - 0.06, radius, length, taper),
        "toe_tip_r": _arc_point(-length / 2.0, 0.06, radius, length, taper),
        "chin": _arc_point(0.22, top, radius, length, taper),
    }
    return {k: np.asarray(v, dtype=float) for k, v in pts.items()}


def upper_surface_landmarks() -> dict[str, np.ndarray]:
    """The eight landmarks on the upward-facing surface, i.e. those a
    downward-looking camera orbit actually observes."""
    keep = ("eye_corner_l", "eye_corner_r", "mouth_corner_l", "mouth_corner_r",
            "nipple_l", "nipple_r", "navel", "groin")
    return {k: v for k, v in torso_landmarks().items() if k in keep}


def default_model_pose() -> RigidTransform:
    """Places the phantom slightly off the world origin with a small yaw so
    model and world frames are distinct."""
    yaw = np.deg2rad(20.0)
    rot = np.array([
        [np.cos(yaw), -np.sin(yaw), 0.0],
        [np.sin(yaw), np.cos(yaw), 0.0],
        [0.0, 0.0, 1.0],
    ])
    return RigidTransform(rot, np.array([0.1, -0.05, 0.75]))


def torso_orbit(n_frames: int = 20, distance: float = 1.0,
                elevation_deg: float = 40.0, span_deg: float = 300.0,
                model_pose: RigidTransform | None = None,
                look_offset: float = 0.0) -> list[RigidTransform]:
    """Camera orbit around the posed phantom's centroid at roughly the
    given slant distance. ``look_offset`` shifts the orbit center along the
    phantom's long axis (+x is the narrow "head" end), so a close orbit can
    frame one end and leave the other outside the field of view."""
    pose = model_pose if model_pose is not None else default_model_pose()
    center = pose.apply(np.zeros((1, 3)))[0] + np.array([0.0, 0.0, 0.05])
    center = center + pose.rotation @ np.array([look_offset, 0.0, 0.0])
    return orbit_trajectory(center, distance, n_frames, elevation_deg=elevation_deg,
                            span_deg=span_deg)


def make_distractor_box() -> tuple[TriangleMesh, RigidTransform]:
    """A box off to the side of the phantom, as clutter the mask must ignore."""
    box = make_box((0.0, 0.0, 0.0), (0.3, 0.3, 0.25))
    return box, RigidTransform(np.eye(3), np.array([0.75, 0.45, 0.55]))
