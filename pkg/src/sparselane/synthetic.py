"""Deterministic synthetic scenes and sequences with exact 3D lane ground truth.

Lanes are static polylines in a global frame; the ego drives forward with
bounded yaw, and every frame expresses the same world points in its own
ground frame.  That construction makes ego propagation of ground truth exact
by design, which the temporal-fusion checks rely on.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image

from . import kernels
from .geometry import CameraRig, EgoMotion
from .lanes import GroundTruthLane

WORLD_STEP = 0.5  # meters between consecutive world polyline knots


@dataclass
class BoxRange:
    """The 3D range box in ground coordinates (meters)."""

    x: tuple[float, float] = (-30.0, 30.0)
    y: tuple[float, float] = (3.0, 103.0)
    z: tuple[float, float] = (-10.0, 10.0)


@dataclass
class SceneConfig:
    num_lanes: tuple[int, int] = (3, 6)
    geometry: str = "poly"  # straight | arc | poly
    hill_amplitude: float = 1.0
    lane_spacing: float = 3.75
    lane_length_range: tuple[float, float] | None = None  # None: span the full box
    box: BoxRange = field(default_factory=BoxRange)
    image_size: tuple[int, int] = (360, 480)
    focal: float = 500.0
    camera_height: float = 1.6
    camera_pitch_deg: float = 1.5
    stroke_width: float = 5.0
    noise_level: float = 0.15
    ego_speed: float = 2.0  # meters per frame
    max_yaw_step_deg: float = 0.3
    seed: int = 0

    def make_rig(self) -> CameraRig:
        h, w = self.image_size
        k = np.array([
            [self.focal, 0.0, (w - 1) / 2.0],
            [0.0, self.focal, (h - 1) / 2.0],
            [0.0, 0.0, 1.0],
        ])
        # ground (x right, y fwd, z up) -> camera (x right, y down, z fwd)
        r0 = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
        pitch = np.deg2rad(self.camera_pitch_deg)
        c, s = np.cos(pitch), np.sin(pitch)
        r_pitch = np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
        rot = r_pitch @ r0
        g2c = np.eye(4)
        g2c[:3, :3] = rot
        g2c[:3, 3] = -rot @ np.array([0.0, 0.0, self.camera_height])
        return CameraRig(k, g2c, (h, w))


@dataclass
class FrameSample:
    """One rendered frame with exact annotations in its own ground frame."""

    image: np.ndarray  # (H, W, 1) float32 in [0, 1]
    seg_mask: np.ndarray  # (H, W) uint8 in {0, 1}
    lanes: list[GroundTruthLane]
    rig: CameraRig
    ego_motion_from_prev: EgoMotion
    index: int
    sequence_id: str


class _WorldLane:
    """A static lane polyline in the global frame."""

    def __init__(self, track_id, category, points):
        self.track_id = track_id
        self.category = category
        self.points = points  # (P, 3) sorted by world y


def _build_world(config: SceneConfig, rng: np.random.Generator,
                 travel: float) -> list[_WorldLane]:
    n_lanes = int(rng.integers(config.num_lanes[0], config.num_lanes[1] + 1))
    y_lo, y_hi = config.box.y
    world_y0 = 0.0
    world_y1 = y_hi + travel + 2 * WORLD_STEP

    if config.geometry == "straight":
        c1 = rng.uniform(-0.05, 0.05)
        centerline = lambda y: c1 * y
    elif config.geometry == "arc":
        k = rng.uniform(-1.5e-3, 1.5e-3)
        centerline = lambda y: k * y * y
    elif config.geometry == "poly":
        c1 = rng.uniform(-0.05, 0.05)
        c2 = rng.uniform(-1e-3, 1e-3)
        c3 = rng.uniform(-6e-6, 6e-6)
        centerline = lambda y: c1 * y + c2 * y * y + c3 * y * y * y
    else:
        raise ValueError(f"unknown geometry family {config.geometry!r}")

    amp = config.hill_amplitude
    wavelength = rng.uniform(60.0, 140.0)
    phase = rng.uniform(0.0, 2 * np.pi)
    hill = lambda y: amp * np.sin(2 * np.pi * y / wavelength + phase)

    lanes = []
    offsets = (np.arange(n_lanes) - (n_lanes - 1) / 2.0) * config.lane_spacing
    for i, off in enumerate(offsets):
        if config.lane_length_range is not None:
            length = rng.uniform(*config.lane_length_range)
            start = rng.uniform(world_y0, max(world_y0, world_y1 - length))
            lo, hi = start, start + length
        else:
            lo, hi = world_y0, world_y1
        ys = np.arange(lo, hi + WORLD_STEP / 2, WORLD_STEP)
        if len(ys) < 2:
            continue
        xs = centerline(ys) + off
        zs = hill(ys)
        pts = np.stack([xs, ys, zs], axis=1)
        lanes.append(_WorldLane(i, int(rng.integers(1, 4)), pts))
    return lanes


def _world_to_ground(pose_xy: np.ndarray, yaw: float) -> np.ndarray:
    """4x4 transform taking world coordinates to the ego ground frame."""
    c, s = np.cos(yaw), np.sin(yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])  # ground->world
    g = np.eye(4)
    g[:3, :3] = rot.T
    g[:3, 3] = -rot.T @ np.array([pose_xy[0], pose_xy[1], 0.0])
    return g


def _longest_inside_run(pts: np.ndarray, box: BoxRange) -> np.ndarray:
    inside = (
        (pts[:, 0] >= box.x[0]) & (pts[:, 0] <= box.x[1])
        & (pts[:, 1] >= box.y[0]) & (pts[:, 1] <= box.y[1])
        & (pts[:, 2] >= box.z[0]) & (pts[:, 2] <= box.z[1])
    )
    best_lo = best_hi = 0
    lo = None
    for i, flag in enumerate(np.append(inside, False)):
        if flag and lo is None:
            lo = i
        elif not flag and lo is not None:
            if i - lo > best_hi - best_lo:
                best_lo, best_hi = lo, i
            lo = None
    return pts[best_lo:best_hi]


def generate_sequence(config: SceneConfig, length: int,
                      sequence_index: int = 0) -> list[FrameSample]:
    """Generate one deterministic sequence of frames with exact ground truth."""
    if length < 1:
        raise ValueError("length must be >= 1")
    rng = np.random.default_rng([config.seed, sequence_index])
    travel = config.ego_speed * max(length - 1, 0)
    world = _build_world(config, rng, travel)
    rig = config.make_rig()
    sequence_id = f"seq_{config.seed:04d}_{sequence_index:04d}"

    yaw_steps = np.deg2rad(config.max_yaw_step_deg) * rng.uniform(-1, 1, size=length)
    noise_rngs = [np.random.default_rng([config.seed, sequence_index, 7, t])
                  for t in range(length)]

    frames = []
    pose = np.zeros(2)
    yaw = 0.0
    prev_g = None
    for t in range(length):
        if t > 0:
            yaw += yaw_steps[t]
            heading = np.array([-np.sin(yaw), np.cos(yaw)])
            pose = pose + config.ego_speed * heading
        g = _world_to_ground(pose, yaw)
        motion = EgoMotion(g @ np.linalg.inv(prev_g)) if prev_g is not None else EgoMotion.identity()
        prev_g = g

        lanes = []
        for wl in world:
            hom = np.concatenate([wl.points, np.ones((len(wl.points), 1))], axis=1)
            pts = (hom @ g.T)[:, :3]
            pts = _longest_inside_run(pts, config.box)
            if len(pts) >= 2 and np.all(np.diff(pts[:, 1]) > 0):
                lanes.append(GroundTruthLane(pts, category=wl.category,
                                             track_id=wl.track_id))
        image, seg_mask = rasterize_frame(
            lanes, rig, config.stroke_width,
            noise_level=config.noise_level, rng=noise_rngs[t])
        frames.append(FrameSample(image, seg_mask, lanes, rig, motion, t, sequence_id))

    if all(len(f.lanes) == 0 for f in frames):
        raise ValueError("scene config produced zero visible lanes")
    return frames


def rasterize_frame(lanes, rig: CameraRig, stroke_width: float,
                    noise_level: float = 0.0,
                    rng: np.random.Generator | None = None
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Render lanes into an intensity image and a binary lane mask.

    A pixel belongs to the mask iff its center lies within half the stroke
    width of some lane's projected polyline; the image adds a 1-px
    anti-aliasing ramp at the stroke edge plus uniform background noise.
    """
    h, w = rig.image_size
    half = stroke_width / 2.0
    polylines = []
    for lane in lanes:
        pts = np.asarray(lane.points, dtype=np.float64)
        hom = np.concatenate([pts, np.ones((len(pts), 1))], axis=1)
        cam = hom @ rig.ground_to_camera.T
        in_front = cam[:, 2] > 1e-6
        z = np.maximum(cam[:, 2], 1e-6)
        u = rig.fx * cam[:, 0] / z + rig.cx
        v = rig.fy * cam[:, 1] / z + rig.cy
        uv = np.stack([u, v], axis=1)
        # split at behind-camera points: only draw runs fully in front
        idx = np.flatnonzero(in_front)
        if len(idx) < 2:
            continue
        splits = np.split(idx, np.flatnonzero(np.diff(idx) > 1) + 1)
        for run in splits:
            if len(run) >= 2:
                polylines.append(uv[run])

    dist = kernels.stroke_field((h, w), polylines, cutoff=half + 1.5)
    seg_mask = (dist <= half).astype(np.uint8)
    alpha = np.clip(half + 0.5 - dist, 0.0, 1.0)

    if rng is not None and noise_level > 0:
        background = noise_level * rng.random((h, w))
    else:
        background = np.zeros((h, w))
    image = alpha + (1.0 - alpha) * background
    image = np.round(image * 255.0) / 255.0
    return image.astype(np.float32)[:, :, None], seg_mask


# --------------------------------------------------------------------------
# dataset serialization


class DatasetError(ValueError):
    """Raised when an annotation file violates the dataset schema."""


def _require(mapping, key, path):
    if key not in mapping:
        raise DatasetError(f"missing field {path}.{key}" if path else f"missing field {key}")
    return mapping[key]


def save_dataset(sequences: list[list[FrameSample]], path) -> None:
    """Write sequences as one annotation JSON per sequence plus PNG rasters."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for frames in sequences:
        seq_id = frames[0].sequence_id
        img_dir = root / seq_id
        img_dir.mkdir(exist_ok=True)
        payload = {"sequence_id": seq_id, "frames": []}
        for f in frames:
            image_file = f"{seq_id}/frame_{f.index:05d}.png"
            mask_file = f"{seq_id}/mask_{f.index:05d}.png"
            Image.fromarray(
                np.round(f.image[:, :, 0] * 255.0).astype(np.uint8)).save(root / image_file)
            Image.fromarray((f.seg_mask * 255).astype(np.uint8)).save(root / mask_file)
            payload["frames"].append({
                "index": f.index,
                "image_file": image_file,
                "mask_file": mask_file,
                "intrinsics": f.rig.intrinsics.tolist(),
                "image_size": list(f.rig.image_size),
                "ground_to_camera": f.rig.ground_to_camera.tolist(),
                "ego_motion_from_prev": f.ego_motion_from_prev.transform.tolist(),
                "lanes": [
                    {
                        "track_id": int(lane.track_id) if lane.track_id is not None else -1,
                        "category": int(lane.category),
                        "points": lane.points.tolist(),
                    }
                    for lane in f.lanes
                ],
            })
        with open(root / f"{seq_id}.json", "w") as fh:
            json.dump(payload, fh)


def load_dataset(path) -> list[list[FrameSample]]:
    """Load sequences saved by :func:`save_dataset`; validates the schema."""
    root = Path(path)
    seq_files = sorted(root.glob("*.json"))
    seq_files = [p for p in seq_files if p.name != "manifest.json"]
    if not seq_files:
        raise DatasetError(f"no sequence annotation files under {root}")
    sequences = []
    for sf in seq_files:
        with open(sf) as fh:
            payload = json.load(fh)
        seq_id = _require(payload, "sequence_id", "")
        frames_json = _require(payload, "frames", "")
        frames = []
        for i, fj in enumerate(frames_json):
            fpath = f"frames[{i}]"
            intr = np.array(_require(fj, "intrinsics", fpath), dtype=np.float64)
            g2c = np.array(_require(fj, "ground_to_camera", fpath), dtype=np.float64)
            motion = np.array(_require(fj, "ego_motion_from_prev", fpath), dtype=np.float64)
            lanes_json = _require(fj, "lanes", fpath)
            image_file = fj.get("image_file")
            image = None
            size = fj.get("image_size")
            if image_file and (root / image_file).exists():
                arr = np.asarray(Image.open(root / image_file), dtype=np.float32) / 255.0
                image = arr[:, :, None]
                size = arr.shape
            if size is None:
                raise DatasetError(f"{fpath}: need image_size when no raster is stored")
            mask = None
            mask_file = fj.get("mask_file")
            if mask_file and (root / mask_file).exists():
                mask = (np.asarray(Image.open(root / mask_file)) > 127).astype(np.uint8)
            lanes = []
            for j, lj in enumerate(lanes_json):
                lpath = f"{fpath}.lanes[{j}]"
                pts = np.array(_require(lj, "points", lpath), dtype=np.float64)
                if pts.ndim != 2 or pts.shape[1] != 3:
                    raise DatasetError(f"{lpath}.points must be a list of [x, y, z]")
                lanes.append(GroundTruthLane(
                    pts,
                    category=int(_require(lj, "category", lpath)),
                    track_id=int(_require(lj, "track_id", lpath))))
            try:
                rig = CameraRig(intr, g2c, (int(size[0]), int(size[1])))
                ego = EgoMotion(motion)
            except ValueError as exc:
                raise DatasetError(f"{fpath}: {exc}") from exc
            frames.append(FrameSample(
                image, mask, lanes, rig, ego,
                int(_require(fj, "index", fpath)), seq_id))
        sequences.append(frames)
    return sequences
