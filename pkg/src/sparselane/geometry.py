"""Coordinate frames, pinhole projection and feature-grid sampling.

Ground frame convention: x lateral (right), y longitudinal (forward), z up,
in meters.  Camera frame follows the optics convention: x right, y down,
z forward (optical axis).  Pixel coordinates are (u, v) with u along image
width and v along image height; normalized grid coordinates are
corner-aligned, i.e. 0 maps to the first pixel center and 1 to the last.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

RIGID_TOL = 1e-9


def _check_rigid(matrix: np.ndarray, name: str) -> np.ndarray:
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape != (4, 4):
        raise ValueError(f"{name} must be 4x4, got {m.shape}")
    r = m[:3, :3]
    if np.max(np.abs(r.T @ r - np.eye(3))) >= RIGID_TOL:
        raise ValueError(f"{name} rotation block is not orthonormal")
    if np.linalg.det(r) <= 0:
        raise ValueError(f"{name} rotation block has non-positive determinant")
    if np.max(np.abs(m[3] - np.array([0.0, 0.0, 0.0, 1.0]))) >= RIGID_TOL:
        raise ValueError(f"{name} last row must be (0, 0, 0, 1)")
    return m


@dataclass
class CameraRig:
    """Pinhole camera with a rigid ground-to-camera extrinsic.

    intrinsics: 3x3 matrix in pixels, zero skew unless explicitly set.
    ground_to_camera: 4x4 rigid transform from ground frame to camera frame.
    image_size: (height, width) in pixels.
    """

    intrinsics: np.ndarray
    ground_to_camera: np.ndarray
    image_size: tuple[int, int]

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64)
        if self.intrinsics.shape != (3, 3):
            raise ValueError(f"intrinsics must be 3x3, got {self.intrinsics.shape}")
        if self.intrinsics[0, 0] <= 0 or self.intrinsics[1, 1] <= 0:
            raise ValueError("focal entries must be positive")
        self.ground_to_camera = _check_rigid(self.ground_to_camera, "ground_to_camera")
        h, w = self.image_size
        if h <= 0 or w <= 0:
            raise ValueError(f"image_size must be positive, got {self.image_size}")
        self.image_size = (int(h), int(w))

    @property
    def fx(self) -> float:
        return float(self.intrinsics[0, 0])

    @property
    def fy(self) -> float:
        return float(self.intrinsics[1, 1])

    @property
    def cx(self) -> float:
        return float(self.intrinsics[0, 2])

    @property
    def cy(self) -> float:
        return float(self.intrinsics[1, 2])


@dataclass
class EgoMotion:
    """Rigid transform mapping ground frame at time t-i to ground frame at t."""

    transform: np.ndarray

    def __post_init__(self):
        self.transform = _check_rigid(self.transform, "ego motion transform")

    def inverse(self) -> "EgoMotion":
        r = self.transform[:3, :3]
        t = self.transform[:3, 3]
        inv = np.eye(4)
        inv[:3, :3] = r.T
        inv[:3, 3] = -r.T @ t
        return EgoMotion(inv)

    def compose(self, earlier: "EgoMotion") -> "EgoMotion":
        """Motion equivalent to applying ``earlier`` first, then ``self``."""
        return EgoMotion(self.transform @ earlier.transform)

    @staticmethod
    def identity() -> "EgoMotion":
        return EgoMotion(np.eye(4))

    @staticmethod
    def from_planar(forward: float, lateral: float = 0.0, yaw: float = 0.0) -> "EgoMotion":
        """Motion of the ego by (lateral, forward) with heading change ``yaw``.

        Maps coordinates of a point expressed in the *old* ground frame into
        the *new* ground frame after the ego moved.
        """
        c, s = np.cos(yaw), np.sin(yaw)
        pose = np.eye(4)  # old->world pose of the new frame
        pose[:3, :3] = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        pose[0, 3] = lateral
        pose[1, 3] = forward
        return EgoMotion(np.linalg.inv(pose))


@dataclass
class ProjectionResult:
    """Projected pixel coordinates plus in-view validity flags."""

    points2d: np.ndarray  # (N, 2) of (u, v)
    validity: np.ndarray  # (N,) in {0, 1}
    epsilon: float = field(default=1e-6)


def transform_points_ego(points, motion: EgoMotion) -> np.ndarray:
    """Apply a rigid ego-motion transform to a list of 3D ground points."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(pts)):
        raise ValueError("points must be finite")
    hom = np.concatenate([pts, np.ones((len(pts), 1))], axis=1)
    out = hom @ motion.transform.T
    return out[:, :3]


def project_to_image(points3d, rig: CameraRig, epsilon: float = 1e-6) -> ProjectionResult:
    """Pinhole-project ground points; out-of-view points get validity 0.

    Points behind the camera (depth <= epsilon) are projected with the depth
    clamped to ``epsilon`` so the output stays finite, and flagged invalid.
    """
    pts = np.asarray(points3d, dtype=np.float64).reshape(-1, 3)
    hom = np.concatenate([pts, np.ones((len(pts), 1))], axis=1)
    cam = hom @ rig.ground_to_camera.T
    x, y, z = cam[:, 0], cam[:, 1], cam[:, 2]
    in_front = z > epsilon
    z_safe = np.maximum(z, epsilon)
    u = rig.fx * x / z_safe + rig.cx
    v = rig.fy * y / z_safe + rig.cy
    h, w = rig.image_size
    inside = (u >= 0) & (u < w) & (v >= 0) & (v < h)
    validity = (in_front & inside).astype(np.int64)
    return ProjectionResult(np.stack([u, v], axis=1), validity, epsilon)


def bilinear_sample(feature_map: np.ndarray, point2d) -> np.ndarray:
    """Bilinear interpolation on an H x W x D grid at (u, v) pixel coords.

    Queries outside [0, W-1] x [0, H-1] return the zero vector.
    """
    fm = np.asarray(feature_map, dtype=np.float64)
    if fm.ndim == 2:
        fm = fm[:, :, None]
    if fm.size == 0:
        raise ValueError("feature map is empty")
    h, w, d = fm.shape
    u, v = float(point2d[0]), float(point2d[1])
    if u < 0 or u > w - 1 or v < 0 or v > h - 1:
        return np.zeros(d)
    u0 = min(int(np.floor(u)), w - 2) if w > 1 else 0
    v0 = min(int(np.floor(v)), h - 2) if h > 1 else 0
    du = u - u0
    dv = v - v0
    f00 = fm[v0, u0]
    f01 = fm[v0, min(u0 + 1, w - 1)]
    f10 = fm[min(v0 + 1, h - 1), u0]
    f11 = fm[min(v0 + 1, h - 1), min(u0 + 1, w - 1)]
    return (
        f00 * (1 - du) * (1 - dv)
        + f01 * du * (1 - dv)
        + f10 * (1 - du) * dv
        + f11 * du * dv
    )


def normalize_coords(point2d, level_extent) -> np.ndarray:
    """Map (u, v) pixel coords on a (H, W) grid to corner-aligned [0, 1]^2."""
    h, w = level_extent
    if h <= 0 or w <= 0:
        raise ValueError(f"invalid feature level extent {level_extent}")
    p = np.asarray(point2d, dtype=np.float64)
    denom = np.array([max(w - 1, 1), max(h - 1, 1)], dtype=np.float64)
    return p / denom


def denormalize_coords(point01, level_extent) -> np.ndarray:
    """Inverse of :func:`normalize_coords` for the same level extent."""
    h, w = level_extent
    if h <= 0 or w <= 0:
        raise ValueError(f"invalid feature level extent {level_extent}")
    p = np.asarray(point01, dtype=np.float64)
    scale = np.array([max(w - 1, 1), max(h - 1, 1)], dtype=np.float64)
    return p * scale
