"""Curve and anchor-point lane representations.

A lane is either a pair of polynomials x(y), z(y) over the longitudinal
coordinate (:class:`PolyLane`), an ordered 3D point set at fixed y positions
with a normalized (start, end) range (:class:`AnchorPointSet`), or a raw
ordered point list used for supervision (:class:`GroundTruthLane`).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_Y_MIN = 3.0
DEFAULT_Y_MAX = 103.0
DEFAULT_NUM_POINTS = 40


def uniform_y_positions(n: int = DEFAULT_NUM_POINTS,
                        y_min: float = DEFAULT_Y_MIN,
                        y_max: float = DEFAULT_Y_MAX) -> np.ndarray:
    """The fixed longitudinal sampling grid, uniform in y."""
    return np.linspace(y_min, y_max, n)


@dataclass
class PolyLane:
    """A lane as two polynomials in y plus confidence and y extent."""

    confidence: float
    y_start: float
    y_end: float
    coeffs_x: np.ndarray  # (R+1,) ascending powers of y
    coeffs_z: np.ndarray  # (R+1,)
    category: int = 1

    def __post_init__(self):
        self.coeffs_x = np.asarray(self.coeffs_x, dtype=np.float64)
        self.coeffs_z = np.asarray(self.coeffs_z, dtype=np.float64)
        if self.coeffs_x.shape != self.coeffs_z.shape or self.coeffs_x.ndim != 1:
            raise ValueError("coefficient vectors must be 1D and equal length")
        if not self.y_start < self.y_end:
            raise ValueError(f"y_start must be < y_end, got ({self.y_start}, {self.y_end})")

    @property
    def order(self) -> int:
        return len(self.coeffs_x) - 1


@dataclass
class AnchorPointSet:
    """Ordered 3D points at fixed y positions plus a normalized (s, e) range."""

    points: np.ndarray  # (N, 3)
    range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError("points must be (N, 3)")
        y = self.points[:, 1]
        if len(y) > 1 and not np.all(np.diff(y) > 0):
            raise ValueError("anchor y positions must be strictly increasing")
        s, e = self.range
        if not (0.0 <= s < e <= 1.0):
            raise ValueError(f"range must satisfy 0 <= s < e <= 1, got {self.range}")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class GroundTruthLane:
    """Ordered 3D lane points with boundary markers and class flag."""

    points: np.ndarray  # (P, 3), sorted by y
    boundary: tuple[float, float] | None = None
    is_lane: int = 1
    category: int = 1
    track_id: int | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.is_lane and len(self.points) < 2:
            raise ValueError("a real lane needs at least 2 points")
        if len(self.points) > 1 and not np.all(np.diff(self.points[:, 1]) > 0):
            raise ValueError("lane points must be sorted by strictly increasing y")
        if self.boundary is None:
            self.boundary = (float(self.points[0, 1]), float(self.points[-1, 1]))


def sample_lane_points(lane: PolyLane, y_positions) -> np.ndarray:
    """Evaluate the lane polynomials at all y positions (no range clipping)."""
    ys = np.asarray(y_positions, dtype=np.float64)
    if len(ys) > 1 and not np.all(np.diff(ys) > 0):
        raise ValueError("y_positions must be sorted ascending")
    x = np.polynomial.polynomial.polyval(ys, lane.coeffs_x)
    z = np.polynomial.polynomial.polyval(ys, lane.coeffs_z)
    return np.stack([x, ys, z], axis=1)


def fit_polynomials(points, order: int) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares fit of x(y) and z(y) of the given order to 3D points."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    ys = pts[:, 1]
    if len(np.unique(ys)) < order + 1:
        raise ValueError(
            f"need at least {order + 1} distinct y values for an order-{order} fit, "
            f"got {len(np.unique(ys))}")
    vander = np.polynomial.polynomial.polyvander(ys, order)
    coeffs_x, _, _, _ = np.linalg.lstsq(vander, pts[:, 0], rcond=None)
    coeffs_z, _, _, _ = np.linalg.lstsq(vander, pts[:, 2], rcond=None)
    return coeffs_x, coeffs_z


def range_active_mask(n: int, rng: tuple[float, float]) -> np.ndarray:
    """Active-point mask for N uniform positions under a normalized range.

    Position n sits at t_n = n / (N - 1); active iff s <= t_n < e, except
    t = 1 which is active when e == 1 so the full range keeps every point.
    """
    s, e = rng
    t = np.arange(n, dtype=np.float64) / max(n - 1, 1)
    mask = (t >= s) & (t < e)
    if e >= 1.0:
        mask |= t >= 1.0
    return mask


def clip_points_to_range(anchor: AnchorPointSet,
                         rng: tuple[float, float] | None = None) -> np.ndarray:
    """Flag anchor points outside the normalized (s, e) range as inactive.

    Returns a boolean mask aligned with the point order; callers keep the
    points themselves untouched.
    """
    if rng is None:
        rng = anchor.range
    s, e = rng
    if not (0.0 <= s < e <= 1.0):
        raise ValueError(f"invalid range {rng}")
    return range_active_mask(len(anchor), (s, e))


def resample_at_y(points: np.ndarray, y_positions,
                  clamp_boundary: tuple[float, float] | None = None
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Piecewise-linear resampling of an ordered 3D polyline onto a y grid.

    Returns (values, covered): values is (N, 2) of (x, z) at each query y,
    covered marks queries inside the polyline's own y extent (or inside
    ``clamp_boundary`` when given).  Values outside the extent are clamped
    to the nearest endpoint.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    ys = np.asarray(y_positions, dtype=np.float64)
    knots = pts[:, 1]
    x = np.interp(ys, knots, pts[:, 0])
    z = np.interp(ys, knots, pts[:, 2])
    lo, hi = knots[0], knots[-1]
    if clamp_boundary is not None:
        lo, hi = max(lo, clamp_boundary[0]), min(hi, clamp_boundary[1])
    covered = (ys >= lo) & (ys <= hi)
    return np.stack([x, z], axis=1), covered


def coeffs_unit_to_y(coeffs_unit, y_min: float, y_max: float) -> np.ndarray:
    """Convert coefficients over t = (y - y_min)/(y_max - y_min) to raw-y basis."""
    coeffs_unit = np.atleast_1d(np.asarray(coeffs_unit, dtype=np.float64))
    p = np.polynomial.Polynomial(coeffs_unit, domain=[y_min, y_max], window=[0.0, 1.0])
    out = p.convert(domain=[y_min, y_max], window=[y_min, y_max]).coef
    # convert() drops trailing zeros; keep the vector length stable
    full = np.zeros(len(coeffs_unit))
    full[: len(out)] = out
    return full


def coeffs_y_to_unit(coeffs_y, y_min: float, y_max: float) -> np.ndarray:
    """Inverse of :func:`coeffs_unit_to_y`."""
    p = np.polynomial.Polynomial(np.asarray(coeffs_y, dtype=np.float64),
                                 domain=[y_min, y_max], window=[y_min, y_max])
    out = p.convert(domain=[y_min, y_max], window=[0.0, 1.0]).coef
    # convert() drops trailing zeros; keep the vector length stable
    full = np.zeros(len(np.atleast_1d(coeffs_y)))
    full[: len(out)] = out
    return full
