"""Hot rasterization kernels: numba-jitted with a pure-numpy fallback.

The fallback is selected by setting the environment variable
``SPARSELANE_NO_NUMBA=1`` before import (or by calling :func:`set_backend`).
Both paths compute identical floating-point results: the same per-pixel
point-to-segment distance formula, combined with an order-independent min.
``benchmarks/benchmark_kernels.py`` compares the two.
"""

from __future__ import annotations

import os

import numpy as np

_FORCED = os.environ.get("SPARSELANE_NO_NUMBA", "0") not in ("0", "", "false")
_HAVE_NUMBA = False
if not _FORCED:
    try:
        from numba import njit

        _HAVE_NUMBA = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        _HAVE_NUMBA = False

_use_numba = _HAVE_NUMBA


def set_backend(use_numba: bool) -> None:
    """Force the kernel backend; used by tests and the benchmark."""
    global _use_numba
    if use_numba and not _HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is unavailable")
    _use_numba = use_numba


def backend_name() -> str:
    return "numba" if _use_numba else "numpy"


def _min_distance_numpy(field: np.ndarray, xs: np.ndarray, ys: np.ndarray,
                        cutoff: float) -> None:
    h, w = field.shape
    for i in range(len(xs) - 1):
        ax, ay, bx, by = xs[i], ys[i], xs[i + 1], ys[i + 1]
        c0 = max(int(np.floor(min(ax, bx) - cutoff)), 0)
        c1 = min(int(np.ceil(max(ax, bx) + cutoff)), w - 1)
        r0 = max(int(np.floor(min(ay, by) - cutoff)), 0)
        r1 = min(int(np.ceil(max(ay, by) + cutoff)), h - 1)
        if c1 < c0 or r1 < r0:
            continue
        cols = np.arange(c0, c1 + 1, dtype=np.float64)
        rows = np.arange(r0, r1 + 1, dtype=np.float64)
        px, py = np.meshgrid(cols, rows)
        dx, dy = bx - ax, by - ay
        seg_len2 = dx * dx + dy * dy
        if seg_len2 > 0.0:
            t = ((px - ax) * dx + (py - ay) * dy) / seg_len2
            t = np.clip(t, 0.0, 1.0)
        else:
            t = np.zeros_like(px)
        qx = ax + t * dx
        qy = ay + t * dy
        d = np.sqrt((px - qx) ** 2 + (py - qy) ** 2)
        np.minimum(field[r0:r1 + 1, c0:c1 + 1], d, out=field[r0:r1 + 1, c0:c1 + 1])


def _min_distance_scalar(field, xs, ys, cutoff):
    h, w = field.shape
    for i in range(len(xs) - 1):
        ax, ay, bx, by = xs[i], ys[i], xs[i + 1], ys[i + 1]
        lo_x = min(ax, bx) - cutoff
        hi_x = max(ax, bx) + cutoff
        lo_y = min(ay, by) - cutoff
        hi_y = max(ay, by) + cutoff
        c0 = max(int(np.floor(lo_x)), 0)
        c1 = min(int(np.ceil(hi_x)), w - 1)
        r0 = max(int(np.floor(lo_y)), 0)
        r1 = min(int(np.ceil(hi_y)), h - 1)
        if c1 < c0 or r1 < r0:
            continue
        dx = bx - ax
        dy = by - ay
        seg_len2 = dx * dx + dy * dy
        for r in range(r0, r1 + 1):
            py = float(r)
            for c in range(c0, c1 + 1):
                px = float(c)
                if seg_len2 > 0.0:
                    t = ((px - ax) * dx + (py - ay) * dy) / seg_len2
                    if t < 0.0:
                        t = 0.0
                    elif t > 1.0:
                        t = 1.0
                else:
                    t = 0.0
                qx = ax + t * dx
                qy = ay + t * dy
                d = np.sqrt((px - qx) ** 2 + (py - qy) ** 2)
                if d < field[r, c]:
                    field[r, c] = d


if _HAVE_NUMBA:
    _min_distance_numba = njit(cache=True)(_min_distance_scalar)


def polyline_min_distance(field: np.ndarray, polyline_xy: np.ndarray,
                          cutoff: float) -> None:
    """Update ``field`` in place with min distance to a polyline.

    field: (H, W) float64, preinitialized (typically to +inf); entry (r, c)
    is the distance from pixel center (c, r).  Pixels farther than ``cutoff``
    from a segment's bounding box are left untouched.
    polyline_xy: (P, 2) of (x=col, y=row) vertices.
    """
    pts = np.ascontiguousarray(polyline_xy, dtype=np.float64)
    if len(pts) < 2:
        return
    xs = np.ascontiguousarray(pts[:, 0])
    ys = np.ascontiguousarray(pts[:, 1])
    if _use_numba:
        _min_distance_numba(field, xs, ys, float(cutoff))
    else:
        _min_distance_numpy(field, xs, ys, float(cutoff))


def stroke_field(shape: tuple[int, int], polylines, cutoff: float) -> np.ndarray:
    """Min distance from each pixel center to any of the given polylines."""
    field = np.full(shape, np.inf, dtype=np.float64)
    for pl in polylines:
        polyline_min_distance(field, pl, cutoff)
    return field
