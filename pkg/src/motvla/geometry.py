"""Planar geometry on the BEV grid: oriented boxes, SAT overlap, rasterisation."""
from __future__ import annotations

import numpy as np

BEV_RANGE = 25.0
GRID = 32


def box_corners(cx: float, cy: float, w: float, l: float, yaw: float) -> np.ndarray:
    """Corners of a box with length ``l`` along ``yaw`` and width ``w``; shape (4, 2)."""
    c, s = np.cos(yaw), np.sin(yaw)
    hl, hw = 0.5 * l, 0.5 * w
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([cx, cy])


def _axes(poly: np.ndarray) -> np.ndarray:
    edges = np.roll(poly, -1, axis=0) - poly
    normals = np.stack([-edges[:, 1], edges[:, 0]], axis=1)
    return normals / np.linalg.norm(normals, axis=1, keepdims=True)


def polygons_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    """Separating-axis test for convex polygons; touching edges do not count."""
    for axis in np.concatenate([_axes(a), _axes(b)]):
        pa, pb = a @ axis, b @ axis
        if pa.max() <= pb.min() + 1e-12 or pb.max() <= pa.min() + 1e-12:
            return False
    return True


def cell_size(grid: int = GRID, extent: float = BEV_RANGE) -> float:
    return 2.0 * extent / grid


def cell_square(i: int, j: int, grid: int = GRID, extent: float = BEV_RANGE) -> np.ndarray:
    c = cell_size(grid, extent)
    x0, y0 = -extent + i * c, -extent + j * c
    return np.array([[x0, y0], [x0 + c, y0], [x0 + c, y0 + c], [x0, y0 + c]])


def cell_of(x: float, y: float, grid: int = GRID, extent: float = BEV_RANGE) -> tuple[int, int] | None:
    c = cell_size(grid, extent)
    i = int(np.floor((x + extent) / c))
    j = int(np.floor((y + extent) / c))
    if 0 <= i < grid and 0 <= j < grid:
        return i, j
    return None


def _candidate_cells(poly: np.ndarray, grid: int, extent: float):
    c = cell_size(grid, extent)
    lo = np.floor((poly.min(axis=0) + extent) / c).astype(int)
    hi = np.floor((poly.max(axis=0) + extent) / c).astype(int)
    lo = np.clip(lo, 0, grid - 1)
    hi = np.clip(hi, 0, grid - 1)
    for i in range(lo[0], hi[0] + 1):
        for j in range(lo[1], hi[1] + 1):
            yield i, j


def rasterize_polygon(grid_arr: np.ndarray, poly: np.ndarray, extent: float = BEV_RANGE) -> None:
    """Mark every cell whose square overlaps ``poly`` (in place)."""
    g = grid_arr.shape[0]
    for i, j in _candidate_cells(poly, g, extent):
        if not grid_arr[i, j] and polygons_overlap(poly, cell_square(i, j, g, extent)):
            grid_arr[i, j] = True


def rasterize_points(grid_arr: np.ndarray, pts: np.ndarray, extent: float = BEV_RANGE) -> None:
    g = grid_arr.shape[0]
    for x, y in pts:
        ij = cell_of(x, y, g, extent)
        if ij is not None:
            grid_arr[ij] = True


def polygon_hits_grid(poly: np.ndarray, grid_arr: np.ndarray, extent: float = BEV_RANGE) -> bool:
    g = grid_arr.shape[0]
    for i, j in _candidate_cells(poly, g, extent):
        if grid_arr[i, j] and polygons_overlap(poly, cell_square(i, j, g, extent)):
            return True
    return False


def resample_polyline(pts: np.ndarray, n: int) -> np.ndarray:
    """Resample an ordered polyline to ``n`` points evenly spaced in arc length."""
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if s[-1] <= 0:
        return np.repeat(pts[:1], n, axis=0)
    t = np.linspace(0.0, s[-1], n)
    return np.stack([np.interp(t, s, pts[:, 0]), np.interp(t, s, pts[:, 1])], axis=1)


EGO_WIDTH = 2.0
EGO_LENGTH = 4.5


def waypoint_headings(wps: np.ndarray, heading0: float = 0.0, min_step: float = 1e-3) -> np.ndarray:
    """Heading at each waypoint from the displacement into it.

    The first waypoint takes the ego's current heading ``heading0``; a
    near-zero step keeps the previous heading.
    """
    out = np.empty(len(wps))
    h = heading0
    for k in range(len(wps)):
        if k:
            dx, dy = wps[k] - wps[k - 1]
            if np.hypot(dx, dy) > min_step:
                h = float(np.arctan2(dy, dx))
        out[k] = h
    return out


def trajectory_collides(wps: np.ndarray, occupancy: np.ndarray, extent: float = BEV_RANGE,
                        width: float = EGO_WIDTH, length: float = EGO_LENGTH, heading0: float = 0.0) -> bool:
    for (x, y), h in zip(wps, waypoint_headings(wps, heading0)):
        if polygon_hits_grid(box_corners(x, y, width, length, h), occupancy, extent):
            return True
    return False
