"""Digital terrain map: a regular height grid with a bilinear surface model.

Nodes sit at ``(origin_x + i * cell_size, origin_y + j * cell_size)`` and
``heights[j, i]`` is the elevation there, so row 0 is the lowest y.  The world
frame is right-handed with z up, everything in meters.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BelowSurfaceError, DomainError, DtmFormatError, RayEscapesError

SURFACE_TOLERANCE = 1e-9

_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")


@dataclass(frozen=True)
class SurfaceContact:
    """Ray/terrain contact point and the upward unit normal there."""

    point: np.ndarray
    normal: np.ndarray


@dataclass(frozen=True)
class TerrainGrid:
    origin_x: float
    origin_y: float
    cell_size: float
    heights: np.ndarray = field(repr=False)

    def __post_init__(self):
        h = np.array(self.heights, dtype=float)
        if h.ndim != 2 or h.shape[0] < 2 or h.shape[1] < 2:
            raise ValueError(f"heights must be a 2-D array of at least 2x2 nodes, got shape {h.shape}")
        if not self.cell_size > 0:
            raise ValueError(f"cell_size must be positive, got {self.cell_size}")
        if not np.all(np.isfinite(h)):
            raise ValueError("terrain heights must all be finite")
        h.setflags(write=False)
        object.__setattr__(self, "heights", h)
        object.__setattr__(self, "origin_x", float(self.origin_x))
        object.__setattr__(self, "origin_y", float(self.origin_y))
        object.__setattr__(self, "cell_size", float(self.cell_size))

    @property
    def n_rows(self) -> int:
        return self.heights.shape[0]

    @property
    def n_cols(self) -> int:
        return self.heights.shape[1]

    @property
    def x_max(self) -> float:
        return self.origin_x + (self.n_cols - 1) * self.cell_size

    @property
    def y_max(self) -> float:
        return self.origin_y + (self.n_rows - 1) * self.cell_size

    @property
    def min_height(self) -> float:
        return float(self.heights.min())

    @property
    def max_height(self) -> float:
        return float(self.heights.max())

    def contains(self, x, y):
        """Elementwise footprint test (closed rectangle)."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return (x >= self.origin_x) & (x <= self.x_max) & (y >= self.origin_y) & (y <= self.y_max)

    # -- surface model -------------------------------------------------------

    def _cells(self, x, y):
        # floor-indexed cell; the last node row/column belongs to the previous cell
        gx = (x - self.origin_x) / self.cell_size
        gy = (y - self.origin_y) / self.cell_size
        i = np.clip(np.floor(gx).astype(np.intp), 0, self.n_cols - 2)
        j = np.clip(np.floor(gy).astype(np.intp), 0, self.n_rows - 2)
        return i, j, gx - i, gy - j

    def _check_inside(self, x, y):
        inside = self.contains(x, y)
        if not np.all(inside):
            bad = np.flatnonzero(~np.atleast_1d(inside))[0]
            bx = np.atleast_1d(x)[bad]
            by = np.atleast_1d(y)[bad]
            raise DomainError(
                f"point ({bx:.6g}, {by:.6g}) lies outside the DTM footprint "
                f"x in [{self.origin_x:.6g}, {self.x_max:.6g}], y in [{self.origin_y:.6g}, {self.y_max:.6g}]"
            )

    def heights_at(self, x, y):
        """Vectorized bilinear height; no bounds checking."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        i, j, s, r = self._cells(x, y)
        h = self.heights
        h00 = h[j, i]
        h10 = h[j, i + 1]
        h01 = h[j + 1, i]
        h11 = h[j + 1, i + 1]
        return h00 * (1 - s) * (1 - r) + h10 * s * (1 - r) + h01 * (1 - s) * r + h11 * s * r

    def gradients_at(self, x, y):
        """Vectorized (dh/dx, dh/dy) of the bilinear patch; no bounds checking."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        i, j, s, r = self._cells(x, y)
        h = self.heights
        h00 = h[j, i]
        h10 = h[j, i + 1]
        h01 = h[j + 1, i]
        h11 = h[j + 1, i + 1]
        dhdx = ((h10 - h00) * (1 - r) + (h11 - h01) * r) / self.cell_size
        dhdy = ((h01 - h00) * (1 - s) + (h11 - h10) * s) / self.cell_size
        return dhdx, dhdy

    def normals_at(self, x, y):
        """Vectorized upward unit normals, shape ``(..., 3)``."""
        gx, gy = self.gradients_at(x, y)
        n = np.stack([-gx, -gy, np.ones_like(gx)], axis=-1)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def height_at(self, x: float, y: float) -> float:
        """Bilinear terrain height at ``(x, y)``.

        Raises
        ------
        DomainError
            If the point is outside the grid footprint.
        """
        self._check_inside(x, y)
        return float(self.heights_at(x, y))

    def normal_at(self, x: float, y: float) -> np.ndarray:
        self._check_inside(x, y)
        return self.normals_at(x, y)

    # -- ray casting ---------------------------------------------------------

    def intersect_rays(self, origins, directions, max_bisections=80, strict=True):
        """Cast many rays at once against the surface.

        March each ray in steps of half a cell until the ray drops below the
        terrain, then bisect the bracket and finish with one secant step.
        Marching starts where the ray descends through the highest node, since
        no crossing can happen above it.

        Parameters
        ----------
        origins, directions : array_like, shape (m, 3)
            Ray starting points and directions (normalized internally).

        strict : bool
            If false, rays that escape (or start below the surface) yield NaN
            rows instead of raising.

        Returns
        -------
        points, normals : ndarray, shape (m, 3)

        Raises
        ------
        BelowSurfaceError
            Some origin is not strictly above the terrain.
        RayEscapesError
            Some ray leaves the footprint before touching the surface;
            ``indices`` lists which.
        """
        o = np.atleast_2d(np.asarray(origins, dtype=float))
        d = np.atleast_2d(np.asarray(directions, dtype=float))
        o, d = np.broadcast_arrays(o, d)
        d = d / np.linalg.norm(d, axis=-1, keepdims=True)
        m = o.shape[0]

        inside0 = self.contains(o[:, 0], o[:, 1])
        if strict and not np.all(inside0):
            bad = np.flatnonzero(~inside0)
            raise RayEscapesError(f"ray origin outside DTM footprint for rays {bad.tolist()}", bad)
        gap0 = np.where(inside0, o[:, 2] - self.heights_at(o[:, 0], o[:, 1]), np.inf)
        if strict and np.any(gap0 <= 0):
            bad = np.flatnonzero(gap0 <= 0)
            raise BelowSurfaceError(f"ray origin on or below the terrain for rays {bad.tolist()}")
        invalid = ~inside0 | (gap0 <= 0)

        step = 0.5 * self.cell_size
        hmax = self.max_height
        descending = d[:, 2] < 0
        t_lo = np.zeros(m)
        t_lo[descending] = np.maximum(0.0, (o[descending, 2] - hmax) / -d[descending, 2])
        t_hi = np.full(m, np.nan)
        active = np.ones(m, dtype=bool)
        escaped = np.zeros(m, dtype=bool)
        # a ray starting above every node and not descending can never land
        hopeless = (~descending & (o[:, 2] > hmax)) | invalid
        escaped[hopeless] = True
        active[hopeless] = False

        span = np.hypot(self.x_max - self.origin_x, self.y_max - self.origin_y)
        max_steps = int(np.ceil(span / step)) + 2 + int(np.ceil((hmax - self.min_height) / step))
        for _ in range(max_steps * 4):
            if not active.any():
                break
            idx = np.flatnonzero(active)
            t = t_lo[idx] + step
            p = o[idx] + t[:, None] * d[idx]
            inside = self.contains(p[:, 0], p[:, 1])
            gap = np.full(idx.size, np.inf)
            gap[inside] = p[inside, 2] - self.heights_at(p[inside, 0], p[inside, 1])
            landed = inside & (gap <= 0)
            out = ~inside
            t_hi[idx[landed]] = t[landed]
            escaped[idx[out]] = True
            active[idx[landed | out]] = False
            keep = idx[~(landed | out)]
            t_lo[keep] = t[~(landed | out)]
        escaped |= active
        if strict and escaped.any():
            bad = np.flatnonzero(escaped)
            raise RayEscapesError(f"ray escapes DTM for rays {bad.tolist()}", bad)
        t_lo[escaped] = 0.0
        t_hi[escaped] = 0.0

        def gap_at(t):
            p = o + t[:, None] * d
            return p[:, 2] - self.heights_at(p[:, 0], p[:, 1])

        lo, hi = t_lo.copy(), t_hi.copy()
        g_lo, g_hi = gap_at(lo), gap_at(hi)
        for _ in range(max_bisections):
            width = hi - lo
            if np.all(width <= 1e-12 * np.maximum(1.0, hi)):
                break
            mid = 0.5 * (lo + hi)
            g_mid = gap_at(mid)
            above = g_mid > 0
            lo = np.where(above, mid, lo)
            g_lo = np.where(above, g_mid, g_lo)
            hi = np.where(above, hi, mid)
            g_hi = np.where(above, g_hi, g_mid)
        denom = g_lo - g_hi
        frac = np.where(denom > 0, g_lo / np.where(denom > 0, denom, 1.0), 0.5)
        t_hit = lo + frac * (hi - lo)
        points = o + t_hit[:, None] * d
        normals = self.normals_at(points[:, 0], points[:, 1])
        points[escaped] = np.nan
        normals[escaped] = np.nan
        return points, normals

    def intersect_ray(self, origin, direction) -> SurfaceContact:
        """First crossing of a single ray with the terrain surface."""
        pts, nrm = self.intersect_rays(np.reshape(origin, (1, 3)), np.reshape(direction, (1, 3)))
        return SurfaceContact(point=pts[0], normal=nrm[0])


def load_ascii_grid(path) -> TerrainGrid:
    """Read an ESRI-style ASCII grid.

    The six header lines are ``ncols nrows xllcorner yllcorner cellsize
    nodata_value`` (any order, case-insensitive).  The first data row is the
    highest y.  ``xllcorner``/``yllcorner`` locate the lower-left node.
    """
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DtmFormatError(f"cannot read DTM file {path}: {exc}") from exc
    header = {}
    for lineno, line in enumerate(lines[:6], start=1):
        parts = line.split()
        if len(parts) != 2 or parts[0].lower() not in _HEADER_KEYS:
            raise DtmFormatError(f"{path}:{lineno}: expected '<key> <value>' header line, got {line!r}")
        header[parts[0].lower()] = parts[1]
    missing = [k for k in _HEADER_KEYS if k not in header]
    if missing:
        raise DtmFormatError(f"{path}: missing header keys {missing}")
    try:
        ncols = int(header["ncols"])
        nrows = int(header["nrows"])
        x0 = float(header["xllcorner"])
        y0 = float(header["yllcorner"])
        cell = float(header["cellsize"])
        nodata = float(header["nodata_value"])
    except ValueError as exc:
        raise DtmFormatError(f"{path}: bad header value: {exc}") from exc
    try:
        values = np.array(" ".join(lines[6:]).split(), dtype=float)
    except ValueError as exc:
        raise DtmFormatError(f"{path}: non-numeric height value: {exc}") from exc
    if values.size != ncols * nrows:
        raise DtmFormatError(f"{path}: expected {ncols * nrows} heights, found {values.size}")
    rows = values.reshape(nrows, ncols)[::-1]
    if np.any(rows == nodata):
        j, i = np.argwhere(rows == nodata)[0]
        raise DtmFormatError(f"{path}: nodata value at node column {i}, row {nrows - 1 - j} (from top)")
    return TerrainGrid(x0, y0, cell, rows)


def save_ascii_grid(grid: TerrainGrid, path, nodata_value=-9999.0):
    """Write ``grid`` in the format read by :func:`load_ascii_grid`."""
    lines = [
        f"ncols {grid.n_cols}",
        f"nrows {grid.n_rows}",
        f"xllcorner {grid.origin_x!r}",
        f"yllcorner {grid.origin_y!r}",
        f"cellsize {grid.cell_size!r}",
        f"nodata_value {nodata_value!r}",
    ]
    for row in grid.heights[::-1]:
        lines.append(" ".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")
