"""Signed distance to unions of planar primitives, exact and gridded.

Distances are in meters, positive in free space and negative inside
obstacles. The arena boundary counts as an obstacle: the field also goes
negative outside the arena rectangle, so gradients always point back into
free space. The grid stores exact samples and answers queries by bilinear
interpolation, whose gradient is available in closed form everywhere
except on cell edges.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["Disk", "Rect", "analytic_sdf", "SdfGrid", "StackedSdfGrid",
           "grid_from_obstacles", "OutsideGridError"]


class OutsideGridError(ValueError):
    pass


@dataclass(frozen=True)
class Disk:
    center: tuple[float, float]
    radius: float

    def sdf(self, p: np.ndarray) -> np.ndarray:
        d = np.linalg.norm(p - np.asarray(self.center), axis=-1)
        return d - self.radius

    def boundary_points(self, n: int, rng: np.random.Generator) -> np.ndarray:
        ang = rng.uniform(0.0, 2 * np.pi, size=n)
        c = np.asarray(self.center)
        return c + self.radius * np.stack([np.cos(ang), np.sin(ang)], axis=-1)


@dataclass(frozen=True)
class Rect:
    """Axis-aligned solid rectangle given by center and half extents."""

    center: tuple[float, float]
    half: tuple[float, float]

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.center) - np.asarray(self.half)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.center) + np.asarray(self.half)

    def sdf(self, p: np.ndarray) -> np.ndarray:
        q = np.abs(p - np.asarray(self.center)) - np.asarray(self.half)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.maximum(q[..., 0], q[..., 1]), 0.0)
        return outside + inside

    def boundary_points(self, n: int, rng: np.random.Generator) -> np.ndarray:
        w, h = 2 * self.half[0], 2 * self.half[1]
        per = 2 * (w + h)
        s = rng.uniform(0.0, per, size=n)
        pts = np.empty((n, 2))
        lo = self.lo
        for i, si in enumerate(s):
            if si < w:
                pts[i] = (lo[0] + si, lo[1])
            elif si < w + h:
                pts[i] = (lo[0] + w, lo[1] + si - w)
            elif si < 2 * w + h:
                pts[i] = (lo[0] + (si - w - h), lo[1] + h)
            else:
                pts[i] = (lo[0], lo[1] + si - 2 * w - h)
        return pts


def analytic_sdf(points: np.ndarray, obstacles, bounds) -> np.ndarray:
    """Exact signed distance to the union of obstacles and the arena edge.

    ``bounds`` is ((x_lo, y_lo), (x_hi, y_hi)). Inside the arena the
    boundary term is the distance to the nearest wall; outside it is
    negative.
    """
    p = np.asarray(points, dtype=np.float64)
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    margins = np.concatenate([p - lo, hi - p], axis=-1)
    value = margins.min(axis=-1)
    for obs in obstacles:
        value = np.minimum(value, obs.sdf(p))
    return value


@dataclass(frozen=True)
class SdfGrid:
    """Regular grid of signed distances with bilinear interpolation.

    values[i, j] samples the field at origin + (i, j) * cell, i along x.
    """

    values: np.ndarray
    origin: np.ndarray
    cell: float

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @property
    def extent(self) -> np.ndarray:
        return self.origin + (np.array(self.values.shape) - 1) * self.cell

    def _locate(self, points: np.ndarray, clamp: bool):
        p = np.asarray(points, dtype=np.float64)
        rel = (p - self.origin) / self.cell
        n = np.array(self.values.shape)
        if clamp:
            rel = np.clip(rel, 0.0, n - 1 - 1e-9)
        else:
            bad = (rel < 0.0) | (rel > n - 1)
            if np.any(bad):
                raise OutsideGridError("query point outside the sdf grid")
            rel = np.minimum(rel, n - 1 - 1e-9)
        i0 = np.floor(rel).astype(np.int64)
        frac = rel - i0
        return i0, frac

    def sample(self, points: np.ndarray, clamp: bool = False) -> np.ndarray:
        i0, frac = self._locate(points, clamp)
        ix, iy = i0[..., 0], i0[..., 1]
        fx, fy = frac[..., 0], frac[..., 1]
        v = self.values
        v00 = v[ix, iy]
        v10 = v[ix + 1, iy]
        v01 = v[ix, iy + 1]
        v11 = v[ix + 1, iy + 1]
        return (v00 * (1 - fx) * (1 - fy) + v10 * fx * (1 - fy)
                + v01 * (1 - fx) * fy + v11 * fx * fy)

    def sample_with_grad(self, points: np.ndarray, clamp: bool = False):
        """Interpolated value and its spatial gradient at each point."""
        i0, frac = self._locate(points, clamp)
        ix, iy = i0[..., 0], i0[..., 1]
        fx, fy = frac[..., 0], frac[..., 1]
        v = self.values
        v00 = v[ix, iy]
        v10 = v[ix + 1, iy]
        v01 = v[ix, iy + 1]
        v11 = v[ix + 1, iy + 1]
        val = (v00 * (1 - fx) * (1 - fy) + v10 * fx * (1 - fy)
               + v01 * (1 - fx) * fy + v11 * fx * fy)
        dx = ((v10 - v00) * (1 - fy) + (v11 - v01) * fy) / self.cell
        dy = ((v01 - v00) * (1 - fx) + (v11 - v10) * fx) / self.cell
        return val, np.stack([dx, dy], axis=-1)


@dataclass(frozen=True)
class StackedSdfGrid:
    """Per-row stack of same-shape grids for batched queries.

    Row b of a (B, ...) query point array reads grid b. Mirrors the
    SdfGrid sampling interface so objective code can use either.
    """

    values: np.ndarray          # (B, R, R)
    origin: np.ndarray
    cell: float

    @classmethod
    def stack(cls, grids) -> "StackedSdfGrid":
        first = grids[0]
        for g in grids:
            if g.values.shape != first.values.shape or g.cell != first.cell \
                    or not np.array_equal(g.origin, first.origin):
                raise ValueError("grids must share shape, origin, and cell")
        return cls(values=np.stack([g.values for g in grids]),
                   origin=first.origin, cell=first.cell)

    def _locate(self, points: np.ndarray, clamp: bool):
        p = np.asarray(points, dtype=np.float64)
        if p.shape[0] != self.values.shape[0]:
            raise ValueError("leading axis of points must match grid stack")
        rel = (p - self.origin) / self.cell
        n = self.values.shape[1]
        if clamp:
            rel = np.clip(rel, 0.0, n - 1 - 1e-9)
        else:
            bad = (rel < 0.0) | (rel > n - 1)
            if np.any(bad):
                raise OutsideGridError("query point outside the sdf grid")
            rel = np.minimum(rel, n - 1 - 1e-9)
        i0 = np.floor(rel).astype(np.int64)
        return i0, rel - i0

    def sample_with_grad(self, points: np.ndarray, clamp: bool = False):
        i0, frac = self._locate(points, clamp)
        ix, iy = i0[..., 0], i0[..., 1]
        fx, fy = frac[..., 0], frac[..., 1]
        b = np.arange(len(self.values)).reshape(
            (-1,) + (1,) * (ix.ndim - 1))
        v = self.values
        v00 = v[b, ix, iy]
        v10 = v[b, ix + 1, iy]
        v01 = v[b, ix, iy + 1]
        v11 = v[b, ix + 1, iy + 1]
        val = (v00 * (1 - fx) * (1 - fy) + v10 * fx * (1 - fy)
               + v01 * (1 - fx) * fy + v11 * fx * fy)
        dx = ((v10 - v00) * (1 - fy) + (v11 - v01) * fy) / self.cell
        dy = ((v01 - v00) * (1 - fx) + (v11 - v10) * fx) / self.cell
        return val, np.stack([dx, dy], axis=-1)

    def sample(self, points: np.ndarray, clamp: bool = False):
        return self.sample_with_grad(points, clamp)[0]


def grid_from_obstacles(obstacles, bounds, resolution: int = 64) -> SdfGrid:
    """Sample the exact union field on a resolution x resolution grid."""
    if resolution < 32:
        raise ValueError("resolution must be >= 32")
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    if not np.isclose(hi[0] - lo[0], hi[1] - lo[1]):
        raise ValueError("grid requires a square domain (one cell size)")
    xs = np.linspace(lo[0], hi[0], resolution)
    ys = np.linspace(lo[1], hi[1], resolution)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([gx, gy], axis=-1)
    values = analytic_sdf(pts, obstacles, bounds)
    cell = float((hi[0] - lo[0]) / (resolution - 1))
    return SdfGrid(values=values, origin=lo, cell=cell)
