"""Structured grids, moved meshes, cell geometry and field sampling."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import mmf


@dataclass(frozen=True)
class StructuredGrid:
    """Uniform tensor-product lattice on a rectangle (default unit square).

    Node (i, j) sits at (x0 + i*hx, y0 + j*hy); fields over the grid are
    stored as (nx, ny) arrays indexed [i, j] with i along x.
    """

    nx: int
    ny: int
    domain: tuple[float, float, float, float] = (0.0, 1.0, 0.0, 1.0)

    def __post_init__(self):
        if self.nx < 3 or self.ny < 3:
            raise ValueError("grid needs at least 3 nodes per axis")
        x0, x1, y0, y1 = self.domain
        if not (x1 > x0 and y1 > y0):
            raise ValueError("degenerate domain")

    @property
    def hx(self) -> float:
        x0, x1, _, _ = self.domain
        return (x1 - x0) / (self.nx - 1)

    @property
    def hy(self) -> float:
        _, _, y0, y1 = self.domain
        return (y1 - y0) / (self.ny - 1)

    @property
    def area(self) -> float:
        x0, x1, y0, y1 = self.domain
        return (x1 - x0) * (y1 - y0)

    @property
    def xs(self) -> np.ndarray:
        x0, x1, _, _ = self.domain
        return np.linspace(x0, x1, self.nx)

    @property
    def ys(self) -> np.ndarray:
        _, _, y0, y1 = self.domain
        return np.linspace(y0, y1, self.ny)

    def nodes(self) -> np.ndarray:
        """All node coordinates, shape (nx, ny, 2)."""
        xg, yg = np.meshgrid(self.xs, self.ys, indexing="ij")
        return np.stack([xg, yg], axis=-1)


@dataclass(frozen=True)
class ScalarField2D:
    """Nodal scalar values over a StructuredGrid."""

    grid: StructuredGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (self.grid.nx, self.grid.ny):
            raise ValueError(
                f"values shape {vals.shape} != grid ({self.grid.nx}, {self.grid.ny})"
            )
        if not np.all(np.isfinite(vals)):
            raise ValueError("field contains non-finite values")
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True)
class MovedMesh:
    """Node positions of a structured mesh after a coordinate transform.

    Connectivity is implicit: quad cells (i,j)-(i+1,j)-(i+1,j+1)-(i,j+1).
    """

    base: StructuredGrid
    coords: np.ndarray = field(repr=False)

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=float)
        if c.shape != (self.base.nx, self.base.ny, 2):
            raise ValueError(f"coords shape {c.shape} incompatible with base grid")
        if not np.all(np.isfinite(c)):
            raise ValueError("coords contain non-finite values")
        object.__setattr__(self, "coords", c)

    @classmethod
    def identity(cls, grid: StructuredGrid) -> "MovedMesh":
        return cls(grid, grid.nodes())

    def save(self, path) -> None:
        mmf.save_arrays(path, [self.coords[..., 0], self.coords[..., 1]])

    @classmethod
    def load(cls, path, domain=(0.0, 1.0, 0.0, 1.0)) -> "MovedMesh":
        xc, yc = mmf.load_arrays(path, 2)
        grid = StructuredGrid(xc.shape[0], xc.shape[1], domain)
        return cls(grid, np.stack([xc, yc], axis=-1))


class CellVolumes(NamedTuple):
    areas: np.ndarray       # absolute areas, shape (nx-1, ny-1)
    signed: np.ndarray      # signed shoelace areas
    tangled: int            # number of cells with signed area <= 0


def cell_volumes(mesh: MovedMesh) -> CellVolumes:
    """Shoelace area of every quad cell; non-positive signed area flags tangling."""
    c = mesh.coords
    p0 = c[:-1, :-1]
    p1 = c[1:, :-1]
    p2 = c[1:, 1:]
    p3 = c[:-1, 1:]
    signed = 0.5 * (
        p0[..., 0] * p1[..., 1] - p1[..., 0] * p0[..., 1]
        + p1[..., 0] * p2[..., 1] - p2[..., 0] * p1[..., 1]
        + p2[..., 0] * p3[..., 1] - p3[..., 0] * p2[..., 1]
        + p3[..., 0] * p0[..., 1] - p0[..., 0] * p3[..., 1]
    )
    tangled = int(np.count_nonzero(signed <= 0.0))
    return CellVolumes(np.abs(signed), signed, tangled)


def bilinear_sample(fld: ScalarField2D, points: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of nodal values; points clamped to the domain.

    Exact for fields of the form a + b*x + c*y + d*x*y.
    """
    grid = fld.grid
    pts = np.asarray(points, dtype=float)
    scalar = pts.ndim == 1
    pts = np.atleast_2d(pts)
    x0, x1, y0, y1 = grid.domain
    px = np.clip(pts[..., 0], x0, x1)
    py = np.clip(pts[..., 1], y0, y1)
    fx = (px - x0) / grid.hx
    fy = (py - y0) / grid.hy
    i = np.clip(np.floor(fx).astype(int), 0, grid.nx - 2)
    j = np.clip(np.floor(fy).astype(int), 0, grid.ny - 2)
    tx = fx - i
    ty = fy - j
    v = fld.values
    out = (
        v[i, j] * (1 - tx) * (1 - ty)
        + v[i + 1, j] * tx * (1 - ty)
        + v[i, j + 1] * (1 - tx) * ty
        + v[i + 1, j + 1] * tx * ty
    )
    return out[0] if scalar else out


def knn(points: np.ndarray, query: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """k nearest points to `query` by Euclidean distance.

    Exhaustive search; ties broken by ascending index.  Returns (indices,
    distances) sorted by ascending distance.  `query` may be a single
    point (2,) or a batch (m, 2).
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ValueError("empty or malformed point set")
    if k > pts.shape[0]:
        raise ValueError(f"k={k} exceeds point count {pts.shape[0]}")
    q = np.asarray(query, dtype=float)
    scalar = q.ndim == 1
    q = np.atleast_2d(q)
    d2 = np.sum((q[:, None, :] - pts[None, :, :]) ** 2, axis=-1)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    dist = np.sqrt(np.take_along_axis(d2, order, axis=1))
    if scalar:
        return order[0], dist[0]
    return order, dist
