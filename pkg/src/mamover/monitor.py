"""Mesh density fields from discrete states, and equidistribution metrics.

The 2-D density rule is rho = 1 + ||grad u|| / alpha with the intensity
scale alpha tied to the state's mean gradient magnitude, so rho is
invariant under positive rescaling of u.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geom import MovedMesh, ScalarField2D, bilinear_sample, cell_volumes

ALPHA_FLOOR = 1e-8


@dataclass(frozen=True)
class MonitorField:
    """Mesh density rho, its total mass sigma, and the intensity scale alpha."""

    rho: ScalarField2D
    alpha: float
    sigma: float


def grad_fd(u: ScalarField2D, boundary: str = "one_sided") -> tuple[np.ndarray, np.ndarray]:
    """Finite-difference gradient of a nodal field.

    Central differences in the interior; edges use wrap-around stencils
    (``periodic``, assumes the first and last node coincide) or
    second-order one-sided stencils (``one_sided``).
    """
    v = u.values
    hx, hy = u.grid.hx, u.grid.hy
    if boundary == "periodic":
        # Duplicated edge node: drop it, wrap, restore.
        core = v[:-1, :-1]
        gx = (np.roll(core, -1, axis=0) - np.roll(core, 1, axis=0)) / (2 * hx)
        gy = (np.roll(core, -1, axis=1) - np.roll(core, 1, axis=1)) / (2 * hy)
        gxf = np.empty_like(v)
        gyf = np.empty_like(v)
        gxf[:-1, :-1], gyf[:-1, :-1] = gx, gy
        gxf[-1, :], gyf[-1, :] = gxf[0, :], gyf[0, :]
        gxf[:, -1], gyf[:, -1] = gxf[:, 0], gyf[:, 0]
        return gxf, gyf
    if boundary != "one_sided":
        raise ValueError(f"unknown boundary rule {boundary!r}")
    gx = np.empty_like(v)
    gy = np.empty_like(v)
    gx[1:-1, :] = (v[2:, :] - v[:-2, :]) / (2 * hx)
    gx[0, :] = (-3 * v[0, :] + 4 * v[1, :] - v[2, :]) / (2 * hx)
    gx[-1, :] = (3 * v[-1, :] - 4 * v[-2, :] + v[-3, :]) / (2 * hx)
    gy[:, 1:-1] = (v[:, 2:] - v[:, :-2]) / (2 * hy)
    gy[:, 0] = (-3 * v[:, 0] + 4 * v[:, 1] - v[:, 2]) / (2 * hy)
    gy[:, -1] = (3 * v[:, -1] - 4 * v[:, -2] + v[:, -3]) / (2 * hy)
    return gx, gy


def _cell_seminorms(u: ScalarField2D, boundary: str) -> tuple[np.ndarray, float]:
    """Per-cell scaled W^{1,2} semi-norm of u and the cell area."""
    gx, gy = grad_fd(u, boundary)
    gn2 = gx**2 + gy**2
    # Cell average of ||grad u||^2 from the four corners, then sqrt.
    avg = 0.25 * (gn2[:-1, :-1] + gn2[1:, :-1] + gn2[:-1, 1:] + gn2[1:, 1:])
    return np.sqrt(avg), u.grid.hx * u.grid.hy


def alpha_scale(u: ScalarField2D, C: float = 100.0, boundary: str = "one_sided") -> float:
    """Intensity scale alpha = (1/(C|Omega|)) * sum_K |K| <u>_{W^{1,2}(K)}.

    Small alpha concentrates the mesh on high-gradient regions; a constant
    field falls back to ALPHA_FLOOR (downstream rho is then uniform).
    """
    sem, cell_area = _cell_seminorms(u, boundary)
    alpha = float(np.sum(sem) * cell_area / (C * u.grid.area))
    return max(alpha, ALPHA_FLOOR)


def density(u: ScalarField2D, alpha: float, boundary: str = "one_sided") -> MonitorField:
    """Nodal mesh density rho = 1 + ||grad u||/alpha with trapezoid mass sigma."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    gx, gy = grad_fd(u, boundary)
    rho = 1.0 + np.sqrt(gx**2 + gy**2) / alpha
    fld = ScalarField2D(u.grid, rho)
    sigma = trapezoid_mass(fld)
    return MonitorField(fld, alpha, sigma)


def monitor_from_state(u: ScalarField2D, C: float = 100.0, boundary: str = "one_sided") -> MonitorField:
    """Convenience: density field with the alpha rule applied."""
    return density(u, alpha_scale(u, C, boundary), boundary)


def trapezoid_mass(fld: ScalarField2D) -> float:
    """Trapezoid-rule integral of a nodal field over the domain."""
    v = fld.values
    w_x = np.ones(fld.grid.nx)
    w_x[0] = w_x[-1] = 0.5
    w_y = np.ones(fld.grid.ny)
    w_y[0] = w_y[-1] = 0.5
    return float(w_x @ v @ w_y * fld.grid.hx * fld.grid.hy)


def equidist_metrics(mesh: MovedMesh, mon: MonitorField) -> tuple[float, float]:
    """(std, range) of normalized rho-weighted cell volumes.

    v_K = |K| * rho(centroid); w_K = N v_K / sum(v_K), so a perfectly
    equidistributed mesh gives w_K identically 1 and metrics (0, 0).
    Invariant under uniform scaling of rho.
    """
    vols = cell_volumes(mesh)
    c = mesh.coords
    centroids = 0.25 * (c[:-1, :-1] + c[1:, :-1] + c[1:, 1:] + c[:-1, 1:])
    rho_c = bilinear_sample(mon.rho, centroids.reshape(-1, 2))
    v = vols.areas.reshape(-1) * rho_c
    total = v.sum()
    if total <= 0:
        raise ValueError("degenerate mesh: non-positive total weighted volume")
    w = v.size * v / total
    return float(np.std(w)), float(w.max() - w.min())
