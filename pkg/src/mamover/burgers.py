"""Desk-scale 2-D Burgers data generation with periodic boundaries.

Scalar conservative form u_t + (u^2/2)_x + (u^2/2)_y = nu * Lap(u), solved
with RK4 on a fine periodic lattice (upwinded fluxes, central diffusion)
under CFL substepping, stored at unit time intervals, then downsampled by
node-aligned strides.  Fields are stored with the duplicated periodic edge
node, so an n-cell solve yields (n/f + 1)-node frames at stride f.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import mmf
from .geom import ScalarField2D, StructuredGrid


@dataclass(frozen=True)
class BurgersConfig:
    nu: float = 0.1
    solve_cells: int = 96          # fine-lattice cells per axis
    target_cells: int = 24         # downsampled cells per axis
    steps: int = 30                # stored frames after t=0, 1 time unit apart
    n_traj: int = 10
    seed: int = 0
    cfl: float = 0.4
    ic_variant: str = "verbatim"   # or "two_bump"

    def __post_init__(self):
        if self.solve_cells % self.target_cells:
            raise ValueError("solve resolution must be divisible by the target")
        if self.ic_variant not in ("verbatim", "two_bump"):
            raise ValueError(f"unknown ic_variant {self.ic_variant!r}")


@dataclass
class Dataset:
    config: BurgersConfig
    trajectories: list[list[ScalarField2D]]
    splits: dict[str, list[int]] = field(default_factory=dict)

    def frames(self, split: str | None = None):
        """Flat (state, time) pairs, optionally restricted to one split."""
        idxs = self.splits.get(split, range(len(self.trajectories))) if split \
            else range(len(self.trajectories))
        return [(fld, float(t)) for i in idxs
                for t, fld in enumerate(self.trajectories[i])]

    def pairs(self, split: str):
        """(state, time, next-values) transition tuples for one split."""
        out = []
        for i in self.splits[split]:
            traj = self.trajectories[i]
            for t in range(len(traj) - 1):
                out.append((traj[t], float(t), traj[t + 1].values))
        return out


def initial_condition(n: int, alpha: float, beta: float, variant: str = "verbatim") -> np.ndarray:
    """Gaussian-bump initial state on an n-cell periodic lattice (n x n)."""
    xs = np.arange(n) / n
    x1, x2 = np.meshgrid(xs, xs, indexing="ij")
    if variant == "verbatim":
        expo = -100 * (x1 - alpha) ** 2 - 100 * ((x1 - (1 - beta)) ** 2 + (x2 - (1 - beta)) ** 2)
    else:  # symmetric two-bump alternative
        expo_a = -100 * ((x1 - alpha) ** 2 + (x2 - alpha) ** 2)
        expo_b = -100 * ((x1 - (1 - beta)) ** 2 + (x2 - (1 - beta)) ** 2)
        return np.exp(expo_a) + np.exp(expo_b)
    return np.exp(expo)


def _rhs(u: np.ndarray, h: float, nu: float) -> np.ndarray:
    """Conservative upwind advection + central diffusion on a periodic lattice."""
    f = 0.5 * u * u
    # Godunov-style upwind flux for the convex flux u^2/2 at each interface.
    ul, ur = u, np.roll(u, -1, axis=0)
    fx = np.maximum(np.where(ul > 0, f, 0.0), np.where(ur < 0, 0.5 * ur * ur, 0.0))
    dfx = (fx - np.roll(fx, 1, axis=0)) / h
    ul, ur = u, np.roll(u, -1, axis=1)
    fy = np.maximum(np.where(ul > 0, 0.5 * ul * ul, 0.0),
                    np.where(ur < 0, 0.5 * ur * ur, 0.0))
    dfy = (fy - np.roll(fy, 1, axis=1)) / h
    lap = (np.roll(u, 1, 0) + np.roll(u, -1, 0) + np.roll(u, 1, 1) + np.roll(u, -1, 1)
           - 4 * u) / h**2
    return -dfx - dfy + nu * lap


def _integrate(u0: np.ndarray, config: BurgersConfig) -> list[np.ndarray]:
    """RK4 time integration storing one frame per unit time."""
    n = config.solve_cells
    h = 1.0 / n
    u = u0.copy()
    frames = [u.copy()]
    for _ in range(config.steps):
        t_local = 0.0
        while t_local < 1.0 - 1e-12:
            umax = max(float(np.abs(u).max()), 1e-9)
            dt = config.cfl * min(h / umax, h * h / (4 * config.nu))
            dt = min(dt, 1.0 - t_local)
            k1 = _rhs(u, h, config.nu)
            k2 = _rhs(u + 0.5 * dt * k1, h, config.nu)
            k3 = _rhs(u + 0.5 * dt * k2, h, config.nu)
            k4 = _rhs(u + dt * k3, h, config.nu)
            u = u + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            if not np.all(np.isfinite(u)) or np.abs(u).max() > 1e3:
                raise RuntimeError("time integration went unstable (CFL violation?)")
            t_local += dt
        frames.append(u.copy())
    return frames


def _to_field(u_cells: np.ndarray, stride: int) -> ScalarField2D:
    """Strided subsample of a periodic cell lattice to a node grid with the
    duplicated edge node restored."""
    sub = u_cells[::stride, ::stride]
    n = sub.shape[0]
    out = np.empty((n + 1, n + 1))
    out[:n, :n] = sub
    out[n, :n] = sub[0, :]
    out[:n, n] = sub[:, 0]
    out[n, n] = sub[0, 0]
    return ScalarField2D(StructuredGrid(n + 1, n + 1), out)


def downsample(fld: ScalarField2D, factor: int) -> ScalarField2D:
    """Node-aligned strided subsampling; (nx-1) must be divisible by factor."""
    nx, ny = fld.grid.nx, fld.grid.ny
    if (nx - 1) % factor or (ny - 1) % factor:
        raise ValueError(f"dims-1 ({nx - 1}, {ny - 1}) not divisible by {factor}")
    vals = fld.values[::factor, ::factor]
    return ScalarField2D(StructuredGrid(vals.shape[0], vals.shape[1], fld.grid.domain), vals)


def gen_burgers(config: BurgersConfig) -> Dataset:
    """Generate trajectories and split them 80/10/10 by trajectory index."""
    rng = np.random.default_rng(config.seed)
    stride = config.solve_cells // config.target_cells
    trajectories = []
    for _ in range(config.n_traj):
        a, b = rng.random(), rng.random()
        u0 = initial_condition(config.solve_cells, a, b, config.ic_variant)
        frames = _integrate(u0, config)
        trajectories.append([_to_field(f, stride) for f in frames])
    n = config.n_traj
    n_train = max(1, int(round(0.8 * n)))
    n_valid = max(0, min(n - n_train, int(round(0.1 * n))))
    splits = {
        "train": list(range(n_train)),
        "valid": list(range(n_train, n_train + n_valid)),
        "test": list(range(n_train + n_valid, n)),
    }
    if not splits["test"] and n > 1:
        splits["test"] = [n - 1]
    return Dataset(config, trajectories, splits)


def save_dataset(path, ds: Dataset) -> None:
    """One MMF1 file per trajectory (frames stacked), plus a manifest."""
    import json

    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for i, traj in enumerate(ds.trajectories):
        stack = np.stack([f.values for f in traj])
        mmf.save_array(root / f"traj_{i:04d}.mmf", stack)
    manifest = {
        "config": {k: getattr(ds.config, k) for k in ds.config.__dataclass_fields__},
        "splits": ds.splits,
        "n_traj": len(ds.trajectories),
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_dataset(path) -> Dataset:
    import json

    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    config = BurgersConfig(**manifest["config"])
    trajectories = []
    for i in range(manifest["n_traj"]):
        stack = mmf.load_array(root / f"traj_{i:04d}.mmf")
        grid = StructuredGrid(stack.shape[1], stack.shape[2])
        trajectories.append([ScalarField2D(grid, fr) for fr in stack])
    return Dataset(config, trajectories, manifest["splits"])


def dataset_digest(path) -> str:
    """SHA-256 over all trajectory files, for determinism checks."""
    h = hashlib.sha256()
    for p in sorted(Path(path).glob("traj_*.mmf")):
        h.update(p.read_bytes())
    return h.hexdigest()
