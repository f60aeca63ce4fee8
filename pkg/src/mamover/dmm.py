"""Data-free mesh mover: a neural operator psi(u, t, x) trained with the
Monge-Ampere physics loss and monitor-proportional collocation sampling.

The model output approximates the residual potential, so node movement is
x -> x + grad_x psi and a zero-initialized decoder head starts training at
the identity mesh (the exact solution for a uniform density).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import torch
from torch import nn

from . import mmf
from .geom import MovedMesh, ScalarField2D, StructuredGrid, bilinear_sample
from .monitor import MonitorField, monitor_from_state
from .nnet import DenseNet, RefineResult, load_tensors_into, module_tensors, quasi_newton_refine


@dataclass(frozen=True)
class DmmTrainConfig:
    beta: float = 1000.0        # weight of the boundary loss
    gamma: float = 1.0          # weight of the convexity loss
    n_interior: int = 256
    n_boundary: int = 64
    epochs: int = 100
    lr: float = 2e-3
    qn_iters: int = 60
    seed: int = 0
    monitor_c: float = 100.0
    boundary_rule: str = "periodic"
    lr_schedule: str = "cosine"  # or "constant"

    def __post_init__(self):
        if self.beta <= 0 or self.gamma <= 0:
            raise ValueError("loss weights must be positive")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")


class DmmModel(nn.Module):
    """Two encoders (state grid; time+coordinate) and a scalar decoder."""

    # Coordinates are mapped from [0,1] to [-4,4] before encoding; tanh nets
    # with unit-scale init otherwise stay in their near-linear regime and
    # cannot express localized curvature.
    COORD_SCALE = 4.0

    def __init__(self, state_shape: tuple[int, int], code_dim: int = 32,
                 coord_width: int = 64, decoder_width: int = 64, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.state_shape = tuple(state_shape)
        self.code_dim = code_dim
        self.conv = nn.Sequential(
            nn.Conv2d(1, 4, 5, stride=2, padding=2), nn.Tanh(),
            nn.Conv2d(4, 8, 5, stride=2, padding=2), nn.Tanh(),
        )
        with torch.no_grad():
            flat = self.conv(torch.zeros(1, 1, *self.state_shape)).numel()
        self.state_head = nn.Linear(flat, code_dim)
        self.encoder2 = DenseNet([3, coord_width, coord_width, code_dim], seed=seed + 1)
        self.decoder = DenseNet([2 * code_dim, decoder_width, decoder_width, 1],
                                seed=seed + 2, zero_init_last=True)

    def encode_state(self, values: torch.Tensor) -> torch.Tensor:
        # The target mesh is invariant under affine rescaling of u (the
        # monitor normalizes by the mean gradient), so standardize the state
        # before encoding; raw magnitudes otherwise collapse the code.
        v = values.reshape(1, 1, *self.state_shape)
        v = (v - v.mean()) / (v.std() + 1e-12)
        z = self.conv(v)
        return torch.tanh(self.state_head(z.reshape(1, -1))).squeeze(0)

    def psi(self, code: torch.Tensor, t: float, x: torch.Tensor) -> torch.Tensor:
        """psi at points x (P, 2) for one state code; returns (P,)."""
        s = self.COORD_SCALE
        tcol = torch.full((x.shape[0], 1), 2.0 * float(t) - 1.0, dtype=x.dtype)
        e2 = self.encoder2(torch.cat([tcol, s * (2.0 * x - 1.0)], dim=1))
        z = torch.cat([code.expand(x.shape[0], -1), e2], dim=1)
        return self.decoder(z).squeeze(-1)


class PsiDerivs(NamedTuple):
    psi: torch.Tensor     # (P,)
    grad: torch.Tensor    # (P, 2)
    hess: torch.Tensor    # (P, 2, 2)


def psi_with_derivs(model: DmmModel, code: torch.Tensor, t: float,
                    x: torch.Tensor, create_graph: bool = False) -> PsiDerivs:
    """psi plus exact first/second coordinate derivatives at each point."""
    # enable_grad so coordinate derivatives work inside no_grad eval loops
    with torch.enable_grad():
        x = x.detach().requires_grad_(True)
        psi = model.psi(code, t, x)
        (g,) = torch.autograd.grad(psi.sum(), x, create_graph=True)
        (hx,) = torch.autograd.grad(g[:, 0].sum(), x, create_graph=create_graph,
                                    retain_graph=True)
        (hy,) = torch.autograd.grad(g[:, 1].sum(), x, create_graph=create_graph)
    hess = torch.stack([hx, hy], dim=1)
    hess = 0.5 * (hess + hess.transpose(1, 2))
    if not create_graph:
        psi, g, hess = psi.detach(), g.detach(), hess.detach()
    return PsiDerivs(psi, g, hess)


def dmm_psi(model: DmmModel, state: ScalarField2D, t: float, x: np.ndarray) -> PsiDerivs:
    """Evaluate psi, grad psi and H(psi) at query points (numpy in, torch out)."""
    with torch.no_grad():
        code = model.encode_state(torch.as_tensor(state.values))
    pts = torch.as_tensor(np.atleast_2d(np.asarray(x, dtype=float)))
    return psi_with_derivs(model, code, t, pts)


def dmm_mesh(model: DmmModel, state: ScalarField2D, t: float,
             grid: StructuredGrid | None = None) -> MovedMesh:
    """Moved mesh for a state: node map x -> x + grad psi, clamped to the domain."""
    grid = grid or state.grid
    nodes = grid.nodes().reshape(-1, 2)
    d = dmm_psi(model, state, t, nodes)
    coords = nodes + d.grad.numpy()
    x0, x1, y0, y1 = grid.domain
    coords[:, 0] = np.clip(coords[:, 0], x0, x1)
    coords[:, 1] = np.clip(coords[:, 1], y0, y1)
    return MovedMesh(grid, coords.reshape(grid.nx, grid.ny, 2))


def _bilinear_torch(values: torch.Tensor, grid: StructuredGrid, pts: torch.Tensor) -> torch.Tensor:
    """Differentiable bilinear sampling of a nodal grid field (pts clamped)."""
    x0, x1, y0, y1 = grid.domain
    px = pts[:, 0].clamp(x0, x1)
    py = pts[:, 1].clamp(y0, y1)
    fx = (px - x0) / grid.hx
    fy = (py - y0) / grid.hy
    i = fx.floor().long().clamp(0, grid.nx - 2)
    j = fy.floor().long().clamp(0, grid.ny - 2)
    tx = fx - i
    ty = fy - j
    return (values[i, j] * (1 - tx) * (1 - ty)
            + values[i + 1, j] * tx * (1 - ty)
            + values[i, j + 1] * (1 - tx) * ty
            + values[i + 1, j + 1] * tx * ty)


class PhysicsLoss(NamedTuple):
    total: torch.Tensor
    equation: torch.Tensor
    bound: torch.Tensor
    convex: torch.Tensor

    def detach(self) -> tuple[float, float, float, float]:
        return tuple(float(v.detach()) for v in self)


def physics_loss(model: DmmModel, state: ScalarField2D, t: float,
                 interior_pts: np.ndarray, boundary_pts: np.ndarray,
                 mon: MonitorField, beta: float = 1000.0, gamma: float = 1.0,
                 create_graph: bool = True,
                 convex_pts: np.ndarray | None = None) -> PhysicsLoss:
    """Mean-squared Monge-Ampere residual + boundary + convexity penalties.

    The monitor must come from the same state; rho at moved points is
    bilinear-sampled (differentiably) from its nodal field.  `convex_pts`
    adds extra Hessian-penalty points; monitor-proportional batches leave
    low-density regions unwatched, so the convexity term alone is evaluated
    on this wider set as well.
    """
    if len(interior_pts) == 0 or len(boundary_pts) == 0:
        raise ValueError("empty collocation batch")
    grid = mon.rho.grid
    code = model.encode_state(torch.as_tensor(state.values))
    xi = torch.as_tensor(np.asarray(interior_pts, dtype=float))
    d = psi_with_derivs(model, code, t, xi, create_graph=create_graph)
    moved = xi + d.grad
    rho = _bilinear_torch(torch.as_tensor(mon.rho.values), grid, moved)
    hxx, hyy = d.hess[:, 0, 0], d.hess[:, 1, 1]
    det = (1 + hxx) * (1 + hyy) - d.hess[:, 0, 1] ** 2
    # Residual scaled by sigma so states of any monitor mass weigh equally
    # and the beta/gamma balance is meaningful across a trajectory.
    l_eq = (((grid.area * rho * det - mon.sigma) / mon.sigma) ** 2).mean()
    xb = torch.as_tensor(np.asarray(boundary_pts, dtype=float))
    db = psi_with_derivs(model, code, t, xb, create_graph=create_graph)
    l_bound = (db.grad ** 2).sum(dim=1).mean()
    if convex_pts is not None and len(convex_pts):
        xc = torch.as_tensor(np.asarray(convex_pts, dtype=float))
        dc = psi_with_derivs(model, code, t, xc, create_graph=create_graph)
        hxx = torch.cat([hxx, dc.hess[:, 0, 0]])
        hyy = torch.cat([hyy, dc.hess[:, 1, 1]])
    zero = torch.zeros(())
    l_convex = (torch.minimum(zero, 1 + hxx) ** 2
                + torch.minimum(zero, 1 + hyy) ** 2).mean()
    total = l_eq + beta * l_bound + gamma * l_convex
    return PhysicsLoss(total, l_eq, l_bound, l_convex)


def sample_collocation(mon: MonitorField, n_interior: int, n_boundary: int,
                       seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Interior points with cell probability proportional to the monitor mass
    (centroid quadrature) and uniform jitter inside the chosen cell;
    boundary points uniform on the domain edge.  Deterministic per seed."""
    if n_interior < 1 or n_boundary < 1:
        raise ValueError("need at least one point per batch")
    rng = np.random.default_rng(seed)
    grid = mon.rho.grid
    nodes = grid.nodes()
    centroids = 0.25 * (nodes[:-1, :-1] + nodes[1:, :-1] + nodes[1:, 1:] + nodes[:-1, 1:])
    w = bilinear_sample(mon.rho, centroids.reshape(-1, 2))
    w = w / w.sum()
    cells = rng.choice(w.size, size=n_interior, p=w)
    ci, cj = np.unravel_index(cells, (grid.nx - 1, grid.ny - 1))
    jit = rng.random((n_interior, 2))
    x0, x1, y0, y1 = grid.domain
    interior = np.stack([
        x0 + (ci + jit[:, 0]) * grid.hx,
        y0 + (cj + jit[:, 1]) * grid.hy,
    ], axis=1)
    # Boundary: walk the perimeter by arc length.
    per_x, per_y = x1 - x0, y1 - y0
    perim = 2 * (per_x + per_y)
    s = rng.random(n_boundary) * perim
    bx = np.empty(n_boundary)
    by = np.empty(n_boundary)
    for idx, sv in enumerate(s):
        if sv < per_x:
            bx[idx], by[idx] = x0 + sv, y0
        elif sv < per_x + per_y:
            bx[idx], by[idx] = x1, y0 + (sv - per_x)
        elif sv < 2 * per_x + per_y:
            bx[idx], by[idx] = x1 - (sv - per_x - per_y), y1
        else:
            bx[idx], by[idx] = x0, y1 - (sv - 2 * per_x - per_y)
    return interior, np.stack([bx, by], axis=1)


def _uniform_interior(grid: StructuredGrid, n: int, seed: int) -> np.ndarray:
    """Uniform random domain points for the wide convexity-penalty set."""
    rng = np.random.default_rng(seed)
    x0, x1, y0, y1 = grid.domain
    pts = rng.random((n, 2))
    pts[:, 0] = x0 + pts[:, 0] * (x1 - x0)
    pts[:, 1] = y0 + pts[:, 1] * (y1 - y0)
    return pts


@dataclass
class TrainHistory:
    epochs: list[tuple[float, float, float, float]] = field(default_factory=list)
    stage1_final: float = float("nan")
    stage2_final: float = float("nan")
    refine: RefineResult | None = None


def train_dmm(dataset: Sequence[tuple[ScalarField2D, float]],
              config: DmmTrainConfig = DmmTrainConfig(),
              model: DmmModel | None = None) -> tuple[DmmModel, TrainHistory]:
    """Two-stage physics-loss training over (state, time) pairs.

    Stage 1 runs adaptive-moment epochs with fresh monitor-proportional
    collocation per step; stage 2 refines only the decoder's last layer
    with BFGS against a frozen batch.  Times are normalized to [0, 1].
    """
    if not dataset:
        raise ValueError("empty dataset")
    torch.manual_seed(config.seed)
    grid = dataset[0][0].grid
    model = model or DmmModel((grid.nx, grid.ny), seed=config.seed)
    times = [t for _, t in dataset]
    t_lo, t_hi = min(times), max(times)
    t_span = (t_hi - t_lo) or 1.0
    entries = []
    for state, t in dataset:
        mon = monitor_from_state(state, config.monitor_c, config.boundary_rule)
        entries.append((state, (t - t_lo) / t_span, mon))

    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    sched = None
    if config.lr_schedule == "cosine":
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, config.epochs)
    rng = np.random.default_rng(config.seed)
    history = TrainHistory()
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(entries))
        sums = np.zeros(4)
        for k in order:
            state, tn, mon = entries[k]
            pts_i, pts_b = sample_collocation(
                mon, config.n_interior, config.n_boundary,
                seed=config.seed * 1_000_003 + step)
            pts_c = _uniform_interior(grid, config.n_interior,
                                      config.seed * 1_000_003 + step + 500_009)
            loss = physics_loss(model, state, tn, pts_i, pts_b, mon,
                                config.beta, config.gamma, convex_pts=pts_c)
            if not torch.isfinite(loss.total):
                raise RuntimeError(
                    f"physics loss diverged at epoch {epoch}, state {k}")
            opt.zero_grad()
            loss.total.backward()
            opt.step()
            sums += np.array(loss.detach())
            step += 1
        if sched is not None:
            sched.step()
        history.epochs.append(tuple(sums / len(entries)))
    history.stage1_final = history.epochs[-1][0] if history.epochs else float("nan")

    # Stage 2: frozen batch spanning every state, BFGS on the decoder head.
    frozen = []
    for k, (state, tn, mon) in enumerate(entries):
        pts = sample_collocation(mon, config.n_interior, config.n_boundary,
                                 seed=config.seed * 7_000_003 + k)
        pts_c = _uniform_interior(grid, config.n_interior,
                                  config.seed * 7_000_003 + k + 500_009)
        frozen.append((state, tn, mon, pts, pts_c))

    def frozen_loss() -> torch.Tensor:
        acc = torch.zeros(())
        for state, tn, mon, (pts_i, pts_b), pts_c in frozen:
            acc = acc + physics_loss(model, state, tn, pts_i, pts_b, mon,
                                     config.beta, config.gamma,
                                     convex_pts=pts_c).total
        return acc / len(frozen)

    history.refine = quasi_newton_refine(
        model, model.decoder.layers[-1], frozen_loss,
        max_iters=config.qn_iters)
    history.stage2_final = history.refine.loss_after
    return model, history


def resolution_transfer(model: DmmModel, state: ScalarField2D, t: float,
                        target_grid: StructuredGrid) -> MovedMesh:
    """Mesh at an arbitrary output resolution from a state at any resolution.

    The state is bilinearly resampled to the encoder's training resolution
    first; the coordinate input is continuous, so any target grid works.
    """
    nx, ny = model.state_shape
    train_grid = StructuredGrid(nx, ny, state.grid.domain)
    resampled = ScalarField2D(
        train_grid,
        bilinear_sample(state, train_grid.nodes().reshape(-1, 2)).reshape(nx, ny))
    return dmm_mesh(model, resampled, t, target_grid)


def save_dmm(path, model: DmmModel) -> None:
    manifest = {"kind": "dmm", "state_shape": list(model.state_shape),
                "code_dim": model.code_dim}
    mmf.save_checkpoint(path, manifest, module_tensors(model))


def load_dmm(path) -> DmmModel:
    manifest, tensors = mmf.load_checkpoint(path)
    if manifest.get("kind") != "dmm":
        raise ValueError("not a DMM checkpoint")
    model = DmmModel(tuple(manifest["state_shape"]), code_dim=manifest["code_dim"])
    load_tensors_into(model, tensors)
    return model
