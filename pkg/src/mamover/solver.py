"""Two-branch autoregressive moving-mesh PDE solver.

Prediction = delta from the original-mesh evolution net, plus the moving
branch: interpolate the state onto the moved mesh, evolve it there,
interpolate back and add the residual-cut output.  All evolution nets use
the delta convention (zero-initialized heads reproduce the input state).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .geom import MovedMesh, ScalarField2D, StructuredGrid, knn
from .interp import InterpFramework, interp_apply
from .nnet import DenseNet


class MessagePassingNet(nn.Module):
    """Encoder, L edge/node-update message-passing layers, per-node decoder.

    Edge update sees (n_i, n_j, u_i - u_j, x_i - x_j); node update sees
    (n_i, sum_j m_ij) aggregated over the node's k nearest neighbors.
    """

    def __init__(self, hidden: int = 32, layers: int = 3, k: int = 35, seed: int = 0):
        super().__init__()
        if layers < 1:
            raise ValueError("need at least one message-passing layer")
        self.hidden = hidden
        self.k = k
        self.encoder = DenseNet([4, hidden, hidden], seed=seed)
        self.edge_nets = nn.ModuleList(
            DenseNet([2 * hidden + 3, hidden, hidden], seed=seed + 10 + i)
            for i in range(layers))
        self.node_nets = nn.ModuleList(
            DenseNet([2 * hidden, hidden, hidden], seed=seed + 50 + i)
            for i in range(layers))
        self.decoder = DenseNet([hidden, hidden, 1], seed=seed + 90, zero_init_last=True)


def mp_forward(net: MessagePassingNet, coords: torch.Tensor, u: torch.Tensor,
               t: float, neighbor_idx: np.ndarray) -> torch.Tensor:
    """Per-node state delta; `neighbor_idx` is (N, k) from geom.knn."""
    n_nodes = coords.shape[0]
    if n_nodes < net.k + 1:
        raise ValueError(f"need more than k={net.k} nodes, got {n_nodes}")
    idx = torch.as_tensor(neighbor_idx)
    tcol = torch.full((n_nodes, 1), float(t), dtype=coords.dtype)
    n = net.encoder(torch.cat([u[:, None], coords, tcol], dim=1))
    for eu, nu in zip(net.edge_nets, net.node_nets):
        ni = n[:, None, :].expand(-1, idx.shape[1], -1)
        nj = n[idx]
        du = (u[:, None] - u[idx])[..., None]
        dx = coords[:, None, :] - coords[idx]
        msgs = eu(torch.cat([ni, nj, du, dx], dim=-1))
        n = nu(torch.cat([n, msgs.sum(dim=1)], dim=1))
    return net.decoder(n).squeeze(-1)


VARIANT_TAGS = ("full", "no_g1", "g1_plus_g2", "no_residual", "uniform_mesh", "blend")


@dataclass(frozen=True)
class VariantSpec:
    tag: str = "full"
    lam: float = 1.0  # blend weight toward the trained mesh mover

    def __post_init__(self):
        if self.tag not in VARIANT_TAGS:
            raise ValueError(f"unknown variant {self.tag!r}")
        if not (0.0 <= self.lam <= 1.0):
            raise ValueError("blend weight must lie in [0, 1]")


@dataclass
class MmPdeModel:
    """Evolution nets on the original and moved meshes plus the
    interpolation framework and a frozen mesh mover."""

    grid: StructuredGrid
    g1: MessagePassingNet
    g2: MessagePassingNet
    interp: InterpFramework
    mesh_fn: Callable[[ScalarField2D, float], MovedMesh] | None
    variant: VariantSpec = VariantSpec()

    @classmethod
    def build(cls, grid: StructuredGrid,
              mesh_fn: Callable[[ScalarField2D, float], MovedMesh] | None,
              hidden: int = 32, layers: int = 3, k_mp: int = 35, k_itp: int = 30,
              seed: int = 0, variant: VariantSpec = VariantSpec()) -> "MmPdeModel":
        g1 = MessagePassingNet(hidden, layers, k_mp, seed=seed)
        g2 = MessagePassingNet(hidden, layers, k_mp, seed=seed + 1000)
        fw = InterpFramework.build(grid.nx * grid.ny, k=k_itp, seed=seed + 2000)
        return cls(grid, g1, g2, fw, mesh_fn, variant)

    def trainable_parameters(self, freeze_interp: bool = False):
        yield from self.g1.parameters()
        yield from self.g2.parameters()
        if not freeze_interp:
            yield from self.interp.parameters()

    def moved_mesh(self, state: ScalarField2D, t: float) -> MovedMesh:
        """Mesh used by the moving branch, honoring the variant."""
        tag, lam = self.variant.tag, self.variant.lam
        if tag == "uniform_mesh" or (tag == "blend" and lam == 0.0) or self.mesh_fn is None:
            return MovedMesh.identity(self.grid)
        mesh = self.mesh_fn(state, t)
        if tag == "blend" and lam < 1.0:
            ident = self.grid.nodes()
            return MovedMesh(self.grid, lam * mesh.coords + (1 - lam) * ident)
        return mesh


@dataclass
class StepCache:
    """Precomputed geometry for one (state, time) input."""

    moving: np.ndarray            # moved node coords (N, 2)
    nb_orig: np.ndarray           # (N, k_mp) neighbors on the original mesh
    nb_moving: np.ndarray         # (N, k_mp) neighbors on the moved mesh
    nb_itp1: np.ndarray           # (N, k_itp) original-mesh donors per moved node
    nb_itp2: np.ndarray           # (N, k_itp) moved-mesh donors per original node


def build_cache(model: MmPdeModel, state: ScalarField2D, t: float) -> StepCache:
    orig = model.grid.nodes().reshape(-1, 2)
    moving = model.moved_mesh(state, t).coords.reshape(-1, 2)
    k_mp, k_itp = model.g1.k, model.interp.k
    nb_orig, _ = knn(orig, orig, k_mp + 1)
    nb_moving, _ = knn(moving, moving, k_mp + 1)
    nb1, _ = knn(orig, moving, k_itp)
    nb2, _ = knn(moving, orig, k_itp)
    return StepCache(moving, nb_orig[:, 1:], nb_moving[:, 1:], nb1, nb2)


def mmpde_forward(model: MmPdeModel, u_t: ScalarField2D, t: float,
                  values: torch.Tensor | None = None,
                  cache: StepCache | None = None) -> torch.Tensor:
    """One autoregressive step; returns the flattened next-state tensor."""
    grid = model.grid
    orig = torch.as_tensor(grid.nodes().reshape(-1, 2))
    u = values if values is not None else torch.as_tensor(u_t.values.reshape(-1))
    cache = cache or build_cache(model, u_t, t)
    tag = model.variant.tag

    d1 = 0.0
    if tag != "no_g1":
        d1 = mp_forward(model.g1, orig, u, t, cache.nb_orig)

    if tag == "g1_plus_g2":
        d2 = mp_forward(model.g2, orig, u, t, cache.nb_orig)
        return u + d1 + d2

    moving = torch.as_tensor(cache.moving)
    on_moving = interp_apply(model.interp.itp1, grid.nodes().reshape(-1, 2), u,
                             cache.moving, neighbor_idx=cache.nb_itp1)
    d2 = mp_forward(model.g2, moving, on_moving, t, cache.nb_moving)
    back = interp_apply(model.interp.itp2, cache.moving, on_moving + d2,
                        grid.nodes().reshape(-1, 2), neighbor_idx=cache.nb_itp2)
    out = back
    if tag != "no_residual":
        out = out + model.interp.residual(u)
    if tag != "no_g1":
        out = out + d1
    return out


def rollout(model: MmPdeModel, u0: ScalarField2D, steps: int,
            t0: float = 0.0, dt: float = 1.0) -> list[ScalarField2D]:
    """Iterated one-step prediction; returns [u0, u1, ..., u_steps]."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    traj = [u0]
    u = u0
    with torch.no_grad():
        for s in range(steps):
            pred = mmpde_forward(model, u, t0 + s * dt).numpy()
            if not np.all(np.isfinite(pred)):
                raise RuntimeError(f"rollout produced non-finite values at step {s + 1}")
            u = ScalarField2D(u0.grid, pred.reshape(u0.grid.nx, u0.grid.ny))
            traj.append(u)
    return traj


def mse(pred_traj: Sequence[ScalarField2D], true_traj: Sequence[ScalarField2D]) -> float:
    """Mean squared error over all nodes and steps."""
    if len(pred_traj) != len(true_traj):
        raise ValueError("trajectory lengths differ")
    acc = 0.0
    count = 0
    for p, q in zip(pred_traj, true_traj):
        if p.values.shape != q.values.shape:
            raise ValueError("field shapes differ")
        acc += float(np.sum((p.values - q.values) ** 2))
        count += p.values.size
    return acc / count


def rmse_relative(pred_traj: Sequence[ScalarField2D],
                  true_traj: Sequence[ScalarField2D]) -> float:
    """Relative MSE: sum (pred-true)^2 / sum true^2."""
    num = 0.0
    den = 0.0
    for p, q in zip(pred_traj, true_traj):
        num += float(np.sum((p.values - q.values) ** 2))
        den += float(np.sum(q.values ** 2))
    return num / den if den > 0 else float("inf")


def build_variant(spec: VariantSpec, base: MmPdeModel) -> MmPdeModel:
    """Same parts, different wiring (Appendix-style ablation variants)."""
    return replace(base, variant=spec)


@dataclass
class SolverHistory:
    losses: list[float] = field(default_factory=list)


def train_solver(pairs: Sequence[tuple[ScalarField2D, float, np.ndarray]],
                 model: MmPdeModel, epochs: int = 40, lr: float = 1e-3,
                 seed: int = 0, freeze_interp: bool = False) -> SolverHistory:
    """One-step MSE training; `pairs` are (state, time, next-state values).

    The mesh mover is frozen; meshes and neighbor graphs are cached per
    pair.  Raises on divergence.
    """
    if not pairs:
        raise ValueError("no training pairs")
    torch.manual_seed(seed)
    cached = [(u, t, torch.as_tensor(np.asarray(target, dtype=float).reshape(-1)),
               build_cache(model, u, t)) for u, t, target in pairs]
    opt = torch.optim.Adam(model.trainable_parameters(freeze_interp), lr=lr)
    rng = np.random.default_rng(seed)
    history = SolverHistory()
    for epoch in range(epochs):
        total = 0.0
        for k in rng.permutation(len(cached)):
            u, t, target, cache = cached[k]
            pred = mmpde_forward(model, u, t, cache=cache)
            loss = ((pred - target) ** 2).mean()
            if not torch.isfinite(loss):
                raise RuntimeError(f"solver training diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach())
        history.losses.append(total / len(cached))
    return history
