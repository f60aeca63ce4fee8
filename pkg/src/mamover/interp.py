"""Mesh-to-mesh value transfer: global soft nearest-neighbor extrapolation,
learnable k-neighbor interpolation weights (one net per transfer
direction), a residual cut network, and round-trip pretraining."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn
from scipy.special import softmax

from . import mmf
from .geom import MovedMesh, ScalarField2D, knn
from .nnet import DenseNet, load_tensors_into, module_tensors


def soft_knn_extrapolate(points: np.ndarray, values: np.ndarray,
                         query: np.ndarray, C: float | None = None) -> np.ndarray:
    """Softmax(-C * distance) weighted sum over ALL points.

    Weights are positive and sum to one, so constants are reproduced
    exactly.  C defaults to floor(sqrt(N)).
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ValueError("empty point set")
    vals = np.asarray(values, dtype=float)
    if C is None:
        C = float(np.floor(np.sqrt(pts.shape[0])))
    q = np.atleast_2d(np.asarray(query, dtype=float))
    d = np.sqrt(np.sum((q[:, None, :] - pts[None, :, :]) ** 2, axis=-1))
    w = softmax(-C * d, axis=1)
    out = w @ vals
    return out[0] if np.asarray(query).ndim == 1 else out


class ItpNet(nn.Module):
    """Maps [query; k neighbor offsets] to k interpolation weights.

    Inputs are 2(k+1) coordinates with neighbors translated to the query's
    frame.  The head is initialized to emit a one-hot on the nearest
    neighbor, so an untrained net already performs nearest-neighbor
    interpolation.  Weights are unnormalized unless `normalize` is set.
    """

    def __init__(self, k: int = 30, widths: tuple[int, int] = (128, 64),
                 seed: int = 0, normalize: bool = False):
        super().__init__()
        self.k = k
        self.normalize = normalize
        self.net = DenseNet([2 * (k + 1), *widths, k], seed=seed, zero_init_last=True)
        with torch.no_grad():
            self.net.layers[-1].bias[0] = 1.0

    def forward(self, query: torch.Tensor, neighbors: torch.Tensor) -> torch.Tensor:
        """query (Q, 2), neighbors (Q, k, 2) sorted by distance -> (Q, k)."""
        rel = neighbors - query[:, None, :]
        inp = torch.cat([query, rel.reshape(query.shape[0], -1)], dim=1)
        w = self.net(inp)
        if self.normalize:
            w = torch.softmax(w, dim=1)
        return w


def interp_apply(itp: ItpNet, source_points: np.ndarray,
                 source_values, query: np.ndarray,
                 neighbor_idx: np.ndarray | None = None) -> torch.Tensor:
    """Weighted k-nearest-neighbor transfer of nodal values to query points."""
    src = np.asarray(source_points, dtype=float)
    if src.shape[0] < itp.k:
        raise ValueError(f"need at least k={itp.k} source points")
    q = np.atleast_2d(np.asarray(query, dtype=float))
    if neighbor_idx is None:
        neighbor_idx, _ = knn(src, q, itp.k)
    vals = source_values if torch.is_tensor(source_values) \
        else torch.as_tensor(np.asarray(source_values, dtype=float))
    nb = torch.as_tensor(src[neighbor_idx])
    w = itp(torch.as_tensor(q), nb)
    return (w * vals[torch.as_tensor(neighbor_idx)]).sum(dim=1)


class ResidualCutNet(nn.Module):
    """Dense map from the flattened original-grid state to itself."""

    def __init__(self, n_nodes: int, hidden: tuple[int, int] = (256, 256), seed: int = 0):
        super().__init__()
        self.n_nodes = n_nodes
        self.net = DenseNet([n_nodes, *hidden, n_nodes], seed=seed, zero_init_last=True)

    def forward(self, flat_state: torch.Tensor) -> torch.Tensor:
        return self.net(flat_state)


@dataclass
class InterpFramework:
    """Itp1 (original -> moving), Itp2 (moving -> original), residual cut."""

    itp1: ItpNet
    itp2: ItpNet
    residual: ResidualCutNet

    def __post_init__(self):
        if self.itp1.k != self.itp2.k:
            raise ValueError("itp1 and itp2 must share k")

    @property
    def k(self) -> int:
        return self.itp1.k

    @classmethod
    def build(cls, n_nodes: int, k: int = 30, seed: int = 0) -> "InterpFramework":
        return cls(ItpNet(k, seed=seed), ItpNet(k, seed=seed + 1),
                   ResidualCutNet(n_nodes, seed=seed + 2))

    def parameters(self):
        yield from self.itp1.parameters()
        yield from self.itp2.parameters()
        yield from self.residual.parameters()

    def modules(self):
        return [self.itp1, self.itp2, self.residual]


def framework_roundtrip(fw: InterpFramework, mesh: MovedMesh,
                        state: ScalarField2D,
                        values: torch.Tensor | None = None) -> torch.Tensor:
    """Original -> moving -> original transfer plus the residual path.

    Returns the flattened reconstructed state as a torch tensor; pass
    `values` to roundtrip a tensor that stays on the autograd tape.
    """
    grid = state.grid
    orig = grid.nodes().reshape(-1, 2)
    moving = mesh.coords.reshape(-1, 2)
    vals = values if values is not None \
        else torch.as_tensor(state.values.reshape(-1))
    on_moving = interp_apply(fw.itp1, orig, vals, moving)
    back = interp_apply(fw.itp2, moving, on_moving, orig)
    return back + fw.residual(vals)


@dataclass
class PretrainHistory:
    losses: list[float] = field(default_factory=list)

    @property
    def initial(self) -> float:
        return self.losses[0]

    @property
    def final(self) -> float:
        return self.losses[-1]


def pretrain_interp(fw: InterpFramework,
                    dataset: Sequence[ScalarField2D],
                    mesh_for_state: Callable[[int, ScalarField2D], MovedMesh],
                    epochs: int = 50, lr: float = 1e-3,
                    seed: int = 0) -> PretrainHistory:
    """Minimize the round-trip MSE with a frozen mesh mover (no evolution).

    `mesh_for_state(i, u)` supplies the moving mesh for dataset entry i;
    meshes and neighbor graphs are cached across epochs.
    """
    if not dataset:
        raise ValueError("empty dataset")
    torch.manual_seed(seed)
    grid = dataset[0].grid
    orig = grid.nodes().reshape(-1, 2)
    cached = []
    for i, u in enumerate(dataset):
        mesh = mesh_for_state(i, u)
        moving = mesh.coords.reshape(-1, 2)
        nb1, _ = knn(orig, moving, fw.k)
        nb2, _ = knn(moving, orig, fw.k)
        cached.append((u, mesh, moving, nb1, nb2))

    opt = torch.optim.Adam(fw.parameters(), lr=lr)
    history = PretrainHistory()
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        total = 0.0
        for k in rng.permutation(len(cached)):
            u, mesh, moving, nb1, nb2 = cached[k]
            vals = torch.as_tensor(u.values.reshape(-1))
            on_moving = interp_apply(fw.itp1, orig, vals, moving, neighbor_idx=nb1)
            back = interp_apply(fw.itp2, moving, on_moving, orig, neighbor_idx=nb2)
            recon = back + fw.residual(vals)
            loss = ((recon - vals) ** 2).mean()
            if not torch.isfinite(loss):
                raise RuntimeError("interpolation pretraining diverged")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach())
        history.losses.append(total / len(cached))
    return history


def save_framework(path, fw: InterpFramework) -> None:
    tensors = []
    for mod in fw.modules():
        tensors.extend(module_tensors(mod))
    manifest = {"kind": "interp", "k": fw.k, "n_nodes": fw.residual.n_nodes,
                "subnets": ["itp1", "itp2", "residual"]}
    mmf.save_checkpoint(path, manifest, tensors)


def load_framework(path) -> InterpFramework:
    manifest, tensors = mmf.load_checkpoint(path)
    if manifest.get("kind") != "interp":
        raise ValueError("not an interpolation checkpoint")
    fw = InterpFramework.build(manifest["n_nodes"], k=manifest["k"])
    counts = [len(list(m.parameters())) for m in fw.modules()]
    off = 0
    for mod, cnt in zip(fw.modules(), counts):
        load_tensors_into(mod, tensors[off:off + cnt])
        off += cnt
    return fw
