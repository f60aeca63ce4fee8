"""Small dense networks with exact parameter gradients and exact first and
second coordinate derivatives, plus the two-stage optimizer (adaptive
moments, then a curvature method restricted to one designated layer).

Everything runs in float64 on CPU so derivative checks against central
finite differences hold to tight tolerances.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from . import mmf

torch.set_default_dtype(torch.float64)


class DenseNet(nn.Module):
    """Affine layers with tanh on hidden layers and identity output."""

    def __init__(self, widths: Sequence[int], seed: int | None = None,
                 zero_init_last: bool = False):
        super().__init__()
        if len(widths) < 2:
            raise ValueError("need at least input and output widths")
        gen = torch.Generator()
        if seed is not None:
            gen.manual_seed(seed)
        layers = []
        for w_in, w_out in zip(widths[:-1], widths[1:]):
            lin = nn.Linear(w_in, w_out)
            bound = 1.0 / np.sqrt(w_in)
            with torch.no_grad():
                lin.weight.uniform_(-bound, bound, generator=gen)
                lin.bias.uniform_(-bound, bound, generator=gen)
            layers.append(lin)
        self.layers = nn.ModuleList(layers)
        self.widths = list(widths)
        if zero_init_last:
            with torch.no_grad():
                self.layers[-1].weight.zero_()
                self.layers[-1].bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for lin in self.layers[:-1]:
            x = torch.tanh(lin(x))
        return self.layers[-1](x)


def forward(net: DenseNet, x: np.ndarray | torch.Tensor) -> np.ndarray:
    """Evaluate the net on a single input vector or a batch."""
    with torch.no_grad():
        t = torch.as_tensor(x, dtype=torch.float64)
        return net(t).numpy()


def param_grads(net: DenseNet, x, upstream) -> list[np.ndarray]:
    """Exact gradients of upstream . y w.r.t. every parameter tensor."""
    t = torch.as_tensor(x, dtype=torch.float64)
    up = torch.as_tensor(upstream, dtype=torch.float64)
    y = net(t)
    if y.shape != up.shape:
        raise ValueError(f"upstream shape {tuple(up.shape)} != output {tuple(y.shape)}")
    params = list(net.parameters())
    grads = torch.autograd.grad((y * up).sum(), params, allow_unused=True)
    return [torch.zeros_like(p).numpy() if g is None else g.detach().numpy()
            for p, g in zip(params, grads)]


def _coord_fn(net: DenseNet, x: torch.Tensor, coord_slots: Sequence[int]):
    slots = torch.as_tensor(list(coord_slots), dtype=torch.long)

    def fn(c: torch.Tensor) -> torch.Tensor:
        full = x.index_copy(0, slots, c)
        return net(full)

    return fn, x[slots].clone()


def input_jacobian(net: DenseNet, x, coord_slots: Sequence[int]) -> np.ndarray:
    """d(output)/d(x[coord_slots]), shape (out_dim, len(coord_slots))."""
    t = torch.as_tensor(x, dtype=torch.float64)
    fn, c = _coord_fn(net, t, coord_slots)
    jac = torch.func.jacfwd(fn)(c)
    return jac.detach().numpy()


def input_hessian(net: DenseNet, x, coord_slots: Sequence[int]) -> np.ndarray:
    """Exact symmetric Hessian of a scalar output w.r.t. coordinate inputs."""
    t = torch.as_tensor(x, dtype=torch.float64)
    fn, c = _coord_fn(net, t, coord_slots)
    probe = fn(c)
    if probe.numel() != 1:
        raise ValueError("input_hessian requires a scalar output")
    hess = torch.func.jacfwd(torch.func.jacfwd(lambda z: fn(z).squeeze()))(c)
    h = hess.detach().numpy()
    return 0.5 * (h + h.T)


@dataclass
class OptimState:
    """Adaptive-moment accumulators, shapes mirroring the parameter list."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray]) -> "OptimState":
        return cls([np.zeros_like(p) for p in params],
                   [np.zeros_like(p) for p in params])


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: OptimState,
    lr: float = 1e-3,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[list[np.ndarray], OptimState]:
    """One bias-corrected adaptive-moment update; pure (returns new values)."""
    b1, b2 = betas
    step = state.step + 1
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**step)
        v_hat = v / (1 - b2**step)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, OptimState(new_m, new_v, step)


@dataclass
class RefineResult:
    loss_before: float
    loss_after: float
    iterations: int
    success: bool = True


def quasi_newton_refine(
    net: nn.Module,
    designated_layer: nn.Linear,
    loss_fn: Callable[[], torch.Tensor],
    max_iters: int = 100,
    grad_tol: float = 1e-9,
) -> RefineResult:
    """BFGS on the designated layer's parameters against a frozen objective.

    `loss_fn` must be deterministic (fixed evaluation batch).  The layer is
    updated in place with the best iterate seen; the returned loss never
    exceeds the input loss.
    """
    from scipy.optimize import minimize

    params = [designated_layer.weight, designated_layer.bias]
    shapes = [p.shape for p in params]
    sizes = [p.numel() for p in params]

    def set_flat(vec: np.ndarray) -> None:
        off = 0
        with torch.no_grad():
            for p, shape, size in zip(params, shapes, sizes):
                p.copy_(torch.from_numpy(vec[off:off + size].reshape(shape)))
                off += size

    def get_flat() -> np.ndarray:
        return np.concatenate([p.detach().numpy().reshape(-1) for p in params])

    # No no_grad here: loss_fn may need autograd internally (PDE residuals).
    x0 = get_flat()
    loss0 = float(loss_fn().detach())
    best = {"x": x0.copy(), "loss": loss0}

    def objective(vec):
        set_flat(vec)
        for p in params:
            p.requires_grad_(True)
        loss = loss_fn()
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        g = np.concatenate([
            (torch.zeros_like(p) if gr is None else gr).detach().numpy().reshape(-1)
            for p, gr in zip(params, grads)
        ])
        val = float(loss.detach())
        if np.isfinite(val) and val < best["loss"]:
            best["loss"] = val
            best["x"] = vec.copy()
        return val, g

    res = minimize(objective, x0, jac=True, method="BFGS",
                   options={"maxiter": max_iters, "gtol": grad_tol})
    set_flat(best["x"])
    return RefineResult(loss0, best["loss"], int(res.nit), success=best["loss"] <= loss0)


def save_densenet(path, net: DenseNet) -> None:
    tensors = []
    for lin in net.layers:
        tensors.append(lin.weight.detach().numpy())
        tensors.append(lin.bias.detach().numpy())
    manifest = {"kind": "densenet", "widths": net.widths,
                "activation": "tanh-hidden/identity-out"}
    mmf.save_checkpoint(path, manifest, tensors)


def load_densenet(path) -> DenseNet:
    manifest, tensors = mmf.load_checkpoint(path)
    if manifest.get("kind") != "densenet":
        raise ValueError("not a densenet checkpoint")
    net = DenseNet(manifest["widths"])
    load_tensors_into(net, tensors)
    return net


def load_tensors_into(module: nn.Module, tensors: list[np.ndarray]) -> None:
    params = list(module.parameters())
    if len(params) != len(tensors):
        raise ValueError(f"checkpoint has {len(tensors)} tensors, module {len(params)}")
    with torch.no_grad():
        for p, arr in zip(params, tensors):
            p.copy_(torch.from_numpy(arr.reshape(p.shape)))


def module_tensors(module: nn.Module) -> list[np.ndarray]:
    return [p.detach().numpy().copy() for p in module.parameters()]
