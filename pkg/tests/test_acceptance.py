"""Acceptance suite: twelve numbered criteria, one [PASS]/[FAIL] line each.

The heavy fixtures (datasets, trained mesh movers, trained solvers) are
module-scoped and shared across criteria; the whole file trains real models
and takes tens of minutes.  Every check compares against an independent
reference: the classical Monge-Ampere solver, finite differences, closed
forms, or byte-level artifact comparison.
"""

from __future__ import annotations

import copy
import subprocess
import sys
import time

import numpy as np
import pytest
import torch

import conftest

from mamover import burgers, dmm, solver
from mamover.burgers import BurgersConfig, gen_burgers
from mamover.dmm import (DmmTrainConfig, dmm_mesh, physics_loss,
                         sample_collocation, train_dmm, _uniform_interior)
from mamover.geom import (MovedMesh, ScalarField2D, StructuredGrid,
                          cell_volumes, knn)
from mamover.interp import InterpFramework, pretrain_interp, soft_knn_extrapolate
from mamover.ma_oracle import (MaSolveConfig, error_scaling_study, solve_ma_1d,
                               solve_ma_2d, transform_from_psi)
from mamover.monitor import (MonitorField, equidist_metrics, monitor_from_state,
                             trapezoid_mass)
from mamover.nnet import DenseNet, forward, input_hessian, input_jacobian, param_grads
from mamover.solver import (MessagePassingNet, MmPdeModel, VariantSpec,
                            build_variant, mmpde_forward, mp_forward, train_solver)


def report(num: int, name: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {num:2d} {name}: {detail}"
    conftest.CRITERION_LINES.append(line)
    print(line, file=sys.__stdout__, flush=True)
    assert ok, line


# ---------------------------------------------------------------- fixtures

@pytest.fixture(scope="module")
def desk_dataset():
    """Desk-scale Burgers trajectories: solved at 48, stored at 24x24."""
    cfg = BurgersConfig(solve_cells=48, target_cells=24, steps=4, n_traj=5,
                        seed=0, ic_variant="two_bump")
    return gen_burgers(cfg)


# Developed frames t in {1,2,3} map to normalized training times {0,.5,1};
# t=0 frames are excluded everywhere at this resolution: the initial bumps
# span ~3 cells, below what the nodal monitor itself resolves.
T_NORM = {1: 0.0, 2: 0.5, 3: 1.0}


@pytest.fixture(scope="module")
def desk_dmm(desk_dataset):
    """Mesh mover: trained across the four train trajectories, then
    specialized on trajectory 0 (the trajectory whose meshes criteria 1-2
    measure).  The test trajectory stays fully unseen for criterion 5."""
    ds = desk_dataset
    gen = [(ds.trajectories[i][t], T_NORM[t])
           for i in (0, 1, 2, 3) for t in (1, 2, 3)]
    ft = [(ds.trajectories[0][t], T_NORM[t]) for t in (1, 2, 3)]
    model, _ = train_dmm(gen, DmmTrainConfig(
        epochs=2000, n_interior=256, n_boundary=64, lr=3e-3, seed=0,
        qn_iters=60))
    model, hist = train_dmm(ft, DmmTrainConfig(
        epochs=1000, n_interior=384, n_boundary=96, lr=1e-3, seed=0,
        qn_iters=80), model=model)
    return model, hist


@pytest.fixture(scope="module")
def eval_state(desk_dataset):
    """The sharpest developed frame of the specialization trajectory."""
    return desk_dataset.trajectories[0][1]


@pytest.fixture(scope="module")
def eval_monitor(eval_state):
    return monitor_from_state(eval_state, boundary="periodic")


@pytest.fixture(scope="module")
def eval_mesh(desk_dmm, eval_state):
    model, _ = desk_dmm
    return dmm_mesh(model, eval_state, T_NORM[1])


# ------------------------------------------------------- mesh quality (1-5)

def test_c01_equidistribution_improvement(eval_state, eval_monitor, eval_mesh):
    mon = eval_monitor
    s0, r0 = equidist_metrics(MovedMesh.identity(eval_state.grid), mon)
    s1, r1 = equidist_metrics(eval_mesh, mon)
    std_cut, rng_cut = 1 - s1 / s0, 1 - r1 / r0
    ok = std_cut >= 0.30 and rng_cut >= 0.30
    report(1, "equidistribution improvement", ok,
           f"std {s0:.4f}->{s1:.4f} ({100*std_cut:.0f}% cut), "
           f"range {r0:.4f}->{r1:.4f} ({100*rng_cut:.0f}% cut); need >=30% each")


def test_c02_oracle_supremacy_and_agreement(eval_state, eval_monitor, eval_mesh):
    t0 = time.time()
    mon = eval_monitor
    psi = solve_ma_2d(mon, MaSolveConfig(max_iters=4000))
    oracle = transform_from_psi(psi)
    s0, _ = equidist_metrics(MovedMesh.identity(eval_state.grid), mon)
    s_or, _ = equidist_metrics(oracle, mon)
    s_nn, _ = equidist_metrics(eval_mesh, mon)
    cut, ratio = 1 - s_or / s0, s_nn / s_or
    ok = cut >= 0.50 and ratio <= 2.0
    report(2, "classical oracle supremacy", ok,
           f"oracle std cut {100*cut:.0f}% (need >=50%), neural/oracle std "
           f"ratio {ratio:.2f} (need <=2), {time.time()-t0:.0f}s")


def test_c03_1d_2d_oracle_equivalence():
    t0 = time.time()
    n = 65
    grid = StructuredGrid(n, n)
    rho_line = 1.0 + np.linspace(0.0, 1.0, n)
    fld = ScalarField2D(grid, np.repeat(rho_line[:, None], n, axis=1))
    mon = MonitorField(fld, alpha=1.0, sigma=trapezoid_mass(fld))
    psi = solve_ma_2d(mon, MaSolveConfig(max_iters=5000))
    mesh = transform_from_psi(psi)
    f1 = solve_ma_1d(rho_line, n)
    gap = float(np.max(np.abs(mesh.coords[..., 0] - f1[:, None])))
    ok = gap <= 1e-3
    report(3, "1-D/2-D oracle equivalence", ok,
           f"L-inf displacement gap {gap:.3g} (need <=1e-3), "
           f"{time.time()-t0:.0f}s")


def test_c04_physics_loss_trajectory():
    t0 = time.time()
    cfg48 = BurgersConfig(solve_cells=48, target_cells=48, steps=1, n_traj=1,
                          seed=0, ic_variant="two_bump")
    state = gen_burgers(cfg48).trajectories[0][0]
    cfg = DmmTrainConfig(epochs=1800, n_interior=384, n_boundary=192, lr=3e-3,
                         seed=0, qn_iters=80, beta=4000.0, gamma=50.0)
    _, hist = train_dmm([(state, 0.0)], cfg)
    init = hist.epochs[0][0]
    orders = np.log10(init / hist.stage2_final)
    qn_ok = hist.refine.loss_after <= hist.refine.loss_before + 1e-12
    _, l_eq, l_bound, l_convex = hist.epochs[-1]
    ok = orders >= 2.0 and qn_ok and l_bound <= 1e-4 and l_convex <= 1e-8
    report(4, "physics-loss trajectory", ok,
           f"loss {init:.3g}->{hist.stage2_final:.3g} ({orders:.2f} orders, "
           f"need >=2), refine {hist.refine.loss_before:.3g}->"
           f"{hist.refine.loss_after:.3g}, l_bound {l_bound:.2g} (<=1e-4), "
           f"l_convex {l_convex:.2g} (<=1e-8), {time.time()-t0:.0f}s")


def test_c05_no_mesh_tangling(desk_dmm, desk_dataset):
    model, _ = desk_dmm
    tangled_total, convex_max = 0, 0.0
    for t in (1, 2, 3):
        state = desk_dataset.trajectories[4][t]
        mesh = dmm_mesh(model, state, T_NORM[t])
        tangled_total += cell_volumes(mesh).tangled
        mon = monitor_from_state(state, boundary="periodic")
        pts_i, pts_b = sample_collocation(mon, 512, 64, seed=1236 + t)
        pts_c = _uniform_interior(state.grid, 512, seed=4323 + t)
        pl = physics_loss(model, state, T_NORM[t], pts_i, pts_b, mon,
                          create_graph=False, convex_pts=pts_c)
        convex_max = max(convex_max, float(pl.convex))
    ok = tangled_total == 0 and convex_max <= 1e-10
    report(5, "no mesh tangling", ok,
           f"{tangled_total} tangled cells across the unseen test "
           f"trajectory's frames (need 0), max l_convex {convex_max:.2g} "
           f"(need <=1e-10)")


# ----------------------------------------------- derivatives and transfer

def test_c06_derivative_exactness():
    t0 = time.time()
    rng = np.random.default_rng(42)
    bad = 0
    for _ in range(100):
        widths = [3, int(rng.integers(4, 9)), 1]
        net = DenseNet(widths, seed=int(rng.integers(0, 10000)))
        x = rng.standard_normal(widths[0])
        up = rng.standard_normal(1)
        eps = 1e-6
        g = param_grads(net, x, up)
        p0 = list(net.parameters())[0]
        with torch.no_grad():
            orig = float(p0.view(-1)[0])
            p0.view(-1)[0] = orig + eps
            hi = float(forward(net, x) @ up)
            p0.view(-1)[0] = orig - eps
            lo = float(forward(net, x) @ up)
            p0.view(-1)[0] = orig
        fd = (hi - lo) / (2 * eps)
        if abs(float(g[0].reshape(-1)[0]) - fd) > 1e-5 * max(1.0, abs(fd)):
            bad += 1
        jac = input_jacobian(net, x, [0, 1, 2])
        xp, xm = x.copy(), x.copy()
        xp[1] += eps
        xm[1] -= eps
        fdj = float((forward(net, xp) - forward(net, xm))[0]) / (2 * eps)
        if abs(jac[0, 1] - fdj) > 1e-5 * max(1.0, abs(fdj)):
            bad += 1
        hess = input_hessian(net, x, [0, 1, 2])
        if np.max(np.abs(hess - hess.T)) > 1e-12:
            bad += 1
        e2 = 1e-4
        quad = []
        for sa, sb in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
            xq = x.copy()
            xq[0] += sa * e2
            xq[2] += sb * e2
            quad.append(float(forward(net, xq)[0]))
        fdh = (quad[0] - quad[1] - quad[2] + quad[3]) / (4 * e2 * e2)
        if abs(hess[0, 2] - fdh) > 1e-4 * max(1.0, abs(fdh)):
            bad += 1
    elapsed = time.time() - t0
    ok = bad == 0 and elapsed <= 60
    report(6, "derivative exactness", ok,
           f"{bad} finite-difference mismatches over 100 nets (need 0), "
           f"{elapsed:.1f}s (need <=60)")


def test_c07_interpolation_properties(desk_dataset, desk_dmm):
    model, _ = desk_dmm
    rng = np.random.default_rng(0)
    pts = rng.random((40, 2))
    const = np.abs(soft_knn_extrapolate(pts, np.full(40, 2.75),
                                        rng.random((10, 2))) - 2.75).max()
    single = soft_knn_extrapolate(np.array([[0.3, 0.7]]), np.array([4.0]),
                                  np.array([0.9, 0.1]))
    states = [desk_dataset.trajectories[i][t] for i in (0, 1) for t in (1, 2)]
    times = [T_NORM[t] for i in (0, 1) for t in (1, 2)]
    meshes = [dmm_mesh(model, s, tn) for s, tn in zip(states, times)]
    fw = InterpFramework.build(states[0].grid.nx * states[0].grid.ny, k=8,
                               seed=0)
    hist = pretrain_interp(fw, states, lambda i, u: meshes[i], epochs=60,
                           lr=2e-3, seed=0)
    ratio = hist.initial / hist.final
    ok = const <= 1e-12 and single == 4.0 and ratio >= 10.0
    report(7, "interpolation properties", ok,
           f"constant reproduction error {const:.2g} (<=1e-12), "
           f"single-point value {single} (=4.0 exactly), "
           f"pretraining loss cut {ratio:.0f}x (need >=10x)")


# -------------------------------------------------------- solver ordering

def test_c08_solver_ordering():
    t0 = time.time()
    cfg48 = BurgersConfig(solve_cells=48, target_cells=48, steps=4, n_traj=5,
                          seed=0, ic_variant="two_bump")
    ds = gen_burgers(cfg48)
    frames = [(ds.trajectories[i][t], t / 3.0) for i in (0, 1)
              for t in (0, 1, 2, 3)]
    dcfg = DmmTrainConfig(epochs=1200, n_interior=384, n_boundary=192,
                          lr=3e-3, seed=0, qn_iters=80, beta=4000.0,
                          gamma=50.0)
    mover, _ = train_dmm(frames, dcfg)

    def mesh_fn(u, t):
        return dmm_mesh(mover, u, t / 3.0)

    grid = ds.trajectories[0][0].grid
    train_pairs = ds.pairs("train")
    test_pairs = ds.pairs("test")
    base = MmPdeModel.build(grid, mesh_fn, hidden=32, layers=3, k_mp=16,
                            k_itp=8, seed=0)
    states = [p[0] for p in train_pairs]
    meshes = [mesh_fn(u, t) for u, t, _ in train_pairs]
    pretrain_interp(base.interp, states, lambda i, u: meshes[i], epochs=40,
                    lr=2e-3, seed=0)

    def one_step_mse(m):
        errs = []
        with torch.no_grad():
            for u, t, target in test_pairs:
                pred = mmpde_forward(m, u, t).numpy()
                errs.append(np.mean((pred - np.asarray(target).reshape(-1)) ** 2))
        return float(np.mean(errs))

    scores = {}
    for tag in ("full", "no_g1", "g1_plus_g2", "no_residual", "uniform_mesh"):
        m = build_variant(VariantSpec(tag), copy.deepcopy(base))
        train_solver(train_pairs, m, epochs=50, lr=1e-3, seed=0)
        scores[tag] = one_step_mse(m)

    # Matched-budget single-net baseline: state plus one message-passing delta.
    net = MessagePassingNet(32, 3, 16, seed=0)
    orig = grid.nodes().reshape(-1, 2)
    nb = knn(orig, orig, 17)[0][:, 1:]
    coords = torch.as_tensor(orig)
    torch.manual_seed(0)
    opt = torch.optim.Adam(net.parameters(), lr=1e-3)
    rng = np.random.default_rng(0)
    cached = [(torch.as_tensor(u.values.reshape(-1)), t,
               torch.as_tensor(np.asarray(v, dtype=float).reshape(-1)))
              for u, t, v in train_pairs]
    for _ in range(50):
        for k in rng.permutation(len(cached)):
            u, t, target = cached[k]
            loss = ((u + mp_forward(net, coords, u, t, nb) - target) ** 2).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
    errs = []
    with torch.no_grad():
        for u, t, target in test_pairs:
            uu = torch.as_tensor(u.values.reshape(-1))
            pred = uu + mp_forward(net, coords, uu, t, nb)
            tt = torch.as_tensor(np.asarray(target, dtype=float).reshape(-1))
            errs.append(float(((pred - tt) ** 2).mean()))
    gnn = float(np.mean(errs))

    table = " ".join(f"{k}={v:.3g}" for k, v in scores.items())
    ok = scores["full"] <= gnn and scores["full"] <= scores["uniform_mesh"]
    report(8, "solver ordering", ok,
           f"full {scores['full']:.3g} vs single-net {gnn:.3g} and "
           f"uniform-mesh {scores['uniform_mesh']:.3g} (full must be <= both); "
           f"all variants: {table}; {time.time()-t0:.0f}s")


# ------------------------------------------------- mesh-blend and sampling

def test_c09_blend_monotonicity(eval_state, eval_monitor, eval_mesh):
    f = eval_state
    mon = eval_monitor
    mesh = eval_mesh
    ident = MovedMesh.identity(f.grid).coords
    prev = None
    mono = True
    vals = []
    for lam in (0.8, 0.6, 0.4, 0.2):
        m = MovedMesh(f.grid, lam * mesh.coords + (1 - lam) * ident)
        s, r = equidist_metrics(m, mon)
        vals.append(f"{lam:.1f}:{s:.4f}/{r:.3f}")
        if prev is not None and not (s > prev[0] and r > prev[1]):
            mono = False
        prev = (s, r)
    report(9, "blend monotonicity", mono,
           "std/range strictly rise as the blend weight falls: "
           + " ".join(vals))


def test_c10_sampling_proportionality():
    g = StructuredGrid(33, 33)
    rho = np.where(g.nodes()[:, :, 0] < 0.5, 2.0, 1.0)
    f = ScalarField2D(g, rho)
    mon = MonitorField(f, 1.0, trapezoid_mass(f))
    pts, _ = sample_collocation(mon, 100000, 1, seed=3)
    frac = float((pts[:, 0] < 0.5).mean())
    rel = abs(frac - 2 / 3) / (2 / 3)
    ok = rel <= 0.05
    report(10, "sampling proportionality", ok,
           f"left-region frequency {frac:.4f} vs 2/3 "
           f"({100*rel:.2f}% off, need <=5%)")


def test_c11_error_scaling_study():
    t0 = time.time()

    def front(x, y):
        return np.tanh(20 * (x + y - 1.0))

    rep = error_scaling_study(front, [17, 25, 33], C=100.0,
                              config=MaSolveConfig(max_iters=2000))
    dominated = all(r.err_adapted <= r.err_uniform for r in rep.records)
    slope = rep.slope_adapted
    ok = dominated and slope is not None and slope <= -0.4
    report(11, "error scaling", ok,
           f"adapted <= uniform at every N: {dominated}, adapted slope "
           f"{slope:.2f} (need <=-0.4), {time.time()-t0:.0f}s")


# ------------------------------------------------------------- determinism

def run_cli(args, cwd):
    proc = subprocess.run([sys.executable, "-m", "mamover.cli", *args],
                          cwd=cwd, capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return proc


def test_c12_determinism(tmp_path):
    t0 = time.time()
    mismatches = []
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        run_cli(["--threads", "1", "gen-burgers", "--out", "data",
                 "--solve-cells", "24", "--target-cells", "12", "--steps", "2",
                 "--n-traj", "3", "--seed", "7", "--ic-variant", "two_bump"], d)
        run_cli(["--threads", "1", "train-dmm", "--data", "data",
                 "--out", "dmm.ckpt", "--epochs", "3",
                 "--batch-pts", "64", "--seed", "7"], d)
        run_cli(["--threads", "1", "pretrain-interp", "--data", "data",
                 "--dmm-checkpoint", "dmm.ckpt", "--out", "interp.ckpt",
                 "--epochs", "2", "--k", "4", "--seed", "7"], d)
        run_cli(["--threads", "1", "train-solver", "--data", "data",
                 "--dmm-checkpoint", "dmm.ckpt", "--out", "pde.ckpt",
                 "--epochs", "2", "--k-mp", "8", "--k-itp", "4",
                 "--seed", "7"], d)
    for name in ("data/traj_0000.mmf", "data/traj_0001.mmf",
                 "data/traj_0002.mmf", "data/manifest.json", "dmm.ckpt",
                 "interp.ckpt", "pde.ckpt"):
        a = (tmp_path / "a" / name).read_bytes()
        b = (tmp_path / "b" / name).read_bytes()
        if a != b:
            mismatches.append(name)
    ok = not mismatches
    report(12, "determinism", ok,
           f"byte-identical artifacts across repeated seeded runs"
           f"{'' if ok else ': mismatches ' + ', '.join(mismatches)}, "
           f"{time.time()-t0:.0f}s")
