"""Command-line interface composing data generation, mesh solvers, training
and evaluation.  All numeric artifacts are MMF1; reports are CSV."""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import burgers, dmm as dmm_mod, interp as interp_mod, solver as solver_mod
from . import mmf
from .geom import MovedMesh, ScalarField2D, StructuredGrid, cell_volumes
from .ma_oracle import MaSolveConfig, error_scaling_study, solve_ma_2d, transform_from_psi
from .monitor import MonitorField, ScalarField2D as _SF, density, equidist_metrics, monitor_from_state, trapezoid_mass


def _load_field(path) -> ScalarField2D:
    arr = mmf.load_array(path)
    return ScalarField2D(StructuredGrid(arr.shape[0], arr.shape[1]), arr)


def parse_config(path) -> dict[str, str]:
    """Flat `key = value` lines with # comments."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key] = val
    return out


PIPELINE_KEYS = {
    "solve_cells": int, "target_cells": int, "steps": int, "n_traj": int,
    "seed": int, "nu": float, "dmm_epochs": int, "interp_epochs": int,
    "solver_epochs": int, "k_mp": int, "k_itp": int, "rollout_steps": int,
    "n_interior": int, "n_boundary": int, "out_dir": str,
}


def cmd_gen_burgers(args) -> int:
    config = burgers.BurgersConfig(
        nu=args.nu, solve_cells=args.solve_cells, target_cells=args.target_cells,
        steps=args.steps, n_traj=args.n_traj, seed=args.seed,
        ic_variant=args.ic_variant)
    ds = burgers.gen_burgers(config)
    burgers.save_dataset(args.out, ds)
    print(f"wrote {len(ds.trajectories)} trajectories to {args.out}")
    return 0


def cmd_solve_ma(args) -> int:
    if args.rho:
        arr = mmf.load_array(args.rho)
        grid = StructuredGrid(arr.shape[0], arr.shape[1])
        fld = ScalarField2D(grid, arr)
        mon = MonitorField(fld, alpha=1.0, sigma=trapezoid_mass(fld))
    else:
        state = _load_field(args.state)
        mon = monitor_from_state(state, boundary=args.boundary)
    config = MaSolveConfig(max_iters=args.max_iters, tol=args.tol, scheme=args.scheme)
    psi = solve_ma_2d(mon, config)
    mesh = transform_from_psi(psi)
    mesh.save(args.out_mesh)
    print(f"residual={psi.residual:.3e} iterations={psi.iterations} "
          f"converged={psi.converged}")
    return 0 if psi.converged else 2


def cmd_error_study(args) -> int:
    def front(x, y):
        return np.tanh(20 * (x + y - 1.0))

    report = error_scaling_study(front, args.resolutions)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["N", "err_uniform", "err_adapted", "bK"])
        for r in report.records:
            w.writerow([r.n_cells, r.err_uniform, r.err_adapted, r.bk])
    print(f"slope_uniform={report.slope_uniform} slope_adapted={report.slope_adapted}")
    return 0


def cmd_eval_mesh(args) -> int:
    mesh = MovedMesh.load(args.mesh)
    state = _load_field(args.state)
    mon = monitor_from_state(state, C=args.alpha_c, boundary=args.boundary)
    std, rng = equidist_metrics(mesh, mon)
    tangled = cell_volumes(mesh).tangled
    print(f"std={std:.6g} range={rng:.6g} tangled_cells={tangled}")
    return 0


def cmd_train_dmm(args) -> int:
    ds = burgers.load_dataset(args.data)
    config = dmm_mod.DmmTrainConfig(
        beta=args.beta, gamma=args.gamma, epochs=args.epochs,
        n_interior=args.batch_pts, n_boundary=max(args.batch_pts // 4, 1),
        seed=args.seed, lr=args.lr)
    model, history = dmm_mod.train_dmm(ds.frames("train"), config)
    dmm_mod.save_dmm(args.out, model)
    hist_path = Path(args.out).with_suffix(".history.csv")
    with open(hist_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "l", "l_eq", "l_bound", "l_convex"])
        for i, row in enumerate(history.epochs):
            w.writerow([i, *row])
    print(f"stage1={history.stage1_final:.6g} stage2={history.stage2_final:.6g}")
    return 0


def cmd_gen_mesh(args) -> int:
    model = dmm_mod.load_dmm(args.checkpoint)
    state = _load_field(args.state)
    if args.target_res:
        target = StructuredGrid(args.target_res, args.target_res)
        mesh = dmm_mod.resolution_transfer(model, state, args.t, target)
    else:
        mesh = dmm_mod.dmm_mesh(model, state, args.t)
    mesh.save(args.out_mesh)
    print(f"wrote mesh {mesh.base.nx}x{mesh.base.ny} to {args.out_mesh}")
    return 0


def cmd_pretrain_interp(args) -> int:
    ds = burgers.load_dataset(args.data)
    model = dmm_mod.load_dmm(args.dmm_checkpoint)
    frames = ds.frames("train")
    states = [f for f, _ in frames]
    times = [t for _, t in frames]
    t_hi = max(times) or 1.0
    fw = interp_mod.InterpFramework.build(
        states[0].grid.nx * states[0].grid.ny, k=args.k, seed=args.seed)
    history = interp_mod.pretrain_interp(
        fw, states,
        lambda i, u: dmm_mod.dmm_mesh(model, u, times[i] / t_hi),
        epochs=args.epochs, lr=args.lr, seed=args.seed)
    interp_mod.save_framework(args.out, fw)
    print(f"l_pre {history.initial:.6g} -> {history.final:.6g}")
    return 0


def _build_solver_model(grid, dmm_checkpoint, interp_checkpoint, variant, seed,
                        k_mp=35, k_itp=30, t_norm=1.0):
    mesh_fn = None
    if dmm_checkpoint:
        model = dmm_mod.load_dmm(dmm_checkpoint)
        mesh_fn = lambda u, t: dmm_mod.dmm_mesh(model, u, t / t_norm)
    pde = solver_mod.MmPdeModel.build(grid, mesh_fn, k_mp=k_mp, k_itp=k_itp,
                                      seed=seed, variant=variant)
    if interp_checkpoint:
        pde.interp = interp_mod.load_framework(interp_checkpoint)
    return pde


def _parse_variant(text) -> solver_mod.VariantSpec:
    if ":" in text:
        tag, lam = text.split(":", 1)
        return solver_mod.VariantSpec(tag, float(lam))
    return solver_mod.VariantSpec(text)


def cmd_train_solver(args) -> int:
    ds = burgers.load_dataset(args.data)
    grid = ds.trajectories[0][0].grid
    t_norm = float(ds.config.steps) or 1.0
    pde = _build_solver_model(grid, args.dmm_checkpoint, args.interp_checkpoint,
                              _parse_variant(args.variant), args.seed,
                              args.k_mp, args.k_itp, t_norm)
    history = solver_mod.train_solver(ds.pairs("train"), pde, epochs=args.epochs,
                                      lr=args.lr, seed=args.seed,
                                      freeze_interp=args.freeze_interp)
    _save_solver(args.out, pde, args.dmm_checkpoint, t_norm)
    print(f"loss {history.losses[0]:.6g} -> {history.losses[-1]:.6g}")
    return 0


def _save_solver(path, pde: solver_mod.MmPdeModel, dmm_checkpoint, t_norm):
    from .nnet import module_tensors

    tensors = []
    for mod in (pde.g1, pde.g2, *pde.interp.modules()):
        tensors.extend(module_tensors(mod))
    manifest = {
        "kind": "mmpde", "nx": pde.grid.nx, "ny": pde.grid.ny,
        "k_mp": pde.g1.k, "k_itp": pde.interp.k,
        "hidden": pde.g1.hidden, "layers": len(pde.g1.edge_nets),
        "variant": pde.variant.tag, "lam": pde.variant.lam,
        "dmm_checkpoint": str(dmm_checkpoint) if dmm_checkpoint else None,
        "t_norm": t_norm,
    }
    mmf.save_checkpoint(path, manifest, tensors)


def _load_solver(path) -> solver_mod.MmPdeModel:
    from .nnet import load_tensors_into

    manifest, tensors = mmf.load_checkpoint(path)
    if manifest.get("kind") != "mmpde":
        raise ValueError("not an MM-PDE checkpoint")
    grid = StructuredGrid(manifest["nx"], manifest["ny"])
    pde = _build_solver_model(
        grid, manifest.get("dmm_checkpoint"), None,
        solver_mod.VariantSpec(manifest["variant"], manifest["lam"]),
        seed=0, k_mp=manifest["k_mp"], k_itp=manifest["k_itp"],
        t_norm=manifest.get("t_norm", 1.0))
    mods = (pde.g1, pde.g2, *pde.interp.modules())
    off = 0
    for mod in mods:
        cnt = len(list(mod.parameters()))
        load_tensors_into(mod, tensors[off:off + cnt])
        off += cnt
    return pde


def cmd_rollout(args) -> int:
    pde = _load_solver(args.model)
    state = _load_field(args.init_state)
    traj = solver_mod.rollout(pde, state, args.steps)
    mmf.save_array(args.out_traj, np.stack([f.values for f in traj]))
    print(f"rolled out {args.steps} steps")
    return 0


def cmd_ablate(args) -> int:
    ds = burgers.load_dataset(args.data)
    grid = ds.trajectories[0][0].grid
    t_norm = float(ds.config.steps) or 1.0
    pairs_train = ds.pairs("train")
    pairs_test = ds.pairs("test")
    rows = []
    for tag in ("full", "no_g1", "g1_plus_g2", "no_residual", "uniform_mesh"):
        pde = _build_solver_model(grid, args.dmm_checkpoint, args.interp_checkpoint,
                                  solver_mod.VariantSpec(tag), args.seed,
                                  args.k_mp, args.k_itp, t_norm)
        solver_mod.train_solver(pairs_train, pde, epochs=args.epochs,
                                lr=args.lr, seed=args.seed)
        err = _test_mse(pde, pairs_test)
        rows.append((tag, err))
        print(f"{tag}: test_mse={err:.6g}")
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "test_mse"])
        w.writerows(rows)
    return 0


def _test_mse(pde, pairs) -> float:
    import torch

    total, count = 0.0, 0
    with torch.no_grad():
        for u, t, target in pairs:
            pred = solver_mod.mmpde_forward(pde, u, t).numpy()
            total += float(np.sum((pred - target.reshape(-1)) ** 2))
            count += pred.size
    return total / count


def cmd_pipeline(args) -> int:
    raw = parse_config(args.config_file)
    unknown = set(raw) - set(PIPELINE_KEYS)
    if unknown:
        print(f"error: unknown config key(s): {', '.join(sorted(unknown))}",
              file=sys.stderr)
        return 1
    cfg = {k: PIPELINE_KEYS[k](v) for k, v in raw.items()}
    out = Path(cfg.get("out_dir", "pipeline_out"))
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.get("seed", 0)

    stage = "gen-data"
    try:
        bc = burgers.BurgersConfig(
            nu=cfg.get("nu", 0.1), solve_cells=cfg.get("solve_cells", 48),
            target_cells=cfg.get("target_cells", 16), steps=cfg.get("steps", 10),
            n_traj=cfg.get("n_traj", 4), seed=seed)
        ds = burgers.gen_burgers(bc)
        burgers.save_dataset(out / "data", ds)

        stage = "train-dmm"
        dcfg = dmm_mod.DmmTrainConfig(
            epochs=cfg.get("dmm_epochs", 20), seed=seed,
            n_interior=cfg.get("n_interior", 128),
            n_boundary=cfg.get("n_boundary", 32))
        model, dhist = dmm_mod.train_dmm(ds.frames("train"), dcfg)
        dmm_mod.save_dmm(out / "dmm.ckpt", model)

        stage = "eval-mesh"
        state, t_ref = ds.frames("test")[len(ds.frames("test")) // 2]
        t_norm = float(bc.steps) or 1.0
        mon = monitor_from_state(state, boundary="periodic")
        mesh = dmm_mod.dmm_mesh(model, state, t_ref / t_norm)
        std_m, rng_m = equidist_metrics(mesh, mon)
        std_u, rng_u = equidist_metrics(MovedMesh.identity(state.grid), mon)

        stage = "pretrain-interp"
        frames = ds.frames("train")
        fw = interp_mod.InterpFramework.build(
            state.grid.nx * state.grid.ny, k=cfg.get("k_itp", 12), seed=seed)
        ihist = interp_mod.pretrain_interp(
            fw, [f for f, _ in frames],
            lambda i, u: dmm_mod.dmm_mesh(model, u, frames[i][1] / t_norm),
            epochs=cfg.get("interp_epochs", 10), seed=seed)
        interp_mod.save_framework(out / "interp.ckpt", fw)

        stage = "train-solver"
        pde = solver_mod.MmPdeModel.build(
            state.grid, lambda u, t: dmm_mod.dmm_mesh(model, u, t / t_norm),
            k_mp=cfg.get("k_mp", 12), k_itp=cfg.get("k_itp", 12), seed=seed)
        pde.interp = fw
        shist = solver_mod.train_solver(ds.pairs("train"), pde,
                                        epochs=cfg.get("solver_epochs", 5), seed=seed)
        _save_solver(out / "mmpde.ckpt", pde, out / "dmm.ckpt", t_norm)

        stage = "rollout"
        test_traj = ds.trajectories[ds.splits["test"][0]]
        steps = min(cfg.get("rollout_steps", 5), len(test_traj) - 1)
        pred = solver_mod.rollout(pde, test_traj[0], steps)
        roll_mse = solver_mod.mse(pred, test_traj[:steps + 1])

        stage = "report"
        with open(out / "summary.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value"])
            w.writerow(["std_uniform", std_u])
            w.writerow(["std_dmm", std_m])
            w.writerow(["range_uniform", rng_u])
            w.writerow(["range_dmm", rng_m])
            w.writerow(["dmm_loss_first", dhist.epochs[0][0]])
            w.writerow(["dmm_loss_stage1", dhist.stage1_final])
            w.writerow(["dmm_loss_stage2", dhist.stage2_final])
            w.writerow(["l_pre_initial", ihist.initial])
            w.writerow(["l_pre_final", ihist.final])
            w.writerow(["solver_loss_first", shist.losses[0]])
            w.writerow(["solver_loss_final", shist.losses[-1]])
            w.writerow(["rollout_mse", roll_mse])
        print(f"pipeline complete; summary at {out / 'summary.csv'}")
        return 0
    except Exception as exc:  # noqa: BLE001 - stage name is the diagnostic
        print(f"error: pipeline failed at stage {stage}: {exc}", file=sys.stderr)
        return 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mamover",
                                description="moving-mesh engine and PDE surrogate")
    p.add_argument("--threads", type=int, default=None, help="torch CPU threads")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-burgers", help="generate Burgers trajectories")
    g.add_argument("--out", required=True)
    g.add_argument("--nu", type=float, default=0.1)
    g.add_argument("--solve-cells", type=int, default=96)
    g.add_argument("--target-cells", type=int, default=24)
    g.add_argument("--steps", type=int, default=30)
    g.add_argument("--n-traj", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--ic-variant", choices=["verbatim", "two_bump"], default="verbatim")
    g.set_defaults(func=cmd_gen_burgers)

    s = sub.add_parser("solve-ma", help="classical Monge-Ampere mesh solve")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--state", help="MMF1 state file (monitor derived from it)")
    src.add_argument("--rho", help="MMF1 density file used directly")
    s.add_argument("--out-mesh", required=True)
    s.add_argument("--tol", type=float, default=1e-6)
    s.add_argument("--max-iters", type=int, default=20000)
    s.add_argument("--scheme", choices=["relaxation", "damped_newton"],
                   default="relaxation")
    s.add_argument("--boundary", choices=["periodic", "one_sided"], default="one_sided")
    s.set_defaults(func=cmd_solve_ma)

    e = sub.add_parser("error-study", help="interpolation error scaling study")
    e.add_argument("--resolutions", type=int, nargs="+", default=[17, 33, 65])
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_error_study)

    m = sub.add_parser("eval-mesh", help="equidistribution metrics of a mesh")
    m.add_argument("--mesh", required=True)
    m.add_argument("--state", required=True)
    m.add_argument("--alpha-c", type=float, default=100.0)
    m.add_argument("--boundary", choices=["periodic", "one_sided"], default="periodic")
    m.set_defaults(func=cmd_eval_mesh)

    d = sub.add_parser("train-dmm", help="train the neural mesh mover")
    d.add_argument("--data", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--beta", type=float, default=1000.0)
    d.add_argument("--gamma", type=float, default=1.0)
    d.add_argument("--epochs", type=int, default=100)
    d.add_argument("--batch-pts", type=int, default=256)
    d.add_argument("--lr", type=float, default=2e-3)
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_train_dmm)

    gm = sub.add_parser("gen-mesh", help="mesh from a trained mover")
    gm.add_argument("--checkpoint", required=True)
    gm.add_argument("--state", required=True)
    gm.add_argument("--t", type=float, default=0.0)
    gm.add_argument("--out-mesh", required=True)
    gm.add_argument("--target-res", type=int, default=None)
    gm.set_defaults(func=cmd_gen_mesh)

    pi = sub.add_parser("pretrain-interp", help="round-trip interpolation pretraining")
    pi.add_argument("--data", required=True)
    pi.add_argument("--dmm-checkpoint", required=True)
    pi.add_argument("--out", required=True)
    pi.add_argument("--k", type=int, default=30)
    pi.add_argument("--epochs", type=int, default=50)
    pi.add_argument("--lr", type=float, default=1e-3)
    pi.add_argument("--seed", type=int, default=0)
    pi.set_defaults(func=cmd_pretrain_interp)

    ts = sub.add_parser("train-solver", help="train the two-branch solver")
    ts.add_argument("--data", required=True)
    ts.add_argument("--dmm-checkpoint", default=None)
    ts.add_argument("--interp-checkpoint", default=None)
    ts.add_argument("--variant", default="full", help="tag or blend:<lambda>")
    ts.add_argument("--epochs", type=int, default=40)
    ts.add_argument("--lr", type=float, default=1e-3)
    ts.add_argument("--seed", type=int, default=0)
    ts.add_argument("--k-mp", type=int, default=35)
    ts.add_argument("--k-itp", type=int, default=30)
    ts.add_argument("--freeze-interp", action="store_true")
    ts.add_argument("--out", required=True)
    ts.set_defaults(func=cmd_train_solver)

    r = sub.add_parser("rollout", help="autoregressive rollout")
    r.add_argument("--model", required=True)
    r.add_argument("--init-state", required=True)
    r.add_argument("--steps", type=int, default=10)
    r.add_argument("--out-traj", required=True)
    r.set_defaults(func=cmd_rollout)

    a = sub.add_parser("ablate", help="train and score the five variants")
    a.add_argument("--data", required=True)
    a.add_argument("--dmm-checkpoint", required=True)
    a.add_argument("--interp-checkpoint", default=None)
    a.add_argument("--epochs", type=int, default=40)
    a.add_argument("--lr", type=float, default=1e-3)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--k-mp", type=int, default=35)
    a.add_argument("--k-itp", type=int, default=30)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)

    pl = sub.add_parser("pipeline", help="end-to-end run from a config file")
    pl.add_argument("config_file")
    pl.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads:
        import torch

        torch.set_num_threads(args.threads)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
