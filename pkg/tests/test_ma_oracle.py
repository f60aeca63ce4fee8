"""Classical Monge-Ampere solver: 1-D inversion oracle, stencil boundary
behavior, residual identities, 2-D solves and the scaling study."""

import numpy as np
import pytest

from mamover.geom import MovedMesh, ScalarField2D, StructuredGrid, cell_volumes
from mamover.ma_oracle import (MaSolveConfig, PsiGrid, b_functional,
                               error_scaling_study, ma_residual, psi_gradient,
                               psi_hessian, solve_ma_1d, solve_ma_2d,
                               transform_from_psi, _mirror_pad)
from mamover.monitor import (MonitorField, equidist_metrics,
                             monitor_from_state, trapezoid_mass)


def test_1d_constant_rho_is_identity():
    f = solve_ma_1d(np.ones(101), 11)
    assert np.allclose(f, np.linspace(0, 1, 11), atol=1e-13)


def test_1d_linear_rho_closed_form():
    # rho = 1 + x: cumulative mass x + x^2/2, total 3/2, so the map solves
    # f + f^2/2 = 3 s / 2, i.e. f(s) = sqrt(1 + 3 s) - 1.
    xs = np.linspace(0, 1, 4001)
    f = solve_ma_1d(1.0 + xs, 21)
    s = np.linspace(0, 1, 21)
    assert np.allclose(f, np.sqrt(1.0 + 3.0 * s) - 1.0, atol=1e-6)


def test_1d_equal_mass_per_cell():
    rng = np.random.default_rng(0)
    rho = 1.0 + rng.random(801)
    n = 9
    f = solve_ma_1d(rho, n)
    xs = np.linspace(0, 1, rho.size)
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (rho[1:] + rho[:-1]) * np.diff(xs))])
    masses = np.diff(np.interp(f, xs, cum))
    assert np.allclose(masses, cum[-1] / (n - 1), rtol=1e-10)
    assert f[0] == 0.0 and f[-1] == 1.0
    assert np.all(np.diff(f) > 0)


def test_1d_validation():
    with pytest.raises(ValueError):
        solve_ma_1d(np.array([1.0, -1.0, 1.0]), 5)
    with pytest.raises(ValueError):
        solve_ma_1d(np.ones((3, 3)), 5)


def test_mirror_pad_hand_checked():
    psi = np.arange(9.0).reshape(3, 3)
    p = _mirror_pad(psi)
    assert p.shape == (5, 5)
    assert np.array_equal(p[1:-1, 1:-1], psi)
    assert np.array_equal(p[0, 1:-1], psi[1, :])   # reflected, not clamped
    assert np.array_equal(p[-1, 1:-1], psi[-2, :])
    assert p[0, 0] == psi[1, 1]


def test_gradient_zero_normal_slope_at_boundary():
    rng = np.random.default_rng(1)
    g = StructuredGrid(8, 8)
    psi = rng.standard_normal((8, 8))
    gx, gy = psi_gradient(psi, g)
    assert np.allclose(gx[0, :], 0.0)
    assert np.allclose(gx[-1, :], 0.0)
    assert np.allclose(gy[:, 0], 0.0)
    assert np.allclose(gy[:, -1], 0.0)


def test_hessian_exact_on_even_quadratic():
    # psi = x^2 has zero normal slope on x in {0,1}? No; but its interior
    # second difference is exactly 2, which is what the stencil must see.
    g = StructuredGrid(9, 9)
    nodes = g.nodes()
    psi = nodes[..., 0] ** 2
    pxx, pyy, pxy = psi_hessian(psi, g)
    assert np.allclose(pxx[1:-1, :], 2.0, atol=1e-10)
    assert np.allclose(pyy, 0.0, atol=1e-10)
    assert np.allclose(pxy, 0.0, atol=1e-10)


def test_residual_zero_for_uniform_density():
    g = StructuredGrid(12, 12)
    fld = ScalarField2D(g, np.ones((12, 12)))
    mon = MonitorField(fld, 1.0, trapezoid_mass(fld))
    r = ma_residual(np.zeros((12, 12)), mon, g)
    assert np.allclose(r, 0.0, atol=1e-13)


def test_solve_uniform_monitor_converges_to_identity():
    g = StructuredGrid(17, 17)
    fld = ScalarField2D(g, np.full((17, 17), 3.0))
    mon = MonitorField(fld, 1.0, trapezoid_mass(fld))
    psi = solve_ma_2d(mon)
    assert psi.converged
    mesh = transform_from_psi(psi)
    assert np.allclose(mesh.coords, g.nodes(), atol=1e-8)


def test_solve_separable_matches_1d_oracle():
    # y-independent density: every row of the 2-D map must reproduce the
    # 1-D equidistribution map.
    n = 33
    g = StructuredGrid(n, n)
    nodes = g.nodes()
    rho = 1.0 + 5.0 * np.exp(-30 * (nodes[..., 0] - 0.5) ** 2)
    fld = ScalarField2D(g, rho)
    mon = MonitorField(fld, 1.0, trapezoid_mass(fld))
    psi = solve_ma_2d(mon, MaSolveConfig(max_iters=4000))
    mesh = transform_from_psi(psi)
    f1d = solve_ma_1d(rho[:, 0], n)
    err = np.max(np.abs(mesh.coords[..., 0] - f1d[:, None]))
    assert err < 2e-3
    assert np.max(np.abs(mesh.coords[..., 1] - nodes[..., 1])) < 2e-3


def test_solve_reduces_equidistribution_std_without_tangling():
    n = 25
    g = StructuredGrid(n, n)
    nodes = g.nodes()
    u = ScalarField2D(g, np.exp(-40 * ((nodes[..., 0] - 0.5) ** 2
                                       + (nodes[..., 1] - 0.5) ** 2)))
    mon = monitor_from_state(u, C=20.0)
    psi = solve_ma_2d(mon, MaSolveConfig(max_iters=4000))
    mesh = transform_from_psi(psi)
    s0, _ = equidist_metrics(MovedMesh.identity(g), mon)
    s1, _ = equidist_metrics(mesh, mon)
    assert s1 < 0.6 * s0
    assert cell_volumes(mesh).tangled == 0


def test_warm_start_and_checkpoint_hook():
    n = 17
    g = StructuredGrid(n, n)
    nodes = g.nodes()
    rho = 1.0 + 2.0 * nodes[..., 0]
    fld = ScalarField2D(g, rho)
    mon = MonitorField(fld, 1.0, trapezoid_mass(fld))
    seen = []
    psi = solve_ma_2d(mon, MaSolveConfig(max_iters=1500),
                      checkpoint_cb=lambda p: seen.append(p.copy()))
    assert seen, "checkpoint callback never invoked"
    warm = solve_ma_2d(mon, MaSolveConfig(max_iters=200), psi0=psi.psi)
    assert warm.residual <= psi.residual * 1.01


def test_boundary_nodes_stay_on_boundary():
    n = 21
    g = StructuredGrid(n, n)
    nodes = g.nodes()
    u = ScalarField2D(g, np.tanh(10 * (nodes[..., 0] - 0.4)))
    mon = monitor_from_state(u, C=10.0)
    mesh = transform_from_psi(solve_ma_2d(mon, MaSolveConfig(max_iters=2000)))
    c = mesh.coords
    assert np.allclose(c[0, :, 0], 0.0) and np.allclose(c[-1, :, 0], 1.0)
    assert np.allclose(c[:, 0, 1], 0.0) and np.allclose(c[:, -1, 1], 1.0)


def test_psigrid_validation():
    g = StructuredGrid(4, 4)
    with pytest.raises(ValueError):
        PsiGrid(g, np.zeros((3, 4)))
    with pytest.raises(ValueError):
        PsiGrid(g, np.full((4, 4), np.inf))


def test_b_functional_linear_ramp():
    g = StructuredGrid(10, 10)
    u = ScalarField2D(g, g.nodes()[..., 0])  # |grad u| = 1 everywhere
    assert b_functional(u) == pytest.approx(1.0, rel=1e-12)


def test_error_study_affine_function_underflows():
    report = error_scaling_study(lambda x, y: 1.0 + 2.0 * x - y, [5, 9, 17],
                                 config=MaSolveConfig(max_iters=50))
    assert report.slope_uniform is None
    assert report.slope_adapted is None
    counts = [r.n_cells for r in report.records]
    assert counts == [16, 64, 256]


def test_error_study_needs_three_resolutions():
    with pytest.raises(ValueError):
        error_scaling_study(lambda x, y: x, [5, 9])


def test_config_validation():
    with pytest.raises(ValueError):
        MaSolveConfig(tol=0.0)
    with pytest.raises(ValueError):
        MaSolveConfig(damping=1.5)
    with pytest.raises(ValueError):
        MaSolveConfig(scheme="sor")
