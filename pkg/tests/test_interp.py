"""Value transfer: soft nearest-neighbor extrapolation, learnable weights,
round-trip framework and its pretraining."""

import numpy as np
import pytest
import torch

from mamover.geom import MovedMesh, ScalarField2D, StructuredGrid, knn
from mamover.interp import (InterpFramework, ItpNet, ResidualCutNet,
                            framework_roundtrip, interp_apply,
                            load_framework, pretrain_interp, save_framework,
                            soft_knn_extrapolate)


def test_soft_knn_reproduces_constants():
    rng = np.random.default_rng(0)
    pts = rng.random((40, 2))
    vals = np.full(40, 2.75)
    q = rng.random((10, 2)) * 2 - 0.5  # includes points outside the hull
    out = soft_knn_extrapolate(pts, vals, q)
    assert np.allclose(out, 2.75, atol=1e-12)


def test_soft_knn_single_point_identity():
    out = soft_knn_extrapolate(np.array([[0.3, 0.7]]), np.array([4.0]),
                               np.array([0.9, 0.1]))
    assert out == 4.0


def test_soft_knn_matches_manual_softmax():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    vals = np.array([1.0, 2.0, 3.0])
    q = np.array([0.2, 0.1])
    C = 5.0
    d = np.linalg.norm(pts - q, axis=1)
    w = np.exp(-C * d)
    w /= w.sum()
    assert soft_knn_extrapolate(pts, vals, q, C=C) == pytest.approx(w @ vals)


def test_soft_knn_default_scale_is_sqrt_n():
    pts = np.random.default_rng(1).random((26, 2))
    vals = np.arange(26.0)
    q = np.array([0.5, 0.5])
    assert soft_knn_extrapolate(pts, vals, q) == pytest.approx(
        soft_knn_extrapolate(pts, vals, q, C=5.0))


def test_soft_knn_empty_rejected():
    with pytest.raises(ValueError):
        soft_knn_extrapolate(np.zeros((0, 2)), np.zeros(0), np.zeros(2))


def test_itpnet_initializes_to_nearest_neighbor():
    rng = np.random.default_rng(2)
    src = rng.random((50, 2))
    vals = rng.random(50)
    q = rng.random((8, 2))
    itp = ItpNet(k=6, seed=0)
    out = interp_apply(itp, src, vals, q).detach().numpy()
    nearest, _ = knn(src, q, 1)
    assert np.allclose(out, vals[nearest[:, 0]], atol=1e-12)


def test_itpnet_normalized_weights_sum_to_one():
    itp = ItpNet(k=4, seed=1, normalize=True)
    with torch.no_grad():
        for p in itp.net.layers[-1].parameters():
            p.normal_()
    q = torch.rand(5, 2)
    nb = torch.rand(5, 4, 2)
    w = itp(q, nb)
    assert torch.allclose(w.sum(dim=1), torch.ones(5), atol=1e-12)


def test_interp_apply_needs_enough_sources():
    itp = ItpNet(k=10)
    with pytest.raises(ValueError):
        interp_apply(itp, np.random.rand(5, 2), np.zeros(5), np.zeros((1, 2)))


def test_framework_roundtrip_identity_mesh_at_init():
    # Identity mesh: both transfers are nearest-neighbor onto coincident
    # points, and the zero-initialized residual adds nothing, so the
    # round trip is exact.
    g = StructuredGrid(7, 7)
    vals = np.random.default_rng(3).random((7, 7))
    state = ScalarField2D(g, vals)
    fw = InterpFramework.build(49, k=5, seed=0)
    out = framework_roundtrip(fw, MovedMesh.identity(g), state)
    assert np.allclose(out.detach().numpy(), vals.reshape(-1), atol=1e-12)


def test_framework_mismatched_k_rejected():
    with pytest.raises(ValueError):
        InterpFramework(ItpNet(k=3), ItpNet(k=4), ResidualCutNet(9))


def test_pretrain_reduces_roundtrip_loss():
    g = StructuredGrid(9, 9)
    nodes = g.nodes()
    states = [ScalarField2D(g, np.sin(4 * nodes[..., 0] + k)) for k in range(3)]
    # Displace by more than half the node spacing so the nearest-neighbor
    # correspondence is no longer the identity permutation (a smaller shift
    # would round-trip exactly and leave nothing to train).
    coords = np.clip(nodes + 0.08 * np.sin(2 * np.pi * nodes[..., ::-1]), 0, 1)
    mesh = MovedMesh(g, coords)
    fw = InterpFramework.build(81, k=5, seed=0)
    hist = pretrain_interp(fw, states, lambda i, u: mesh, epochs=25, lr=3e-3,
                           seed=0)
    assert hist.final < hist.initial
    assert len(hist.losses) == 25


def test_pretrain_empty_dataset_rejected():
    fw = InterpFramework.build(9, k=2)
    with pytest.raises(ValueError):
        pretrain_interp(fw, [], lambda i, u: None)


def test_framework_checkpoint_roundtrip(tmp_path):
    fw = InterpFramework.build(25, k=4, seed=8)
    with torch.no_grad():
        for p in fw.itp1.parameters():
            p.normal_(0, 0.1)
    path = tmp_path / "fw.ckpt"
    save_framework(path, fw)
    back = load_framework(path)
    assert back.k == 4
    for a, b in zip(fw.parameters(), back.parameters()):
        assert torch.equal(a, b)
