import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import subspace_angles
from scipy.optimize import nnls

from equinv.analysis import (
    ProbeConfig, iou, nmf_factorize, nonneg_loadings, part_heatmaps, pca_basis, pca_images,
    segmentation_probe,
)
from equinv.errors import InvalidArgument


def test_nmf_rank_one_recovery():
    rng = np.random.default_rng(0)
    X = np.outer(rng.uniform(0.1, 2, 40), rng.uniform(0.1, 2, 15))
    f = nmf_factorize(X, k=1, iters=200)
    assert np.linalg.norm(X - f.W @ f.H) / np.linalg.norm(X) < 1e-3


@settings(max_examples=15)
@given(st.integers(0, 10_000), st.integers(1, 5))
def test_nmf_history_nonincreasing(seed, k):
    X = np.random.default_rng(seed).random((30, 12))
    f = nmf_factorize(X, k=k, iters=60, seed=seed)
    h = np.array(f.recon_error_history)
    assert len(h) == 61
    assert (np.diff(h) <= 0).all()
    assert (f.W >= 0).all() and (f.H >= 0).all()


def test_nmf_rejects_negative_input():
    X = np.ones((4, 4))
    X[2, 1] = -1e-3
    with pytest.raises(InvalidArgument):
        nmf_factorize(X, 2)


def test_heatmap_of_basis_row_is_uniformly_one():
    H = np.random.default_rng(1).random((3, 8))
    hc = np.broadcast_to(H[1], (5, 5, 8)).copy()
    maps = part_heatmaps(hc, H)
    assert maps.shape == (3, 5, 5)
    assert np.allclose(maps[1], 1.0)


def test_zero_features_give_zero_heatmaps():
    H = np.random.default_rng(2).random((4, 6))
    assert np.array_equal(part_heatmaps(np.zeros((3, 3, 6)), H), np.zeros((4, 3, 3)))


def test_heatmap_channel_mismatch():
    with pytest.raises(InvalidArgument):
        part_heatmaps(np.ones((3, 3, 5)), np.ones((2, 6)))


def test_heatmaps_are_normalised():
    rng = np.random.default_rng(3)
    maps = part_heatmaps(torch.from_numpy(rng.random((6, 6, 10))), rng.random((3, 10)))
    for m in maps:
        assert m.min() == pytest.approx(0.0) and m.max() == pytest.approx(1.0)


def test_loadings_match_nnls_oracle():
    rng = np.random.default_rng(4)
    H = rng.uniform(0.0, 1.0, (4, 20))
    X = rng.uniform(0.0, 1.0, (30, 4)) @ H + rng.uniform(0, 0.05, (30, 20))
    A = nonneg_loadings(X, H)
    ref = np.stack([nnls(H.T, x)[0] for x in X])
    assert np.linalg.norm(A - ref) / np.linalg.norm(ref) < 0.05


def test_pca_of_repeated_vector():
    v = np.array([3.0, -1.0, 2.0, 0.5])
    b = pca_basis(np.tile(v, (10, 1)), 1)
    assert np.allclose(b.components[0], v / np.linalg.norm(v))


def test_pca_spans_gram_eigenvectors():
    X = np.random.default_rng(5).normal(size=(50, 8))
    for k in (1, 3, 5):
        b = pca_basis(X, k)
        assert np.allclose(b.components @ b.components.T, np.eye(k), atol=1e-5)
        evals, evecs = np.linalg.eigh(X.T @ X)
        top = evecs[:, np.argsort(evals)[::-1][:k]]
        assert subspace_angles(b.components.T, top).max() < 1e-4
        assert (np.diff(b.singular_values) <= 0).all()


def test_pca_reconstruction_nonincreasing():
    X = np.random.default_rng(6).normal(size=(40, 7)) + 2.0
    errs = []
    for k in range(1, 8):
        V = pca_basis(X, k).components
        errs.append(np.linalg.norm(X - X @ V.T @ V))
    assert all(b <= a + 1e-9 for a, b in zip(errs, errs[1:]))
    assert errs[-1] < 1e-9


def test_pca_is_uncentered():
    # a constant offset dominates the first uncentered component
    X = np.random.default_rng(7).normal(0, 0.01, size=(30, 3)) + [10.0, 0, 0]
    assert abs(pca_basis(X, 1).components[0, 0]) > 0.999


def test_pca_k_too_large():
    with pytest.raises(InvalidArgument):
        pca_basis(np.ones((3, 5)), 4)


def test_pca_images_in_unit_range():
    X = np.random.default_rng(8).normal(size=(2, 4, 4, 6))
    rgb = pca_images(X, pca_basis(X.reshape(-1, 6), 4))
    assert rgb.shape == (2, 4, 4, 3) and rgb.min() >= 0 and rgb.max() <= 1


def test_iou_examples():
    m = np.zeros((4, 4), bool)
    m[1:3, 1:3] = True
    assert iou(np.zeros_like(m), m) == 0.0
    assert iou(m, m) == 1.0


@settings(max_examples=40)
@given(st.integers(0, 10_000))
def test_iou_bounded_and_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((2, 6, 6)) > rng.random(2)[:, None, None]
    v = iou(a, b)
    assert 0.0 <= v <= 1.0 and v == iou(b, a)


def test_probe_on_separable_features():
    rng = np.random.default_rng(9)
    n, s = 12, 16
    masks = np.zeros((n, s, s), bool)
    desc = rng.normal(0, 0.1, (n, 4, s, s)).astype(np.float32)
    for i in range(n):
        x0, y0 = rng.integers(2, 8, 2)
        masks[i, y0:y0 + 8, x0:x0 + 8] = True
        desc[i, 0] = -1.0
        desc[i, 0, y0:y0 + 8, x0:x0 + 8] = 1.0
    _, score = segmentation_probe(desc, masks, ProbeConfig(epochs=40, lr=0.05))
    assert score > 0.99


def test_probe_needs_masks():
    with pytest.raises(InvalidArgument):
        segmentation_probe(np.zeros((0, 2, 4, 4)), np.zeros((0, 8, 8), bool))
