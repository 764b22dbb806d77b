import csv

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from equinv.backbone import Backbone, FeatureExtractor, FeatureMap, grid_to_image, image_to_grid
from equinv.data import SyntheticDataset, generate_synthetic_dataset
from equinv.errors import InvalidArgument, NumericError
from equinv.evaluation import (
    LandmarkRegressor, LandmarkSet, RegressorConfig, build_matching_benchmark, compute_metrics,
    load_benchmark, match_landmarks, mean_pixel_error, predict_landmarks, regressor_forward,
    regressor_param_count, save_benchmark, soft_argmax, summarize_sweep, sweep_annotations,
    train_regressor, write_results,
)
from equinv.geometry import make_tps_warp, map_coords, resize_warp

import oracles


def _coord_grid(s, c=2):
    """Normalised (x, y) coordinate encoding of an s x s grid, optional extra channels."""
    ys, xs = np.mgrid[0:s, 0:s].astype(np.float64)
    base = np.stack([xs / (s - 1) * 2 - 1, ys / (s - 1) * 2 - 1], -1)
    if c > 2:
        base = np.concatenate([base, np.ones((s, s, c - 2))], -1)
    return base


def rbf_code(points, s, width=0.6):
    """Sharp positional code: one Gaussian bump per grid cell."""
    centres = np.stack(np.meshgrid(np.arange(s), np.arange(s)), -1).reshape(-1, 2)
    d2 = ((np.asarray(points)[..., None, :] - centres) ** 2).sum(-1)
    return np.exp(-d2 / (2 * width**2))


# ---------------------------------------------------------------- matching


def test_self_match_with_coordinate_encoding():
    s = 12
    desc = _coord_grid(s) + np.array([0.0, 0.0])
    desc = np.concatenate([desc, np.full((s, s, 1), 1.5)], -1)
    cells = np.array([[2, 3], [7, 1], [11, 11], [0, 5]], float)
    lm = LandmarkSet(grid_to_image(cells, (24, 24), (s, s)), np.ones(4, bool))
    pred = match_landmarks(desc, desc, lm, (24, 24))
    assert mean_pixel_error(pred, lm) == 0.0


def test_translated_target_shifts_predictions():
    s = 10
    code = rbf_code(np.stack(np.meshgrid(np.arange(s), np.arange(s)), -1).reshape(-1, 2), s).reshape(s, s, -1)
    dx, dy = 2, 1
    tgt = np.zeros_like(code)
    tgt[dy:, dx:] = code[:s - dy, :s - dx]  # index-shift oracle
    cells = np.array([[1, 1], [4, 6], [7, 2]], float)
    lm = LandmarkSet(grid_to_image(cells, (20, 20), (s, s)), np.ones(3, bool))
    pred = match_landmarks(code, tgt, lm, (20, 20))
    assert np.allclose(pred.points - lm.points, [[2 * dx, 2 * dy]] * 3)


def test_constant_descriptors_tie_to_first_cell():
    d = np.ones((6, 6, 3))
    lm = LandmarkSet([[3.0, 4.0], [9.0, 1.0]], [True, True])
    pred = match_landmarks(d, d, lm, (12, 12))
    assert np.allclose(pred.points, grid_to_image([[0, 0]] * 2, (12, 12), (6, 6)))


def test_match_channel_mismatch():
    with pytest.raises(InvalidArgument):
        match_landmarks(np.ones((4, 4, 2)), np.ones((4, 4, 3)), LandmarkSet([[1, 1]], [True]), (8, 8))


@settings(max_examples=20)
@given(st.integers(0, 1000), st.floats(0.01, 100))
def test_match_invariant_to_positive_rescaling(seed, lam):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(5, 5, 4)), rng.normal(size=(5, 5, 4))
    lm = LandmarkSet(rng.uniform(0, 9, (3, 2)), [True, True, True])
    p1 = match_landmarks(a, b, lm, (10, 10))
    p2 = match_landmarks(a * lam, b * lam, lm, (10, 10))
    assert np.array_equal(p1.points, p2.points)


def test_invisible_reference_landmarks_not_predicted():
    d = _coord_grid(4, 3)
    pred = match_landmarks(d, d, LandmarkSet([[1, 1], [2, 2]], [True, False]), (8, 8))
    assert pred.visible.tolist() == [True, False]
    assert np.isnan(pred.points[1]).all()


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_match_exact_under_known_tps_warp(seed):
    """Coordinate-encoding descriptors transferred through a known warp."""
    size, s = (96, 96), 48
    warp = make_tps_warp(5, 0.05, size, seed)
    g = resize_warp(warp, (s, s))
    ref = rbf_code(g.forward_map.reshape(-1, 2), s).reshape(s, s, -1)
    tgt = rbf_code(np.stack(np.meshgrid(np.arange(s), np.arange(s)), -1).reshape(-1, 2), s).reshape(s, s, -1)
    pts = np.random.default_rng(seed).uniform(20, 76, (10, 2))
    gt_pts, ok = map_coords(warp, pts)
    lm = LandmarkSet(pts, ok)
    pred = match_landmarks(ref, tgt, lm, size)
    err = np.abs(pred.points[ok] - gt_pts[ok])
    assert err.max() <= 0.5 * 96 / s + 0.25


# ---------------------------------------------------------------- benchmark


@pytest.fixture(scope="module")
def small_ds():
    return generate_synthetic_dataset(12, (48, 48), seed=4)


def test_benchmark_counts_and_determinism(small_ds):
    a = build_matching_benchmark(small_ds, 5, 4, seed=1)
    b = build_matching_benchmark(small_ds, 5, 4, seed=1)
    assert len(a) == 9 and a.counts == {"same": 5, "diff": 4}
    for x, y in zip(a.entries, b.entries):
        assert (x.ref_id, x.tgt_id, x.pair_type, x.warp_seed) == (y.ref_id, y.tgt_id, y.pair_type, y.warp_seed)
        assert x.tgt_landmarks == y.tgt_landmarks
    for e in a.entries:
        if e.pair_type == "diff":
            assert e.ref_id != e.tgt_id


def test_benchmark_full_size_count(small_ds):
    b = build_matching_benchmark(small_ds, 500, 500, seed=0, tps_sigma=0.0)
    assert len(b) == 1000


def test_zero_sigma_same_pairs_keep_landmarks(small_ds):
    b = build_matching_benchmark(small_ds, 1, 0, seed=2, tps_sigma=0.0)
    e = b.entries[0]
    assert np.array_equal(e.tgt_landmarks.points, e.ref_landmarks.points)


def test_same_pairs_follow_the_warp(small_ds):
    b = build_matching_benchmark(small_ds, 3, 0, seed=3)
    for e in b.entries:
        w = make_tps_warp(b.tps_grid, b.tps_sigma, (48, 48), e.warp_seed)
        pts, ok = map_coords(w, e.ref_landmarks.points)
        assert np.array_equal(e.tgt_landmarks.points, pts)


def test_benchmark_csv_roundtrip(tmp_path, small_ds):
    b = build_matching_benchmark(small_ds, 3, 3, seed=5)
    save_benchmark(tmp_path / "bench.csv", b)
    with open(tmp_path / "bench.csv") as fh:
        assert next(csv.reader(fh)) == ["ref_id", "tgt_id", "pair_type", "warp_seed"]
    c = load_benchmark(tmp_path / "bench.csv", small_ds)
    for x, y in zip(b.entries, c.entries):
        assert x.tgt_landmarks == y.tgt_landmarks and x.pair_type == y.pair_type


def test_benchmark_needs_two_images(small_ds):
    one = SyntheticDataset(small_ds.images[:1], small_ds.landmarks[:1], None)
    with pytest.raises(InvalidArgument):
        build_matching_benchmark(one, 1, 1)


# ---------------------------------------------------------------- pixel error and metrics


def test_pixel_error_examples():
    gt = LandmarkSet(np.arange(10.0).reshape(5, 2), np.ones(5, bool))
    assert mean_pixel_error(gt, gt) == 0.0
    off = LandmarkSet(gt.points + [[3, 4], [0, 0], [0, 0], [0, 0], [0, 0]], gt.visible)
    assert mean_pixel_error(off, gt) == 1.0


def test_pixel_error_random_instance():
    rng = np.random.default_rng(0)
    gt = LandmarkSet(rng.uniform(0, 90, (7, 2)), rng.random(7) > 0.3)
    pred = LandmarkSet(rng.uniform(0, 90, (7, 2)), np.ones(7, bool))
    want = np.mean([np.hypot(*(p - g)) for p, g, v in zip(pred.points, gt.points, gt.visible) if v])
    assert mean_pixel_error(pred, gt) == pytest.approx(want, abs=1e-12)


def test_pixel_error_no_visible():
    gt = LandmarkSet(np.zeros((2, 2)), [False, False])
    with pytest.raises(InvalidArgument):
        mean_pixel_error(gt, gt)


def test_inter_ocular_example():
    gt = LandmarkSet([[20, 40], [70, 40], [45, 60]], [True, True, True])
    pred = gt.points + [3, 4]
    assert compute_metrics([pred], [gt], (96, 96), "inter_ocular") == pytest.approx(10.0)


def test_pck_threshold_arithmetic():
    gt = LandmarkSet([[10, 10], [50, 50]], [True, True])
    pred = gt.points + [[4.7, 0], [4.9, 0]]
    assert compute_metrics([pred], [gt], (96, 96), "pck") == 50.0


def test_pck_ignores_occluded():
    gt = LandmarkSet([[10, 10], [50, 50], [70, 20]], [False, True, False])
    pred = np.array([[90, 90], [50, 50], [0, 0]], float)
    assert compute_metrics([pred], [gt], (96, 96), "pck") == 100.0


def test_zero_interocular_rejected():
    gt = LandmarkSet([[10, 10], [10, 10], [5, 5]], [True] * 3)
    with pytest.raises(InvalidArgument):
        compute_metrics([gt.points], [gt], (32, 32), "inter_ocular")
    with pytest.raises(InvalidArgument):
        compute_metrics([gt.points], [gt], (32, 32), "f1")


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_metrics_invariant_to_consistent_permutation(seed):
    rng = np.random.default_rng(seed)
    L = 6
    gt = LandmarkSet(rng.uniform(0, 96, (L, 2)), rng.random(L) > 0.2)
    gt.visible[:2] = True
    gt.points[1] = gt.points[0] + [30, 5]
    pred = gt.points + rng.normal(0, 4, (L, 2))
    perm = np.concatenate([[1, 0], 2 + rng.permutation(L - 2)])
    gt_p = LandmarkSet(gt.points[perm], gt.visible[perm])
    for metric in ("pck", "inter_ocular"):
        a = compute_metrics([pred], [gt], (96, 96), metric)
        b = compute_metrics([pred[perm]], [gt_p], (96, 96), metric, eye_indices=(1, 0))
        assert a == pytest.approx(b, abs=1e-9)


# ---------------------------------------------------------------- soft-argmax


def test_soft_argmax_peak():
    hm = torch.zeros(5, 7, dtype=torch.float64)
    hm[3, 2] = 40.0
    assert torch.allclose(soft_argmax(hm, 1.0), torch.tensor([2.0, 3.0], dtype=torch.float64), atol=1e-6)


def test_soft_argmax_uniform_is_centroid():
    assert torch.allclose(soft_argmax(torch.zeros(4, 6, dtype=torch.float64)),
                          torch.tensor([2.5, 1.5], dtype=torch.float64))


def test_soft_argmax_matches_scalar_oracle():
    hm = np.random.default_rng(1).normal(size=(5, 5))
    got = soft_argmax(torch.from_numpy(hm), 1.7).numpy()
    assert np.abs(got - oracles.soft_argmax(hm, 1.7)).max() < 1e-12


def test_soft_argmax_gradient():
    h0 = np.random.default_rng(2).normal(size=(5, 5))
    w = np.array([0.7, -1.3])
    h = torch.tensor(h0, requires_grad=True)
    (soft_argmax(h, 1.3) @ torch.from_numpy(w)).backward()
    fd = oracles.central_diff(lambda x: float(soft_argmax(torch.from_numpy(x), 1.3).numpy() @ w), h0)
    assert oracles.rel_err(h.grad.numpy(), fd) < 1e-4


def test_soft_argmax_errors():
    with pytest.raises(NumericError):
        soft_argmax(torch.tensor([[0.0, float("inf")]]))
    with pytest.raises(InvalidArgument):
        soft_argmax(torch.zeros(2, 2), beta=0.0)


# ---------------------------------------------------------------- regressor


@pytest.mark.parametrize("C,K,expect", [(3840, 50, 961_260), (64, 50, 17_260), (256, 10, 13_060)])
def test_param_count_examples(C, K, expect):
    assert regressor_param_count(C, K, 5) == expect


@settings(max_examples=20)
@given(st.integers(1, 300), st.integers(1, 20), st.integers(1, 6))
def test_param_count_matches_instance(C, K, L):
    reg = LandmarkRegressor(C, K, L, grid=4, image_size=(8, 8))
    assert reg.param_count == regressor_param_count(C, K, L)


def _f64_regressor(C, K, L, s, size, seed=0, beta=1.0):
    reg = LandmarkRegressor(C, K, L, s, size, beta, seed, dtype=torch.float64)
    g = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        reg.biases.copy_(torch.randn(L, K, generator=g, dtype=torch.float64))
        reg.mixer_w.copy_(torch.randn(L, 2, 2 * K, generator=g, dtype=torch.float64) / K)
        reg.mixer_b.copy_(torch.randn(L, 2, generator=g, dtype=torch.float64) * 0.1)
    return reg


def test_regressor_forward_matches_compositional_oracle():
    s, C, K, L = 6, 5, 3, 2
    reg = _f64_regressor(C, K, L, s, (12, 12), seed=3, beta=1.4)
    desc = np.random.default_rng(4).normal(size=(s, s, C))
    got = regressor_forward(FeatureMap(torch.from_numpy(desc)), reg).detach().numpy()
    want = oracles.regressor_forward(desc, reg.filters.detach().numpy(), reg.biases.detach().numpy(),
                                     reg.mixer_w.detach().numpy(), reg.mixer_b.detach().numpy(), 1.4, (12, 12))
    assert np.abs(got - want).max() < 1e-5


def test_regressor_delta_filters_with_mean_mixer():
    s, K = 8, 4
    desc = np.zeros((s, s, 2))
    desc[5, 2, 0] = 1.0
    reg = LandmarkRegressor(2, K, 1, s, (16, 16), dtype=torch.float64)
    with torch.no_grad():
        reg.filters.zero_()
        reg.filters[0, :, 0] = 60.0
        reg.biases.zero_()
        reg.mixer_w.zero_()
        reg.mixer_w[0, 0, 0::2] = 1.0 / K
        reg.mixer_w[0, 1, 1::2] = 1.0 / K
        reg.mixer_b.zero_()
    out = regressor_forward(torch.from_numpy(desc), reg).detach().numpy()
    assert np.allclose(out, grid_to_image([[2, 5]], (16, 16), (s, s)), atol=1e-6)


def test_regressor_zero_filters_give_centroid():
    reg = LandmarkRegressor(3, 5, 2, 8, (16, 16), dtype=torch.float64)
    with torch.no_grad():
        reg.filters.zero_()
        reg.mixer_w.zero_()
        reg.mixer_w[:, 0, 0::2] = 1 / 5
        reg.mixer_w[:, 1, 1::2] = 1 / 5
    out = regressor_forward(torch.randn(8, 8, 3, dtype=torch.float64), reg).detach().numpy()
    assert np.allclose(out, 7.5)


def test_regressor_dimension_mismatch():
    reg = LandmarkRegressor(4, 2, 1, 4, (8, 8))
    with pytest.raises(InvalidArgument):
        regressor_forward(torch.zeros(4, 4, 5), reg)


def test_regressor_gradient_end_to_end():
    s, C, K, L = 4, 3, 2, 2
    reg = _f64_regressor(C, K, L, s, (8, 8), seed=5)
    desc = torch.from_numpy(np.random.default_rng(6).normal(size=(s, s, C)))
    w_out = torch.from_numpy(np.random.default_rng(7).normal(size=(L, 2)))
    f0 = reg.filters.detach().numpy().copy()
    (regressor_forward(desc, reg) * w_out).sum().backward()

    def f(x):
        with torch.no_grad():
            reg.filters.copy_(torch.from_numpy(x))
            val = float((regressor_forward(desc, reg) * w_out).sum())
            reg.filters.copy_(torch.from_numpy(f0))
        return val

    assert oracles.rel_err(reg.filters.grad.numpy(), oracles.central_diff(f, f0)) < 1e-3


def test_pieces_path_equals_hypercolumn_path():
    torch.manual_seed(0)
    ex = FeatureExtractor(Backbone("small"), (2, 3, 4, 5), 32)
    imgs = np.random.default_rng(0).random((2, 64, 64, 3)).astype(np.float32)
    reg = LandmarkRegressor(ex.channels, 4, 3, 32, (64, 64), seed=1)
    with torch.no_grad():
        a = reg.forward_pieces(ex.pieces(imgs))
        b = reg(ex.descriptors(imgs))
    assert torch.allclose(a, b, atol=1e-4)


class DotExtractor:
    """Features that encode where a bright dot sits: channel 0 is the dot, pooled to the grid."""

    projector = None

    def __init__(self, grid):
        self.grid = grid
        self.channels = 2

    def pieces(self, images):
        x = torch.as_tensor(np.asarray(images)[..., 0], dtype=torch.float32)[:, None]
        dot = F.adaptive_avg_pool2d(x, self.grid) * 4.0
        return [torch.cat([dot, torch.ones_like(dot)], 1)]


def _dot_images(n, size, seed):
    rng = np.random.default_rng(seed)
    imgs = np.zeros((n, size, size, 3), np.float32)
    lms = []
    ys, xs = np.mgrid[0:size, 0:size]
    for i in range(n):
        p = rng.uniform(6, size - 7, 2)
        imgs[i, ..., 0] = np.exp(-((xs - p[0]) ** 2 + (ys - p[1]) ** 2) / (2 * 1.5**2))
        lms.append(LandmarkSet([p], [True], f"{i}"))
    return imgs, lms


def test_training_solves_coordinate_encoding_task():
    imgs, lms = _dot_images(64, 32, 0)
    ex = DotExtractor(16)
    cfg = RegressorConfig(K=2, epochs=150, batch_size=16, lr=0.05, weight_decay=0.0)
    reg = train_regressor(ex, imgs, lms, cfg)
    pred = predict_landmarks(ex, reg, imgs)
    err = np.mean([np.linalg.norm(p[0] - l.points[0]) for p, l in zip(pred, lms)])
    assert err < 0.5


def test_single_image_overfits():
    ds = generate_synthetic_dataset(12, (64, 64), seed=9)
    torch.manual_seed(0)
    ex = FeatureExtractor(Backbone("small"), (2, 3, 4, 5), 32)
    cfg = RegressorConfig(K=4, epochs=300, lr=0.02, weight_decay=0.0)
    reg = train_regressor(ex, ds.images[:1], ds.landmarks[:1], cfg)
    pred = predict_landmarks(ex, reg, ds.images)
    errs = [mean_pixel_error(LandmarkSet(p, np.ones(5, bool)), g) for p, g in zip(pred, ds.landmarks)]
    assert errs[0] < 1.0
    assert np.mean(errs[1:]) > 3 * errs[0] + 2.0


def test_training_deterministic():
    imgs, lms = _dot_images(8, 32, 1)
    cfg = RegressorConfig(K=2, epochs=3)
    a = train_regressor(DotExtractor(16), imgs, lms, cfg)
    b = train_regressor(DotExtractor(16), imgs, lms, cfg)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


def test_training_empty_rejected():
    with pytest.raises(InvalidArgument):
        train_regressor(DotExtractor(8), np.zeros((0, 16, 16, 3)), [])


def test_tps_augmented_training_runs():
    imgs, lms = _dot_images(4, 32, 2)
    cfg = RegressorConfig(K=2, epochs=2, augment_tps=True, tps_sigma=0.03)
    reg = train_regressor(DotExtractor(16), imgs, lms, cfg)
    assert all(torch.isfinite(p).all() for p in reg.parameters())


def test_sweep_rows_and_summary(tmp_path):
    imgs, lms = _dot_images(20, 32, 3)
    for l in lms:
        l.points = np.vstack([l.points, l.points + [6, 0]])
        l.visible = np.array([True, True])
    ds = SyntheticDataset(imgs, lms, None)
    rows = sweep_annotations(DotExtractor(16), ds, ds, [2, 5], seeds=(0, 1, 2),
                             config=RegressorConfig(K=2, epochs=2))
    assert len(rows) == 2 * 3 * 2
    assert {r["n_annotations"] for r in rows} == {2, 5}
    summary = summarize_sweep(rows)
    assert set(summary) == {(m, n) for m in ("pck", "inter_ocular") for n in (2, 5)}
    write_results(tmp_path / "r.csv", rows)
    with open(tmp_path / "r.csv") as fh:
        assert next(csv.reader(fh)) == ["metric", "value", "n_annotations", "seed"]
