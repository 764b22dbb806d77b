"""Landmark matching and frozen-feature landmark regression benchmarks."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import InvalidArgument, NumericError


@dataclass
class LandmarkSet:
    points: np.ndarray  # (L, 2) pixel (x, y)
    visible: np.ndarray  # (L,) bool
    image_id: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        self.visible = np.asarray(self.visible, dtype=bool).reshape(-1)
        if len(self.points) != len(self.visible):
            raise InvalidArgument("points and visibility lengths differ")

    def __len__(self):
        return len(self.points)

    def __eq__(self, other):
        if not isinstance(other, LandmarkSet):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and np.array_equal(self.visible, other.visible)
            and np.array_equal(self.points, other.points)
        )


# ---------------------------------------------------------------- matching


@dataclass
class BenchmarkEntry:
    ref_id: str
    tgt_id: str
    pair_type: str  # "same" | "diff"
    warp_seed: int
    ref_landmarks: LandmarkSet
    tgt_landmarks: LandmarkSet
    ref_index: int = -1
    tgt_index: int = -1


@dataclass
class MatchBenchmark:
    entries: list
    tps_grid: int = 5
    tps_sigma: float = 0.05

    @property
    def counts(self):
        out = {"same": 0, "diff": 0}
        for e in self.entries:
            out[e.pair_type] += 1
        return out

    def __len__(self):
        return len(self.entries)


def _annotated(dataset):
    return [i for i, lm in enumerate(dataset.landmarks) if lm is not None and lm.visible.any()]


def _same_target(dataset, index, warp_seed, grid, sigma):
    from .geometry import make_tps_warp, map_coords

    ref = dataset.landmarks[index]
    size = dataset.images.shape[1:3]
    warp = make_tps_warp(grid, sigma, size, warp_seed)
    pts, ok = map_coords(warp, ref.points)
    return warp, LandmarkSet(pts, ref.visible & ok, ref.image_id)


def build_matching_benchmark(dataset, n_same=500, n_diff=500, seed=0, tps_grid=5, tps_sigma=0.05):
    """Same-identity TPS pairs and different-identity pairs with ground truth."""
    idx = _annotated(dataset)
    if len(idx) < 2:
        raise InvalidArgument("need at least 2 annotated images")
    rng = np.random.default_rng(seed)
    entries = []
    for _ in range(n_same):
        i = int(rng.choice(idx))
        ws = int(rng.integers(2**31))
        _, tgt = _same_target(dataset, i, ws, tps_grid, tps_sigma)
        ref = dataset.landmarks[i]
        entries.append(BenchmarkEntry(ref.image_id, ref.image_id, "same", ws, ref, tgt, i, i))
    for _ in range(n_diff):
        i, j = (int(v) for v in rng.choice(idx, size=2, replace=False))
        ref, tgt = dataset.landmarks[i], dataset.landmarks[j]
        entries.append(BenchmarkEntry(ref.image_id, tgt.image_id, "diff", -1, ref, tgt, i, j))
    return MatchBenchmark(entries, tps_grid, tps_sigma)


def save_benchmark(path, bench):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["ref_id", "tgt_id", "pair_type", "warp_seed"])
        for e in bench.entries:
            wr.writerow([e.ref_id, e.tgt_id, e.pair_type, e.warp_seed])


def load_benchmark(path, dataset, tps_grid=5, tps_sigma=0.05):
    by_id = {lm.image_id: i for i, lm in enumerate(dataset.landmarks) if lm is not None}
    entries = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            i, j = by_id[row["ref_id"]], by_id[row["tgt_id"]]
            ws = int(row["warp_seed"])
            ref = dataset.landmarks[i]
            if row["pair_type"] == "same":
                _, tgt = _same_target(dataset, i, ws, tps_grid, tps_sigma)
            else:
                tgt = dataset.landmarks[j]
            entries.append(BenchmarkEntry(row["ref_id"], row["tgt_id"], row["pair_type"], ws, ref, tgt, i, j))
    return MatchBenchmark(entries, tps_grid, tps_sigma)


def pair_images(dataset, entry, bench):
    """(reference image, target image) for a benchmark entry."""
    from .geometry import apply_warp, make_tps_warp

    ref = dataset.images[entry.ref_index]
    if entry.pair_type == "same":
        warp = make_tps_warp(bench.tps_grid, bench.tps_sigma, ref.shape[:2], entry.warp_seed)
        return ref, apply_warp(ref, warp)
    return ref, dataset.images[entry.tgt_index]


def _grid_array(desc):
    data = desc.data if hasattr(desc, "data") and not torch.is_tensor(desc) else desc
    if torch.is_tensor(data):
        data = data.detach().cpu().numpy()
    return np.asarray(data, dtype=np.float64)


def match_landmarks(ref_desc, tgt_desc, ref_landmarks, image_size=None):
    """Nearest-neighbour (cosine) transfer of reference landmarks to the target.

    Descriptor grids are (S, S, C).  The query descriptor is bilinearly
    sampled at each visible reference landmark; the prediction is the centre
    (in image pixels) of the most similar target cell, ties going to the
    lowest row-major index.
    """
    from .backbone import grid_to_image, image_to_grid
    from ._pykernels import bilinear_sample

    ref = _grid_array(ref_desc)
    tgt = _grid_array(tgt_desc)
    if ref.shape[-1] != tgt.shape[-1]:
        raise InvalidArgument(f"channel mismatch {ref.shape[-1]} vs {tgt.shape[-1]}")
    grid = ref.shape[:2]
    if image_size is None:
        stride = getattr(ref_desc, "stride", 1)
        image_size = (grid[0] * stride, grid[1] * stride)
    vis = ref_landmarks.visible
    pts = np.full_like(ref_landmarks.points, np.nan)
    if vis.any():
        q = bilinear_sample(ref, image_to_grid(ref_landmarks.points[vis], image_size, grid))
        q /= np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
        t = tgt.reshape(-1, tgt.shape[-1])
        t = t / np.maximum(np.linalg.norm(t, axis=1, keepdims=True), 1e-12)
        best = np.argmax(q @ t.T, axis=1)
        cells = np.stack([best % tgt.shape[1], best // tgt.shape[1]], axis=1).astype(np.float64)
        pts[vis] = grid_to_image(cells, image_size, tgt.shape[:2])
    return LandmarkSet(pts, vis.copy(), ref_landmarks.image_id)


def mean_pixel_error(pred, gt):
    """Mean Euclidean error over landmarks visible in ``gt``."""
    if len(pred) != len(gt):
        raise InvalidArgument("landmark counts differ")
    vis = gt.visible
    if not vis.any():
        raise InvalidArgument("no visible landmarks")
    return float(np.linalg.norm(pred.points[vis] - gt.points[vis], axis=1).mean())


def evaluate_matching(extractor, dataset, bench, cache=None):
    """Mean pixel error per pair type; returns {"same": ..., "diff": ...}."""
    errs = {"same": [], "diff": []}
    cache = {} if cache is None else cache
    size = dataset.images.shape[1:3]

    def desc(key, image):
        if key not in cache:
            cache[key] = extractor.descriptors(image[None])[0].permute(1, 2, 0).numpy()
        return cache[key]

    for e in bench.entries:
        ref_img, tgt_img = pair_images(dataset, e, bench)
        rd = desc(("img", e.ref_index), ref_img)
        td = desc(("img", e.tgt_index), tgt_img) if e.pair_type == "diff" else desc(("warp", e.ref_index, e.warp_seed), tgt_img)
        pred = match_landmarks(rd, td, e.ref_landmarks, size)
        both = LandmarkSet(e.tgt_landmarks.points, e.tgt_landmarks.visible & pred.visible)
        if both.visible.any():
            errs[e.pair_type].append(mean_pixel_error(pred, both))
    return {k: float(np.mean(v)) if v else float("nan") for k, v in errs.items()}


# ---------------------------------------------------------------- soft-argmax


def soft_argmax(heatmap, beta=1.0):
    """Expected (x, y) cell coordinate under softmax(beta * heatmap).

    ``heatmap`` is (..., H, W); the result is (..., 2) in cell units with x
    the column index.
    """
    if beta <= 0:
        raise InvalidArgument("beta must be > 0")
    heatmap = torch.as_tensor(heatmap)
    if not torch.isfinite(heatmap).all():
        raise NumericError("non-finite heatmap")
    h, w = heatmap.shape[-2:]
    p = torch.softmax(beta * heatmap.reshape(*heatmap.shape[:-2], h * w), dim=-1)
    p = p.reshape(heatmap.shape)
    xs = torch.arange(w, dtype=heatmap.dtype)
    ys = torch.arange(h, dtype=heatmap.dtype)
    x = (p.sum(dim=-2) * xs).sum(dim=-1)
    y = (p.sum(dim=-1) * ys).sum(dim=-1)
    return torch.stack([x, y], dim=-1)


# ---------------------------------------------------------------- regressor


def regressor_param_count(C, K, L):
    return L * (K * (C + 5) + 2)


class LandmarkRegressor(nn.Module):
    """Per-landmark K 1x1 filters -> K soft-argmax points -> linear mixer.

    Coordinates are regressed in [-1, 1] (cell centres of the descriptor
    grid) and reported in image pixels.
    """

    def __init__(self, C, K, L, grid=48, image_size=(96, 96), beta=1.0, seed=0, dtype=torch.float32):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.C, self.K, self.L = C, K, L
        self.grid = grid
        self.image_size = tuple(image_size)
        self.beta = beta
        self.filters = nn.Parameter(torch.randn(L, K, C, generator=g, dtype=dtype) / math.sqrt(C))
        self.biases = nn.Parameter(torch.zeros(L, K, dtype=dtype))
        mix = torch.zeros(L, 2, 2 * K, dtype=dtype)
        mix[:, 0, 0::2] = 1.0 / K
        mix[:, 1, 1::2] = 1.0 / K
        mix += 0.01 * torch.randn(L, 2, 2 * K, generator=g, dtype=dtype) / math.sqrt(K)
        self.mixer_w = nn.Parameter(mix)
        self.mixer_b = nn.Parameter(torch.zeros(L, 2, dtype=dtype))

    @property
    def param_count(self):
        return sum(p.numel() for p in self.parameters())

    def heatmaps(self, desc):
        """(B, C, S, S) descriptors -> (B, L, K, S, S) heatmaps."""
        b, c, s1, s2 = desc.shape
        if c != self.C:
            raise InvalidArgument(f"descriptor channels {c} != regressor C {self.C}")
        w = self.filters.reshape(self.L * self.K, c)
        hm = torch.einsum("bchw,kc->bkhw", desc, w) + self.biases.reshape(1, -1, 1, 1)
        return hm.reshape(b, self.L, self.K, s1, s2)

    def heatmaps_from_pieces(self, pieces):
        """Same as ``heatmaps`` on the resized concatenation of ``pieces``.

        Each native-resolution piece is filtered first and then resized,
        which is cheaper and equal because bilinear resizing is linear with
        weights summing to one.
        """
        from .backbone import resize_nchw

        total = sum(p.shape[1] for p in pieces)
        if total != self.C:
            raise InvalidArgument(f"descriptor channels {total} != regressor C {self.C}")
        w = self.filters.reshape(self.L * self.K, self.C)
        off = 0
        hm = 0
        for p in pieces:
            c = p.shape[1]
            part = torch.einsum("bchw,kc->bkhw", p, w[:, off:off + c])
            hm = hm + resize_nchw(part, self.grid)
            off += c
        hm = hm + self.biases.reshape(1, -1, 1, 1)
        b = hm.shape[0]
        return hm.reshape(b, self.L, self.K, self.grid, self.grid)

    def mix(self, hm):
        s = hm.shape[-1]
        pts = soft_argmax(hm, self.beta)  # (B, L, K, 2) cell units
        pts = 2.0 * (pts + 0.5) / s - 1.0
        flat = pts.reshape(*pts.shape[:2], 2 * self.K)  # x1, y1, x2, y2, ...
        return torch.einsum("blk,lok->blo", flat, self.mixer_w) + self.mixer_b

    def forward(self, desc):
        """Normalised coordinates (B, L, 2) in [-1, 1]."""
        return self.mix(self.heatmaps(desc))

    def forward_pieces(self, pieces):
        return self.mix(self.heatmaps_from_pieces(pieces))

    def to_pixels(self, norm):
        h, w = self.image_size
        scale = torch.tensor([w, h], dtype=norm.dtype)
        return (norm + 1.0) / 2.0 * scale - 0.5

    def to_normalized(self, pix):
        h, w = self.image_size
        scale = torch.tensor([w, h], dtype=pix.dtype)
        return 2.0 * (pix + 0.5) / scale - 1.0


RegressorParams = LandmarkRegressor


def regressor_forward(desc, params):
    """Predicted landmark pixels for one (S, S, C) descriptor grid, shape (L, 2)."""
    data = desc.data if hasattr(desc, "source_block") else desc
    data = torch.as_tensor(data)
    if data.shape[-1] != params.C:
        raise InvalidArgument(f"descriptor channels {data.shape[-1]} != regressor C {params.C}")
    x = data.permute(2, 0, 1).unsqueeze(0).to(params.filters.dtype)
    return params.to_pixels(params(x))[0]


@dataclass
class RegressorConfig:
    K: int = 50
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 5e-4
    beta: float = 1.0
    augment_tps: bool = False
    tps_grid: int = 5
    tps_sigma: float = 0.05
    seed: int = 0


def _targets(landmarks, reg):
    pts = torch.tensor(np.stack([lm.points for lm in landmarks]), dtype=torch.float32)
    vis = torch.tensor(np.stack([lm.visible for lm in landmarks]), dtype=torch.float32)
    pts = torch.where(vis[..., None] > 0, pts, torch.zeros_like(pts))
    return reg.to_normalized(pts), vis


def _tps_augment(images, landmarks, cfg, rng):
    from .geometry import apply_warp, make_tps_warp, map_coords

    out_imgs, out_lms = [], []
    size = images.shape[1:3]
    for img, lm in zip(images, landmarks):
        warp = make_tps_warp(cfg.tps_grid, cfg.tps_sigma, size, int(rng.integers(2**31)))
        pts, ok = map_coords(warp, lm.points)
        out_imgs.append(apply_warp(img, warp))
        out_lms.append(LandmarkSet(pts, lm.visible & ok, lm.image_id))
    return np.stack(out_imgs), out_lms


def train_regressor(extractor, images, annotations, config=None, progress=None):
    """Fit a LandmarkRegressor on frozen descriptors by coordinate MSE.

    ``extractor`` supplies ``pieces(images)`` and ``channels``; descriptors
    are computed once unless TPS augmentation is on, in which case every
    epoch sees freshly warped images.
    """
    from .invariant import cosine_lr

    cfg = config or RegressorConfig()
    if len(annotations) == 0 or len(images) == 0:
        raise InvalidArgument("empty annotation set")
    images = np.asarray(images)
    L = len(annotations[0])
    reg = LandmarkRegressor(extractor.channels, cfg.K, L, extractor.grid, images.shape[1:3], cfg.beta, cfg.seed)
    opt = torch.optim.Adam(reg.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    n = len(images)
    bs = min(cfg.batch_size, n)
    steps = math.ceil(n / bs)
    total = steps * cfg.epochs
    pieces = None if cfg.augment_tps else extractor.pieces(images)
    tgt, vis = _targets(annotations, reg)
    step = 0
    for epoch in range(cfg.epochs):
        if cfg.augment_tps:
            aug_imgs, aug_lms = _tps_augment(images, annotations, cfg, rng)
            pieces = extractor.pieces(aug_imgs)
            tgt, vis = _targets(aug_lms, reg)
        order = torch.from_numpy(rng.permutation(n))
        total_loss = 0.0
        for s in range(steps):
            idx = order[s * bs:(s + 1) * bs]
            for g in opt.param_groups:
                g["lr"] = cosine_lr(step, total, cfg.lr)
            pred = reg.forward_pieces([p[idx] for p in pieces])
            err = ((pred - tgt[idx]) ** 2).sum(-1) * vis[idx]
            loss = err.sum() / vis[idx].sum().clamp(min=1.0)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total_loss += float(loss.detach()) * len(idx)
            step += 1
        if progress:
            progress({"epoch": epoch + 1, "loss": total_loss / n})
    return reg


@torch.no_grad()
def predict_landmarks(extractor, reg, images, batch_size=64):
    out = []
    for i in range(0, len(images), batch_size):
        pieces = extractor.pieces(images[i:i + batch_size])
        out.append(reg.to_pixels(reg.forward_pieces(pieces)))
    return torch.cat(out).numpy()


# ---------------------------------------------------------------- metrics


def _as_points(p):
    return p.points if isinstance(p, LandmarkSet) else np.asarray(p, dtype=np.float64)


def compute_metrics(preds, gts, image_size, metric="pck", eye_indices=(0, 1), alpha=0.05):
    """Inter-ocular error (%) or PCK (%) pooled over visible landmarks."""
    if isinstance(gts, LandmarkSet):
        preds, gts = [preds], [gts]
    vals = []
    for pred, gt in zip(preds, gts):
        p = _as_points(pred)
        vis = gt.visible
        err = np.linalg.norm(p[vis] - gt.points[vis], axis=1)
        if metric == "inter_ocular":
            iod = float(np.linalg.norm(gt.points[eye_indices[0]] - gt.points[eye_indices[1]]))
            if iod <= 0:
                raise InvalidArgument("zero inter-ocular distance")
            vals.append(err / iod * 100.0)
        elif metric == "pck":
            thr = alpha * max(image_size)
            vals.append((err <= thr) * 100.0)
        else:
            raise InvalidArgument(f"unknown metric {metric!r}")
    vals = np.concatenate(vals) if vals else np.array([])
    if vals.size == 0:
        raise InvalidArgument("no visible landmarks")
    return float(vals.mean())


def regression_metrics(extractor, reg, images, annotations, eye_indices=(0, 1), alpha=0.05):
    preds = predict_landmarks(extractor, reg, images)
    size = images.shape[1:3]
    return {
        "pck": compute_metrics(list(preds), annotations, size, "pck", alpha=alpha),
        "inter_ocular": compute_metrics(list(preds), annotations, size, "inter_ocular", eye_indices),
    }


def sweep_annotations(extractor, train, test, sizes, seeds=(0, 1, 2), config=None, eye_indices=(0, 1)):
    """Regression metrics for each annotation budget and seed.

    Returns rows ``{metric, value, n_annotations, seed}``.
    """
    cfg = config or RegressorConfig()
    rows = []
    for n in sizes:
        for seed in seeds:
            rng = np.random.default_rng([seed, n])
            idx = np.sort(rng.choice(len(train.images), size=min(n, len(train.images)), replace=False))
            run = RegressorConfig(**{**cfg.__dict__, "seed": seed})
            reg = train_regressor(extractor, train.images[idx], [train.landmarks[i] for i in idx], run)
            m = regression_metrics(extractor, reg, test.images, test.landmarks, eye_indices)
            for k, v in m.items():
                rows.append({"metric": k, "value": v, "n_annotations": int(n), "seed": int(seed)})
    return rows


def summarize_sweep(rows):
    """{(metric, n): (mean, std)} over seeds."""
    groups = {}
    for r in rows:
        groups.setdefault((r["metric"], r["n_annotations"]), []).append(r["value"])
    return {k: (float(np.mean(v)), float(np.std(v))) for k, v in groups.items()}


def write_results(path, rows):
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=["metric", "value", "n_annotations", "seed"])
        wr.writeheader()
        for r in rows:
            wr.writerow(r)


__all__ = [
    "LandmarkSet", "MatchBenchmark", "BenchmarkEntry", "LandmarkRegressor", "RegressorParams",
    "RegressorConfig", "build_matching_benchmark", "match_landmarks", "mean_pixel_error",
    "soft_argmax", "regressor_forward", "regressor_param_count", "train_regressor",
    "compute_metrics", "evaluate_matching", "sweep_annotations",
]
