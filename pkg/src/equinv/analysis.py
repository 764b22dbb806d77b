"""Part distillation by NMF, uncentered PCA and a linear foreground probe."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import InvalidArgument

_EPS = 1e-12


@dataclass
class NmfFactors:
    W: np.ndarray  # (M, k)
    H: np.ndarray  # (k, C)
    recon_error_history: list = field(default_factory=list)

    @property
    def k(self):
        return self.H.shape[0]


def _fro(X, W, H):
    return float(np.linalg.norm(X - W @ H))


def nmf_factorize(X, k=6, iters=200, seed=0):
    """Nonnegative X ~ W H by Lee-Seung multiplicative updates.

    An update that would raise the Frobenius error (possible only through
    floating point) is rejected, so the recorded history never increases.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise InvalidArgument("X must be a 2-D array")
    if (X < 0).any():
        raise InvalidArgument("X has negative entries")
    if k < 1:
        raise InvalidArgument("k must be >= 1")
    rng = np.random.default_rng(seed)
    m, c = X.shape
    scale = np.sqrt(max(X.mean(), _EPS) / k)
    W = rng.uniform(0.1, 1.0, (m, k)) * scale
    H = rng.uniform(0.1, 1.0, (k, c)) * scale
    err = _fro(X, W, H)
    history = [err]
    for _ in range(iters):
        H_new = H * (W.T @ X) / (W.T @ W @ H + _EPS)
        W_new = W * (X @ H_new.T) / (W @ H_new @ H_new.T + _EPS)
        new_err = _fro(X, W_new, H_new)
        if new_err <= err:
            W, H, err = W_new, H_new, new_err
        history.append(err)
    return NmfFactors(W, H, history)


def nonneg_loadings(X, H, iters=1000, seed=0):
    """Per-row nonnegative coefficients A >= 0 minimising ||X - A H|| with H fixed."""
    X = np.asarray(X, dtype=np.float64)
    H = np.asarray(H, dtype=np.float64)
    if X.shape[1] != H.shape[1]:
        raise InvalidArgument(f"feature dim {X.shape[1]} != basis dim {H.shape[1]}")
    Xp = np.maximum(X, 0.0)
    HHt = H @ H.T
    XHt = Xp @ H.T
    A = np.full((X.shape[0], H.shape[0]), 1.0 / max(H.shape[0], 1))
    for _ in range(iters):
        A *= XHt / (A @ HHt + _EPS)
    return A


def _minmax(h):
    lo, hi = float(h.min()), float(h.max())
    if hi - lo > _EPS * max(1.0, abs(hi)):
        return (h - lo) / (hi - lo)
    return np.ones_like(h) if hi > 0 else np.zeros_like(h)


def part_heatmaps(hc, H, iters=1000):
    """(k, S, S) per-part loading maps, each min-max normalised to [0, 1]."""
    data = hc.data if hasattr(hc, "data") else hc
    if torch.is_tensor(data):
        data = data.detach().cpu().numpy()
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 3:
        raise InvalidArgument("expected an (S, S, C) descriptor grid")
    s1, s2, c = data.shape
    A = nonneg_loadings(data.reshape(-1, c), H, iters)
    maps = A.T.reshape(-1, s1, s2)
    return np.stack([_minmax(m) for m in maps])


@dataclass
class PcaBasis:
    components: np.ndarray  # (k, C) orthonormal rows
    singular_values: np.ndarray

    def project(self, X):
        return np.asarray(X) @ self.components.T


def pca_basis(X, k=4):
    """Top-k right singular vectors of X, no mean subtraction."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise InvalidArgument("X must be a 2-D array")
    if not 1 <= k <= min(X.shape):
        raise InvalidArgument(f"k={k} must be in [1, {min(X.shape)}]")
    _, s, vt = np.linalg.svd(X, full_matrices=False)
    comps = vt[:k].copy()
    # deterministic sign: largest-magnitude entry positive
    idx = np.argmax(np.abs(comps), axis=1)
    comps *= np.sign(comps[np.arange(k), idx])[:, None]
    return PcaBasis(comps, s[:k].copy())


def pca_images(grids, basis):
    """Project (N, S, S, C) grids onto the first three components, as RGB in [0, 1]."""
    grids = np.asarray(grids, dtype=np.float64)
    proj = grids @ basis.components[:3].T
    lo = proj.min(axis=(0, 1, 2), keepdims=True)
    hi = proj.max(axis=(0, 1, 2), keepdims=True)
    return (proj - lo) / np.maximum(hi - lo, _EPS)


def iou(pred, gt):
    """Intersection over union of two boolean masks; two empty masks score 1."""
    pred = np.asarray(pred, bool)
    gt = np.asarray(gt, bool)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


@dataclass
class ProbeConfig:
    epochs: int = 50
    lr: float = 1e-2
    weight_decay: float = 0.0
    batch_size: int = 16
    test_fraction: float = 0.25
    seed: int = 0


@dataclass
class SegmentationProbe:
    weight: torch.Tensor  # (C,)
    bias: torch.Tensor  # ()

    def logits(self, desc):
        return torch.einsum("bchw,c->bhw", desc, self.weight) + self.bias

    def predict(self, desc, size=None):
        logit = self.logits(desc)
        if size is not None and tuple(logit.shape[-2:]) != tuple(size):
            logit = torch.nn.functional.interpolate(logit[:, None], size=size, mode="bilinear",
                                                    align_corners=False)[:, 0]
        return (logit > 0).numpy()


def _mask_grid(masks, grid):
    t = torch.as_tensor(np.asarray(masks, dtype=np.float32))[:, None]
    return torch.nn.functional.interpolate(t, size=(grid, grid), mode="area")[:, 0]


def segmentation_probe(descriptors, masks, config=None):
    """1x1 logistic classifier on frozen (N, C, S, S) descriptors.

    Masks are (N, H, W) booleans.  The last ``test_fraction`` of images is
    held out; returns (probe, mean IoU on held-out images at mask resolution).
    """
    cfg = config or ProbeConfig()
    desc = torch.as_tensor(descriptors, dtype=torch.float32)
    masks = np.asarray(masks, bool)
    if len(masks) == 0 or len(desc) == 0:
        raise InvalidArgument("no annotated masks")
    if len(masks) != len(desc):
        raise InvalidArgument("descriptor and mask counts differ")
    n = len(masks)
    n_test = int(round(n * cfg.test_fraction)) if n > 1 else 0
    n_train = n - n_test
    train_idx = np.arange(n_train)
    test_idx = np.arange(n_train, n) if n_test else train_idx
    grid = desc.shape[-1]
    target = _mask_grid(masks, grid)
    # standardise channels with training statistics for a well-conditioned fit
    mu = desc[train_idx].mean(dim=(0, 2, 3))
    sd = desc[train_idx].std(dim=(0, 2, 3)).clamp(min=1e-6)
    z = (desc - mu[None, :, None, None]) / sd[None, :, None, None]
    g = torch.Generator().manual_seed(cfg.seed)
    w = torch.zeros(desc.shape[1], requires_grad=True)
    b = torch.zeros((), requires_grad=True)
    opt = torch.optim.Adam([w, b], lr=cfg.lr, weight_decay=cfg.weight_decay)
    bs = min(cfg.batch_size, n_train)
    for _ in range(cfg.epochs):
        order = torch.randperm(n_train, generator=g)
        for s in range(0, n_train, bs):
            idx = train_idx[order[s:s + bs].numpy()]
            logit = torch.einsum("bchw,c->bhw", z[idx], w) + b
            loss = torch.nn.functional.binary_cross_entropy_with_logits(logit, target[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    with torch.no_grad():
        weight = w / sd
        bias = b - (mu / sd * w).sum()
        probe = SegmentationProbe(weight.detach(), bias.detach())
        preds = probe.predict(desc[test_idx], masks.shape[1:])
    score = float(np.mean([iou(p, m) for p, m in zip(preds, masks[test_idx])]))
    return probe, score


__all__ = [
    "NmfFactors", "PcaBasis", "nmf_factorize", "part_heatmaps", "nonneg_loadings",
    "pca_basis", "pca_images", "segmentation_probe", "SegmentationProbe", "ProbeConfig", "iou",
]
