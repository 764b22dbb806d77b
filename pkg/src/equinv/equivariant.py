"""Dense equivariance losses and the location-wise linear projector."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import FeatureMap, Hypercolumn, resize_nchw
from .errors import InvalidArgument, NumericError
from .geometry import identity_warp

DEFAULT_TAU = 1.0 / 7.0


def _data(feat):
    if isinstance(feat, (FeatureMap, Hypercolumn)):
        return feat.data
    return torch.as_tensor(feat)


def _pair(feat_a, feat_b):
    a, b = _data(feat_a), _data(feat_b)
    if a.dim() != 3 or b.dim() != 3:
        raise InvalidArgument("feature maps must be (H, W, C)")
    if a.shape[-1] != b.shape[-1]:
        raise InvalidArgument(f"channel mismatch {a.shape[-1]} vs {b.shape[-1]}")
    return a, b.to(a.dtype)


def _cells(h, w, dtype=torch.float64):
    ys, xs = torch.meshgrid(torch.arange(h, dtype=dtype), torch.arange(w, dtype=dtype), indexing="ij")
    return torch.stack([xs.reshape(-1), ys.reshape(-1)], dim=1)


def _warp_arrays(warp, grid):
    fwd = np.asarray(warp.forward_map, dtype=np.float64)
    if fwd.shape[:2] != tuple(grid):
        raise InvalidArgument(f"warp grid {fwd.shape[:2]} does not match features {tuple(grid)}")
    mapped = fwd.reshape(-1, 2)
    valid = np.asarray(warp.valid_mask, bool).reshape(-1)
    if not valid.any():
        raise InvalidArgument("no valid locations under the warp")
    return mapped, valid


def bilinear_torch(data, points):
    """Differentiable clamped bilinear sampling of (H, W, C) at (N, 2) xy points."""
    h, w = data.shape[:2]
    pts = torch.as_tensor(points, dtype=data.dtype)
    x = pts[:, 0].clamp(0, w - 1)
    y = pts[:, 1].clamp(0, h - 1)
    x0 = x.floor().long().clamp(max=w - 1)
    y0 = y.floor().long().clamp(max=h - 1)
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    fx = (x - x0.to(data.dtype))[:, None]
    fy = (y - y0.to(data.dtype))[:, None]
    top = data[y0, x0] * (1 - fx) + data[y0, x1] * fx
    bot = data[y1, x0] * (1 - fx) + data[y1, x1] * fx
    return top * (1 - fy) + bot * fy


@dataclass
class MatchDistribution:
    probs: torch.Tensor  # (|grid_a|, |grid_b|), row-stochastic
    grid: tuple

    def row(self, u):
        return self.probs[u]

    @property
    def self_match(self):
        """p(u|u) per location (square case)."""
        return torch.diagonal(self.probs)


def match_logits(feat_a, feat_b, tau):
    a, b = _pair(feat_a, feat_b)
    if tau <= 0:
        raise InvalidArgument("tau must be > 0")
    a = F.normalize(a.reshape(-1, a.shape[-1]), dim=1)
    b = F.normalize(b.reshape(-1, b.shape[-1]), dim=1)
    return a @ b.T / tau


def match_distribution(feat_a, feat_b, tau=DEFAULT_TAU):
    """Softmax over target cells of cosine similarity / tau, one row per source cell."""
    logits = match_logits(feat_a, feat_b, tau)
    b = _data(feat_b)
    return MatchDistribution(torch.softmax(logits, dim=1), tuple(b.shape[:2]))


def loss_equi_mse(feat_a, feat_b, warp):
    """Mean squared descriptor difference between u and its warped position."""
    a, b = _pair(feat_a, feat_b)
    mapped, valid = _warp_arrays(warp, a.shape[:2])
    fa = a.reshape(-1, a.shape[-1])[torch.from_numpy(valid)]
    fb = bilinear_torch(b, mapped[valid])
    return ((fa - fb) ** 2).sum(dim=1).mean()


def loss_diversity_argmax(feat_a, feat_b, warp):
    """Mean squared grid distance between mapped and the hard best match of u.

    Uses raw inner products; ties go to the lowest row-major index.  Not
    differentiable.
    """
    a, b = _pair(feat_a, feat_b)
    mapped, valid = _warp_arrays(warp, a.shape[:2])
    sims = (a.reshape(-1, a.shape[-1]) @ b.reshape(-1, b.shape[-1]).T).detach().cpu().numpy()
    best = np.argmax(sims, axis=1)
    w = b.shape[1]
    v = np.stack([best % w, best // w], axis=1).astype(np.float64)
    d2 = ((mapped - v) ** 2).sum(axis=1)
    return float(d2[valid].mean())


def loss_equi_soft(feat_a, feat_b, warp, tau=DEFAULT_TAU, mean_over_u=False):
    """Expected grid distance between mapped and a soft match drawn from p(.|u).

    The sum over valid u is divided by |valid| * |grid|; ``mean_over_u``
    drops the extra 1/|grid| factor.
    """
    a, b = _pair(feat_a, feat_b)
    mapped, valid = _warp_arrays(warp, a.shape[:2])
    logits = match_logits(a, b, tau)
    mask = torch.from_numpy(valid)
    p = torch.softmax(logits[mask], dim=1)
    v = _cells(*b.shape[:2], dtype=p.dtype)
    dist = torch.cdist(torch.as_tensor(mapped[valid], dtype=p.dtype), v)
    total = (dist * p).sum()
    n_valid = int(valid.sum())
    denom = n_valid if mean_over_u else n_valid * v.shape[0]
    return total / denom


# ---------------------------------------------------------------- projector


@dataclass
class Projector:
    weights: torch.Tensor  # (C, d)
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        self.weights = torch.as_tensor(self.weights)
        if self.weights.dim() != 2:
            raise InvalidArgument("weights must be a (C, d) matrix")
        if self.output_dim >= self.input_dim:
            raise InvalidArgument(f"d={self.output_dim} must be smaller than C={self.input_dim}")
        if not torch.isfinite(self.weights).all():
            raise NumericError("non-finite projector weights")
        if self.tau <= 0:
            raise InvalidArgument("tau must be > 0")

    @property
    def input_dim(self):
        return int(self.weights.shape[0])

    @property
    def output_dim(self):
        return int(self.weights.shape[1])

    @classmethod
    def random(cls, C, d, seed=0, tau=DEFAULT_TAU):
        g = torch.Generator().manual_seed(seed)
        return cls(torch.randn(C, d, generator=g) / math.sqrt(C), tau)

    def project_pieces(self, maps, grid):
        """Project native-resolution NCHW block maps and resize to ``grid``."""
        total = sum(m.shape[1] for m in maps)
        if total != self.input_dim:
            raise InvalidArgument(f"input channels {total} != projector C {self.input_dim}")
        return _project_pieces(maps, self.weights, grid)


def _project_pieces(maps, weights, grid):
    out = 0
    off = 0
    for m in maps:
        c = m.shape[1]
        part = torch.einsum("bchw,cd->bdhw", m, weights[off:off + c].to(m.dtype))
        out = out + resize_nchw(part, grid)
        off += c
    return out


def project_features(hc, proj):
    """Apply w^T at every location of an (S, S, C) descriptor grid."""
    data = _data(hc)
    if data.shape[-1] != proj.input_dim:
        raise InvalidArgument(f"hypercolumn has {data.shape[-1]} channels, projector expects {proj.input_dim}")
    out = data @ proj.weights.to(data.dtype)
    block = hc.source_block if isinstance(hc, FeatureMap) else 0
    stride = hc.stride if isinstance(hc, FeatureMap) else 1
    return FeatureMap(out, block, stride)


@dataclass
class ProjectorConfig:
    proj_dim: int = 64
    proj_tau: float = DEFAULT_TAU
    proj_epochs: int = 10
    proj_lr: float = 1e-3
    proj_wd: float = 5e-4
    mean_over_u: bool = False
    batch_size: int = 16
    queries: int = 256  # query cells sampled per image and step; 0 = all
    seed: int = 0


def _self_soft_loss(desc, cells, query_idx, tau, mean_over_u):
    """Batched soft loss with x' = x and identity warp.

    ``desc`` is (B, d, S, S); rows for the query cells attend over all cells.
    """
    b, d, s1, s2 = desc.shape
    flat = F.normalize(desc.reshape(b, d, s1 * s2), dim=1)
    q = flat[:, :, query_idx]
    logits = torch.einsum("bdq,bdn->bqn", q, flat) / tau
    p = torch.softmax(logits, dim=2)
    dist = torch.cdist(cells[query_idx], cells)
    per_u = (p * dist[None]).sum(dim=2)
    loss = per_u.mean()
    return loss if mean_over_u else loss / (s1 * s2)


def self_match_probability(desc, tau=DEFAULT_TAU):
    """Mean p(u|u) of (B, d, S, S) descriptors matched against themselves."""
    b, d, s1, s2 = desc.shape
    flat = F.normalize(desc.reshape(b, d, -1), dim=1)
    vals = []
    for i in range(b):
        p = torch.softmax(flat[i].T @ flat[i] / tau, dim=1)
        vals.append(torch.diagonal(p).mean())
    return float(torch.stack(vals).mean())


def train_projector(extractor, images, d=None, config=None, progress=None):
    """Learn w on frozen hypercolumns so each location matches only itself.

    The objective is the soft equivariance loss of an image against itself
    under the identity warp; all other cells of the same image act as
    negatives.
    """
    from .invariant import cosine_lr

    cfg = config or ProjectorConfig()
    d = cfg.proj_dim if d is None else d
    C = extractor.channels
    if d < 2:
        raise InvalidArgument("d must be >= 2")
    if d >= C:
        raise InvalidArgument(f"d={d} must be smaller than C={C}")
    if extractor.projector is not None:
        raise InvalidArgument("extractor already carries a projector")
    images = np.asarray(images)
    if len(images) == 0:
        raise InvalidArgument("no images")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    w = Projector.random(C, d, cfg.seed, cfg.proj_tau).weights.clone().requires_grad_(True)
    opt = torch.optim.Adam([w], lr=cfg.proj_lr, weight_decay=cfg.proj_wd)
    pieces = extractor.pieces(images)
    grid = extractor.grid
    cells = _cells(grid, grid, dtype=torch.float32)
    n_cells = grid * grid
    nq = n_cells if cfg.queries <= 0 else min(cfg.queries, n_cells)
    n = len(images)
    bs = min(cfg.batch_size, n)
    steps = math.ceil(n / bs)
    total = steps * cfg.proj_epochs
    step = 0
    history = []
    for epoch in range(cfg.proj_epochs):
        order = torch.from_numpy(rng.permutation(n))
        acc = 0.0
        for s in range(steps):
            idx = order[s * bs:(s + 1) * bs]
            q_idx = torch.from_numpy(np.sort(rng.choice(n_cells, size=nq, replace=False)))
            for g in opt.param_groups:
                g["lr"] = cosine_lr(step, total, cfg.proj_lr)
            desc = _project_pieces([p[idx] for p in pieces], w, grid)
            loss = _self_soft_loss(desc, cells, q_idx, cfg.proj_tau, cfg.mean_over_u)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite projector loss at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            acc += float(loss.detach()) * len(idx)
            step += 1
        history.append(acc / n)
        if progress:
            progress({"epoch": epoch + 1, "loss": acc / n})
    proj = Projector(w.detach().clone(), cfg.proj_tau)
    proj.history = history
    return proj


def identity_grid_warp(grid):
    return identity_warp(grid)


__all__ = [
    "Projector", "ProjectorConfig", "MatchDistribution", "match_distribution",
    "loss_equi_mse", "loss_diversity_argmax", "loss_equi_soft", "project_features",
    "train_projector", "self_match_probability", "bilinear_torch",
]
