"""Instance-discriminative contrastive pretraining with a momentum encoder."""
from __future__ import annotations

import copy
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import Backbone, images_to_tensor
from .errors import InvalidArgument, NumericError
from .geometry import TransformPolicy, sample_view_pair

log = logging.getLogger(__name__)

WARM_EPOCH = 1 << 20  # view-seed tag for the queue warm-up pass


@dataclass
class PretrainConfig:
    epochs: int = 20
    batch_size: int = 32
    queue_size: int = 512
    momentum_m: float = 0.999
    tau_nce: float = 0.07
    base_lr: float = 0.03
    scale_lr_by_batch: bool = True
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    exclude_positive: bool = False
    warm_queue: bool = True
    backbone: str = "small"
    embed_dim: int = 128
    seed: int = 0

    @property
    def lr(self):
        return self.base_lr * (self.batch_size / 256.0 if self.scale_lr_by_batch else 1.0)


@dataclass
class EncoderState:
    """Query/key parameters, momentum and the FIFO negative queue."""

    query_params: dict
    key_params: dict
    momentum: float
    queue: torch.Tensor
    queue_head: int = 0
    tau: float = 0.07

    def __post_init__(self):
        if set(self.query_params) != set(self.key_params):
            raise InvalidArgument("query and key parameter names differ")
        for name, q in self.query_params.items():
            if tuple(q.shape) != tuple(self.key_params[name].shape):
                raise InvalidArgument(f"shape mismatch for {name}")
        if not 0.0 <= self.momentum <= 1.0:
            raise InvalidArgument("momentum must lie in [0, 1]")
        if not 0 <= self.queue_head < max(len(self.queue), 1):
            raise InvalidArgument("queue_head out of range")

    @classmethod
    def from_modules(cls, query, key, queue, momentum, tau, head=0):
        # shares storage with the modules so in-place updates reach them
        return cls(
            {n: p.data for n, p in query.named_parameters()},
            {n: p.data for n, p in key.named_parameters()},
            momentum, queue, head, tau,
        )


def _check_finite(*tensors):
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NumericError("non-finite input to contrastive loss")


def info_nce_loss(q, k_pos, negatives, tau, exclude_positive=False):
    """InfoNCE loss of query ``q`` against key ``k_pos`` and queued negatives.

    Accepts single vectors (D,) or batches (B, D); batched input returns the
    batch mean.  By default the positive appears in the denominator; with
    ``exclude_positive`` only the negatives do.
    """
    if tau <= 0:
        raise InvalidArgument("tau must be > 0")
    q = torch.as_tensor(q)
    k_pos = torch.as_tensor(k_pos, dtype=q.dtype)
    negatives = torch.as_tensor(negatives, dtype=q.dtype)
    _check_finite(q, k_pos, negatives)
    if q.dim() == 1:
        q, k_pos = q[None], k_pos[None]
    l_pos = (q * k_pos).sum(dim=1, keepdim=True) / tau
    l_neg = q @ negatives.T / tau
    if exclude_positive:
        loss = torch.logsumexp(l_neg, dim=1) - l_pos[:, 0]
    else:
        logits = torch.cat([l_pos, l_neg], dim=1)
        loss = torch.logsumexp(logits, dim=1) - l_pos[:, 0]
    return loss.mean()


def _blend(k, q, m):
    return m * k + (1.0 - m) * q


def momentum_update(state, inplace=False):
    """theta_k <- m * theta_k + (1 - m) * theta_q."""
    m = state.momentum
    if inplace:
        with torch.no_grad():
            for name, k in state.key_params.items():
                q = state.query_params[name]
                if torch.is_tensor(k):
                    k.mul_(m).add_(q, alpha=1.0 - m)
                else:
                    k *= m
                    k += (1.0 - m) * q
        return state
    new_k = {n: _blend(k, state.query_params[n], m) for n, k in state.key_params.items()}
    return EncoderState(dict(state.query_params), new_k, m, state.queue, state.queue_head, state.tau)


def queue_enqueue(state, keys, inplace=False):
    """Overwrite ``len(keys)`` rows starting at the head; head advances mod N."""
    n = len(state.queue)
    b = len(keys)
    if b > n:
        raise InvalidArgument(f"cannot enqueue {b} keys into a queue of {n}")
    if b == 0:
        return state
    queue = state.queue if inplace else state.queue.clone()
    idx = (state.queue_head + torch.arange(b)) % n
    with torch.no_grad():
        queue[idx] = torch.as_tensor(keys, dtype=queue.dtype)
    head = (state.queue_head + b) % n
    if inplace:
        state.queue_head = head
        return state
    return EncoderState(state.query_params, state.key_params, state.momentum, queue, head, state.tau)


def cosine_lr(step, total_steps, base_lr):
    if total_steps <= 0:
        raise InvalidArgument("total_steps must be > 0")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def num_workers():
    """Data-pipeline worker cap from LMK_NUM_WORKERS (0 = single-worker)."""
    try:
        return max(0, int(os.environ.get("LMK_NUM_WORKERS", "0")))
    except ValueError:
        return 0


@dataclass
class PretrainResult:
    query: Backbone
    key: Backbone
    state: EncoderState
    metrics: list
    config: PretrainConfig


def _view_seed(seed, epoch, index, which):
    return int(np.random.SeedSequence([seed, epoch, index, which]).generate_state(1)[0])


def _make_views(images, idx, seed, epoch, policy, pool):
    def one(i):
        a = sample_view_pair(images[i], policy, _view_seed(seed, epoch, int(i), 0)).view_b
        b = sample_view_pair(images[i], policy, _view_seed(seed, epoch, int(i), 1)).view_b
        return a, b

    pairs = list(pool.map(one, idx)) if pool is not None else [one(i) for i in idx]
    qs = images_to_tensor(np.stack([p[0] for p in pairs]))
    ks = images_to_tensor(np.stack([p[1] for p in pairs]))
    return qs, ks


def pretrain(images, config=None, seed=None, policy=None, out_dir=None, progress=None):
    """Momentum-contrast pretraining on an (N, H, W, 3) image array.

    Each step draws two random views per image, encodes them with the query
    and key encoders, applies InfoNCE against the queue, takes an SGD step
    on the query encoder, updates the key encoder by momentum and enqueues
    the keys.  Returns a PretrainResult with per-epoch metrics.
    """
    config = config or PretrainConfig()
    seed = config.seed if seed is None else seed
    policy = policy or TransformPolicy()
    images = np.asarray(images)
    if len(images) == 0:
        raise InvalidArgument("empty dataset")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)

    query = Backbone(config.backbone, config.embed_dim)
    key = copy.deepcopy(query)
    for p in key.parameters():
        p.requires_grad_(False)
    g = torch.Generator().manual_seed(seed)
    queue = F.normalize(torch.randn(config.queue_size, config.embed_dim, generator=g), dim=1)
    state = EncoderState.from_modules(query, key, queue, config.momentum_m, config.tau_nce)
    workers = num_workers()
    pool = ThreadPoolExecutor(workers) if workers > 0 else None
    if config.warm_queue:
        _warm_queue(state, key, images, seed, policy, pool, config.batch_size)

    opt = torch.optim.SGD(query.parameters(), lr=config.lr, momentum=config.sgd_momentum,
                          weight_decay=config.weight_decay)
    bs = min(config.batch_size, len(images))
    steps_per_epoch = max(1, len(images) // bs)
    total = steps_per_epoch * config.epochs
    metrics = []
    step = 0
    try:
        for epoch in range(config.epochs):
            order = rng.permutation(len(images))
            losses = []
            lr = config.lr
            for s in range(steps_per_epoch):
                idx = order[s * bs:(s + 1) * bs]
                xq, xk = _make_views(images, idx, seed, epoch, policy, pool)
                lr = cosine_lr(step, total, config.lr)
                for group in opt.param_groups:
                    group["lr"] = lr
                q = query(xq)
                with torch.no_grad():
                    k = key(xk)
                try:
                    loss = info_nce_loss(q, k, state.queue.detach(), config.tau_nce, config.exclude_positive)
                except NumericError:
                    loss = torch.tensor(float("nan"))
                if not torch.isfinite(loss):
                    _dump_diagnostics(out_dir, epoch, step, loss, q, k)
                    raise NumericError(f"non-finite loss at epoch {epoch} step {step}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                momentum_update(state, inplace=True)
                queue_enqueue(state, k.detach(), inplace=True)
                losses.append(float(loss.detach()))
                step += 1
            row = {"epoch": epoch + 1, "loss_mean": float(np.mean(losses)), "lr": lr}
            metrics.append(row)
            log.info("epoch %d loss %.4f lr %.5f", row["epoch"], row["loss_mean"], lr)
            if progress:
                progress(row)
    finally:
        if pool is not None:
            pool.shutdown()
    return PretrainResult(query, key, state, metrics, config)


@torch.no_grad()
def _warm_queue(state, key, images, seed, policy, pool, batch_size):
    """Fill the queue with key embeddings of real views before training.

    Without this the first epoch contrasts against random unit vectors,
    which are far easier negatives than the real keys that replace them.
    """
    n = len(state.queue)
    order = np.random.default_rng([seed, 1]).permutation(len(images))
    order = np.resize(order, n)
    for s in range(0, n, batch_size):
        idx = order[s:s + batch_size]
        _, xk = _make_views(images, idx, seed, WARM_EPOCH, policy, pool)
        queue_enqueue(state, key(xk), inplace=True)


def _dump_diagnostics(out_dir, epoch, step, loss, q, k):
    if out_dir is None:
        return
    path = Path(out_dir) / "diagnostics.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({
        "epoch": epoch, "step": step, "loss": float(loss),
        "q_finite": bool(torch.isfinite(q).all()), "k_finite": bool(torch.isfinite(k).all()),
        "q_norm_max": float(q.detach().norm(dim=1).max()),
    }, indent=2))


def config_dict(config):
    return asdict(config)
