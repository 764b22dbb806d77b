"""Five-stage residual backbone, per-block taps and hypercolumns."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidArgument

PRESETS = {
    # stage_channels, block type, blocks per residual stage
    "large": ([64, 256, 512, 1024, 2048], "bottleneck", [3, 4, 6, 3]),
    "half": ([32, 128, 256, 512, 1024], "bottleneck", [3, 4, 6, 3]),
    "small": ([16, 32, 64, 128, 256], "basic", [1, 1, 1, 1]),
}
BLOCK_IDS = (1, 2, 3, 4, 5)
DEFAULT_HYPERCOLUMN_BLOCKS = (2, 3, 4, 5)


def _norm(ch):
    # GroupNorm: no cross-sample statistics, so the contrastive task cannot
    # be solved through batch statistics and eval == train behaviour.
    return nn.GroupNorm(min(32, ch // 4) or 1, ch)


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.n1 = _norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.n2 = _norm(cout)
        self.short = None
        if stride != 1 or cin != cout:
            self.short = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), _norm(cout))

    def forward(self, x):
        out = F.relu(self.n1(self.conv1(x)))
        out = self.n2(self.conv2(out))
        return F.relu(out + (x if self.short is None else self.short(x)))


class Bottleneck(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        mid = cout // 4
        self.conv1 = nn.Conv2d(cin, mid, 1, bias=False)
        self.n1 = _norm(mid)
        self.conv2 = nn.Conv2d(mid, mid, 3, stride, 1, bias=False)
        self.n2 = _norm(mid)
        self.conv3 = nn.Conv2d(mid, cout, 1, bias=False)
        self.n3 = _norm(cout)
        self.short = None
        if stride != 1 or cin != cout:
            self.short = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), _norm(cout))

    def forward(self, x):
        out = F.relu(self.n1(self.conv1(x)))
        out = F.relu(self.n2(self.conv2(out)))
        out = self.n3(self.conv3(out))
        return F.relu(out + (x if self.short is None else self.short(x)))


class Backbone(nn.Module):
    """Residual network exposing its five stages.

    Stage k has cumulative stride 2**k, so a 96x96 input yields maps of
    48, 24, 12, 6 and 3 cells.  ``embed`` is the global head used for
    contrastive training (average pool + linear, L2-normalised).
    """

    def __init__(self, preset="small", embed_dim=128):
        super().__init__()
        if preset not in PRESETS:
            raise InvalidArgument(f"unknown backbone preset {preset!r}")
        channels, kind, depths = PRESETS[preset]
        self.preset = preset
        self.stage_channels = list(channels)
        self.stage_strides = [2, 4, 8, 16, 32]
        self.embed_dim = embed_dim
        block = Bottleneck if kind == "bottleneck" else BasicBlock
        self.stem = nn.Sequential(
            nn.Conv2d(3, channels[0], 7 if kind == "bottleneck" else 3, 2,
                      3 if kind == "bottleneck" else 1, bias=False),
            _norm(channels[0]),
            nn.ReLU(inplace=True),
        )
        stages = []
        cin = channels[0]
        for i, (cout, depth) in enumerate(zip(channels[1:], depths)):
            layers = []
            if i == 0 and kind == "bottleneck":
                layers.append(nn.MaxPool2d(3, 2, 1))
                first_stride = 1
            else:
                first_stride = 2
            for j in range(depth):
                layers.append(block(cin, cout, first_stride if j == 0 else 1))
                cin = cout
            stages.append(nn.Sequential(*layers))
        self.stages = nn.ModuleList(stages)
        self.head = nn.Linear(channels[-1], embed_dim)

    def forward_stages(self, x, upto=5):
        feats = [self.stem(x)]
        for stage in self.stages[: upto - 1]:
            feats.append(stage(feats[-1]))
        return feats

    def embed(self, x):
        x = self.forward_stages(x)[-1]
        x = x.mean(dim=(2, 3))
        return F.normalize(self.head(x), dim=1)

    def forward(self, x):
        return self.embed(x)


@dataclass
class FeatureMap:
    """Descriptor grid of shape (H', W', C)."""

    data: torch.Tensor
    source_block: int = 0
    stride: int = 1

    @property
    def shape(self):
        return tuple(self.data.shape)

    @property
    def channels(self):
        return self.data.shape[-1]


@dataclass
class Hypercolumn:
    """Per-cell concatenation of interpolated block features, shape (S, S, C)."""

    data: torch.Tensor
    blocks: list
    channel_offsets: list = field(default_factory=list)

    @property
    def channels(self):
        return self.data.shape[-1]

    @property
    def grid(self):
        return tuple(self.data.shape[:2])


def images_to_tensor(images, dtype=torch.float32):
    """(N, H, W, 3) or (H, W, 3) arrays in [0, 1] -> NCHW tensor."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def _check_blocks(block_ids):
    ids = sorted(set(int(b) for b in block_ids))
    for b in ids:
        if b not in BLOCK_IDS:
            raise InvalidArgument(f"unknown block id {b}")
    return ids


def forward_blocks(backbone, image, block_ids):
    """FeatureMaps for the requested blocks of a single image, ascending order."""
    ids = _check_blocks(block_ids)
    if not ids:
        return []
    x = image if torch.is_tensor(image) else images_to_tensor(image)
    if x.dim() == 3:
        x = x.unsqueeze(0)
    feats = backbone.forward_stages(x, upto=max(ids))
    return [
        FeatureMap(feats[b - 1][0].permute(1, 2, 0), b, backbone.stage_strides[b - 1])
        for b in ids
    ]


def block_maps(backbone, images, block_ids):
    """Batched block activations as NCHW tensors (no hypercolumn assembly)."""
    ids = _check_blocks(block_ids)
    feats = backbone.forward_stages(images, upto=max(ids))
    return [feats[b - 1] for b in ids]


def resize_nchw(x, grid):
    if tuple(x.shape[-2:]) == (grid, grid):
        return x
    return F.interpolate(x, size=(grid, grid), mode="bilinear", align_corners=False)


def build_hypercolumn(maps, grid=48):
    """Resize every FeatureMap to grid x grid and concatenate channels."""
    if not maps:
        raise InvalidArgument("no feature maps")
    parts = [resize_nchw(m.data.permute(2, 0, 1).unsqueeze(0), grid)[0] for m in maps]
    channels = [m.channels for m in maps]
    offsets = np.cumsum([0] + channels).tolist()
    data = torch.cat(parts, dim=0).permute(1, 2, 0)
    return Hypercolumn(data, [m.source_block for m in maps], offsets)


def hypercolumn_channels(stage_channels, blocks):
    return int(sum(stage_channels[b - 1] for b in _check_blocks(blocks)))


def image_to_grid(points, image_size, grid):
    """Pixel coordinates -> grid-cell coordinates (both pixel-centre)."""
    h, w = image_size
    gh, gw = grid
    pts = np.asarray(points, dtype=np.float64)
    return (pts + 0.5) * np.array([gw / w, gh / h]) - 0.5


def grid_to_image(points, image_size, grid):
    h, w = image_size
    gh, gw = grid
    pts = np.asarray(points, dtype=np.float64)
    return (pts + 0.5) * np.array([w / gw, h / gh]) - 0.5


def bilinear_at(data, x, y):
    """Differentiable bilinear sample of an (H, W, C) tensor at one float point."""
    h, w = data.shape[:2]
    x = min(max(float(x), 0.0), w - 1.0)
    y = min(max(float(y), 0.0), h - 1.0)
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    top = data[y0, x0] * (1 - fx) + data[y0, x1] * fx
    bot = data[y1, x0] * (1 - fx) + data[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def sample_descriptor(hc, u, image_size, normalize=False):
    """Descriptor at image point ``u = (x, y)`` by bilinear lookup on the grid."""
    h, w = image_size
    x, y = float(u[0]), float(u[1])
    if not (-0.5 <= x <= w - 0.5 and -0.5 <= y <= h - 0.5):
        raise InvalidArgument(f"point {u} outside image of size {image_size}")
    data = hc.data if isinstance(hc, (Hypercolumn, FeatureMap)) else hc
    gx, gy = image_to_grid([x, y], image_size, data.shape[:2])
    vec = bilinear_at(data, gx, gy)
    return F.normalize(vec, dim=0) if normalize else vec


class FeatureExtractor:
    """Frozen descriptor source: backbone blocks, optionally projected.

    ``pieces(images)`` returns the native-resolution block maps whose
    resized concatenation is the hypercolumn.  Linear heads can act on the
    pieces before resizing, which is exact because resizing is linear and
    its weights sum to one.
    """

    def __init__(self, backbone, blocks=DEFAULT_HYPERCOLUMN_BLOCKS, grid=48,
                 projector=None, batch_size=64):
        self.backbone = backbone.eval()
        self.blocks = _check_blocks(blocks)
        self.grid = grid
        self.projector = projector
        self.batch_size = batch_size
        self.block_channels = [backbone.stage_channels[b - 1] for b in self.blocks]

    @property
    def channels(self):
        if self.projector is not None:
            return self.projector.output_dim
        return sum(self.block_channels)

    @property
    def channel_offsets(self):
        return np.cumsum([0] + self.block_channels).tolist()

    @torch.no_grad()
    def pieces(self, images):
        x = images if torch.is_tensor(images) else images_to_tensor(images)
        outs = []
        for i in range(0, len(x), self.batch_size):
            maps = block_maps(self.backbone, x[i:i + self.batch_size], self.blocks)
            if self.projector is not None:
                maps = [self.projector.project_pieces(maps, self.grid)]
            outs.append(maps)
        return [torch.cat(parts, dim=0) for parts in zip(*outs)]

    @torch.no_grad()
    def descriptors(self, images):
        """(N, C, S, S) descriptor grids."""
        return torch.cat([resize_nchw(p, self.grid) for p in self.pieces(images)], dim=1)


__all__ = [
    "Backbone", "FeatureMap", "Hypercolumn", "FeatureExtractor", "PRESETS",
    "forward_blocks", "block_maps", "build_hypercolumn", "sample_descriptor",
    "hypercolumn_channels", "images_to_tensor", "image_to_grid", "grid_to_image",
]
