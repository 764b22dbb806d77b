"""Geometric and photometric views with exact pixel correspondences.

Coordinates are ``(x, y)`` pairs in pixel units using the pixel-centre
convention: ``(0, 0)`` is the centre of the top-left pixel and an image of
size ``(H, W)`` spans ``[-0.5, W - 0.5] x [-0.5, H - 0.5]``.  Sizes are
always ``(H, W)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft
from scipy import ndimage

from . import kernels
from .errors import GenerationFailure, InvalidArgument

MIN_VALID_FRACTION = 0.5
MAX_DRAWS = 100
MIN_TPS_DET = 0.2


@dataclass
class WarpField:
    """Dense coordinate map g from a source image onto a target image.

    ``forward_map[y, x]`` holds g(x, y) in target pixels; ``valid_mask`` is
    true where that lands inside the target.  ``inverse_map`` is the dense
    map from target pixels back to the source and is what ``apply_warp``
    samples with.
    """

    forward_map: np.ndarray
    valid_mask: np.ndarray
    source_size: tuple
    target_size: tuple
    inverse_map: np.ndarray | None = None
    inverse_mask: np.ndarray | None = None

    @property
    def valid_fraction(self):
        return float(self.valid_mask.mean())


@dataclass
class PhotometricParams:
    brightness: float = 0.0
    contrast: float = 0.0
    saturation: float = 0.0
    hue: float = 0.0
    blur_sigma: float = 0.0
    noise_quality: int = 100

    def __post_init__(self):
        for name in ("brightness", "contrast", "saturation", "hue", "blur_sigma"):
            if getattr(self, name) < 0:
                raise InvalidArgument(f"{name} must be >= 0")
        if not 1 <= int(self.noise_quality) <= 100:
            raise InvalidArgument("noise_quality must be in [1, 100]")

    @property
    def is_identity(self):
        return (
            self.brightness == 0 and self.contrast == 0 and self.saturation == 0
            and self.hue == 0 and self.blur_sigma == 0 and self.noise_quality == 100
        )


@dataclass
class TransformPolicy:
    """Random view policy; field names double as config keys."""

    crop_scale_min: float = 0.5
    crop_scale_max: float = 1.0
    crop_ratio_min: float = 3.0 / 4.0
    crop_ratio_max: float = 4.0 / 3.0
    tps_enabled: bool = False
    tps_grid: int = 5
    tps_sigma: float = 0.05
    jitter_brightness: float = 0.4
    jitter_contrast: float = 0.4
    jitter_saturation: float = 0.4
    jitter_hue: float = 0.1
    blur_sigma_max: float = 0.0
    jpeg_quality_min: int = 60

    @classmethod
    def identity(cls):
        return cls(
            crop_scale_min=1.0, crop_scale_max=1.0, crop_ratio_min=1.0, crop_ratio_max=1.0,
            tps_enabled=False, tps_sigma=0.0, jitter_brightness=0.0, jitter_contrast=0.0,
            jitter_saturation=0.0, jitter_hue=0.0, blur_sigma_max=0.0, jpeg_quality_min=100,
        )


@dataclass
class ViewPair:
    view_a: np.ndarray
    view_b: np.ndarray
    warp_ab: WarpField
    photometric_b: PhotometricParams
    seed: int
    jitter: dict = field(default_factory=dict)


# ---------------------------------------------------------------- warps


def _check_size(size):
    h, w = (int(s) for s in size)
    if h <= 0 or w <= 0:
        raise InvalidArgument(f"size must be positive, got {size}")
    return h, w


def pixel_grid(size):
    """All pixel centres of an ``(H, W)`` image as an (H*W, 2) array, row-major."""
    h, w = size
    ys, xs = np.mgrid[0:h, 0:w]
    return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)


def in_bounds(points, size):
    h, w = size
    x, y = points[:, 0], points[:, 1]
    return (x >= 0.0) & (x <= w - 1.0) & (y >= 0.0) & (y <= h - 1.0)


def _dense(fn, size):
    pts = fn(pixel_grid(size))
    return pts.reshape(size[0], size[1], 2)


def warp_from_functions(forward_fn, inverse_fn, source_size, target_size):
    """Build a WarpField by densely evaluating two point maps."""
    source_size = _check_size(source_size)
    target_size = _check_size(target_size)
    fwd = _dense(forward_fn, source_size)
    inv = _dense(inverse_fn, target_size)
    return WarpField(
        forward_map=fwd,
        valid_mask=in_bounds(fwd.reshape(-1, 2), target_size).reshape(source_size),
        source_size=source_size,
        target_size=target_size,
        inverse_map=inv,
        inverse_mask=in_bounds(inv.reshape(-1, 2), source_size).reshape(target_size),
    )


def identity_warp(size):
    size = _check_size(size)
    grid = pixel_grid(size).reshape(size[0], size[1], 2)
    return WarpField(grid, np.ones(size, bool), size, size, grid.copy(), np.ones(size, bool))


def translation_warp(size, shift):
    """u -> u + shift on an image of ``size``."""
    shift = np.asarray(shift, dtype=np.float64)
    return warp_from_functions(lambda p: p + shift, lambda p: p - shift, size, size)


def crop_resize_warp(source_size, box, target_size):
    """Warp that crops ``box`` = (left, top, right, bottom) and resizes it.

    The box is in pixel-edge units, so the full image is
    ``(-0.5, -0.5, W - 0.5, H - 0.5)``.
    """
    source_size = _check_size(source_size)
    target_size = _check_size(target_size)
    left, top, right, bottom = (float(b) for b in box)
    if right <= left or bottom <= top:
        raise InvalidArgument(f"empty crop box {box}")
    h, w = source_size
    th, tw = target_size
    if (left, top, right, bottom) == (-0.5, -0.5, w - 0.5, h - 0.5) and source_size == target_size:
        return identity_warp(source_size)
    scale = np.array([tw / (right - left), th / (bottom - top)])
    origin = np.array([left, top])

    def fwd(p):
        return (p - origin) * scale - 0.5

    def inv(p):
        return (p + 0.5) / scale + origin

    return warp_from_functions(fwd, inv, source_size, target_size)


def _lookup(field_map, mask, points, target_size):
    """Bilinear lookup of a dense coordinate field at float points."""
    h, w = field_map.shape[:2]
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    inside = in_bounds(points, (h, w))
    stacked = np.concatenate([field_map, mask[..., None].astype(np.float64)], axis=2)
    vals = kernels.bilinear_sample(stacked, points)
    out = vals[:, :2]
    ok = inside & (vals[:, 2] >= 1.0 - 1e-9) & in_bounds(out, target_size)
    return out, ok


def map_coords(warp, points):
    """Map source points through ``warp``; returns (points, validity flags)."""
    return _lookup(warp.forward_map, warp.valid_mask, points, warp.target_size)


def inverse_map_coords(warp, points):
    """Map target points back to the source."""
    if warp.inverse_map is None:
        raise InvalidArgument("warp has no inverse map")
    return _lookup(warp.inverse_map, warp.inverse_mask, points, warp.source_size)


def compose_warps(first, second):
    """The warp ``second o first`` (apply ``first``, then ``second``)."""
    if tuple(first.target_size) != tuple(second.source_size):
        raise InvalidArgument("warp sizes do not chain")
    fwd, ok = map_coords(second, first.forward_map.reshape(-1, 2))
    fwd_mask = ok.reshape(first.source_size) & first.valid_mask
    inv = inv_mask = None
    if first.inverse_map is not None and second.inverse_map is not None:
        inv, iok = inverse_map_coords(first, second.inverse_map.reshape(-1, 2))
        inv = inv.reshape(*second.target_size, 2)
        inv_mask = iok.reshape(second.target_size) & second.inverse_mask
    return WarpField(
        fwd.reshape(*first.source_size, 2), fwd_mask, first.source_size,
        second.target_size, inv, inv_mask,
    )


def resize_warp(warp, source_grid, target_grid=None):
    """Re-express a pixel-level warp on coarser feature grids.

    Grid cell centres are mapped to image pixels, pushed through the warp and
    mapped back into target-grid cell coordinates.
    """
    target_grid = target_grid or source_grid
    sh, sw = warp.source_size
    th, tw = warp.target_size
    gs = np.array([source_grid[1] / sw, source_grid[0] / sh])
    gt = np.array([target_grid[1] / tw, target_grid[0] / th])
    cells = pixel_grid(source_grid)
    pix = (cells + 0.5) / gs - 0.5
    inside = in_bounds(pix, warp.source_size)
    mapped, ok = map_coords(warp, np.clip(pix, 0, [sw - 1, sh - 1]))
    grid_pts = (mapped + 0.5) * gt - 0.5
    ok &= inside & in_bounds(grid_pts, target_grid)
    return WarpField(
        grid_pts.reshape(*source_grid, 2), ok.reshape(source_grid),
        tuple(source_grid), tuple(target_grid),
    )


# ---------------------------------------------------------------- TPS


def _tps_kernel(r2):
    safe = np.where(r2 > 0, r2, 1.0)
    return np.where(r2 > 0, 0.5 * r2 * np.log(safe), 0.0)


def fit_tps(src, dst):
    """Fit TPS coefficients mapping ``src`` control points onto ``dst``.

    Returns ``(weights (M, 2), affine (3, 2))`` for ``kernels.tps_eval``.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    m = len(src)
    d = src[:, None, :] - src[None, :, :]
    k = _tps_kernel(np.einsum("ijk,ijk->ij", d, d))
    p = np.hstack([np.ones((m, 1)), src])
    a = np.zeros((m + 3, m + 3))
    a[:m, :m] = k
    a[:m, m:] = p
    a[m:, :m] = p.T
    rhs = np.zeros((m + 3, 2))
    rhs[:m] = dst
    sol = np.linalg.solve(a, rhs)
    return sol[:m], sol[m:]


class ThinPlateSpline:
    """TPS map fitted in coordinates normalised by the image side."""

    def __init__(self, src, dst, scale):
        self.scale = float(scale)
        self.ctrl = np.asarray(src, dtype=np.float64) / self.scale
        self.weights, self.affine = fit_tps(self.ctrl, np.asarray(dst, dtype=np.float64) / self.scale)

    def __call__(self, points):
        vals, _ = kernels.tps_eval(np.asarray(points, dtype=np.float64) / self.scale,
                                   self.ctrl, self.weights, self.affine)
        return vals * self.scale

    def with_jacobian(self, points):
        vals, jac = kernels.tps_eval(np.asarray(points, dtype=np.float64) / self.scale,
                                     self.ctrl, self.weights, self.affine)
        return vals * self.scale, jac


def invert_map(fn, initial, targets, iters=20, tol=1e-6):
    """Solve fn(p) = targets by Newton's method from ``initial``.

    ``fn`` must return (values, jacobian).  Returns (points, converged).
    """
    p = np.array(initial, dtype=np.float64)
    for _ in range(iters):
        val, jac = fn(p)
        res = val - targets
        if np.all(np.abs(res) < tol):
            break
        det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
        det = np.where(np.abs(det) > 1e-12, det, 1e-12)
        dx = (jac[:, 1, 1] * res[:, 0] - jac[:, 0, 1] * res[:, 1]) / det
        dy = (-jac[:, 1, 0] * res[:, 0] + jac[:, 0, 0] * res[:, 1]) / det
        p[:, 0] -= dx
        p[:, 1] -= dy
    val, _ = fn(p)
    return p, np.all(np.abs(val - targets) < 1e-3, axis=1)


def _min_jacobian_det(fmap):
    fx = np.gradient(fmap, axis=1)
    fy = np.gradient(fmap, axis=0)
    return float((fx[..., 0] * fy[..., 1] - fx[..., 1] * fy[..., 0]).min())


def tps_warp_from_controls(src, dst, size, min_det=None):
    """Warp whose forward map is the TPS interpolating ``src -> dst``.

    The inverse map is solved densely with Newton iterations, so image
    sampling and point mapping agree to well under a pixel.  With
    ``min_det`` set, returns None when the map folds (local Jacobian
    determinant below ``min_det``).
    """
    size = _check_size(size)
    scale = max(size)
    fwd = ThinPlateSpline(src, dst, scale)
    src_pts = pixel_grid(size)
    fmap = fwd(src_pts)
    if min_det is not None and _min_jacobian_det(fmap.reshape(*size, 2)) < min_det:
        return None
    approx_inv = ThinPlateSpline(dst, src, scale)
    tgt_pts = pixel_grid(size)
    inv, ok = invert_map(fwd.with_jacobian, approx_inv(tgt_pts), tgt_pts)
    inv_mask = ok & in_bounds(inv, size)
    return WarpField(
        forward_map=fmap.reshape(*size, 2),
        valid_mask=in_bounds(fmap, size).reshape(size),
        source_size=size,
        target_size=size,
        inverse_map=inv.reshape(*size, 2),
        inverse_mask=inv_mask.reshape(size),
    )


def tps_control_grid(grid, size):
    gy, gx = (grid, grid) if np.isscalar(grid) else grid
    h, w = size
    xs, ys = np.meshgrid(np.linspace(0, w - 1, int(gx)), np.linspace(0, h - 1, int(gy)))
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


def make_tps_warp(grid, sigma, size, seed):
    """Random TPS warp: control points jittered with std ``sigma`` x side."""
    size = _check_size(size)
    gy, gx = (grid, grid) if np.isscalar(grid) else grid
    if gy < 2 or gx < 2:
        raise InvalidArgument("TPS grid must be at least 2x2")
    if sigma < 0:
        raise InvalidArgument("sigma must be >= 0")
    if sigma == 0:
        return identity_warp(size)
    rng = np.random.default_rng(seed)
    src = tps_control_grid((gy, gx), size)
    h, w = size
    # folded draws are not invertible; redraw from the same stream
    for _ in range(MAX_DRAWS):
        disp = rng.normal(0.0, sigma, size=src.shape) * np.array([w, h])
        warp = tps_warp_from_controls(src, src + disp, size, min_det=MIN_TPS_DET)
        if warp is not None:
            return warp
    raise GenerationFailure(f"no fold-free TPS draw after {MAX_DRAWS} attempts")


def apply_warp(image, warp):
    """Resample ``image`` into the warp's target frame (bilinear, border-replicated)."""
    image = np.asarray(image)
    if tuple(image.shape[:2]) != tuple(warp.source_size):
        raise InvalidArgument(f"image size {image.shape[:2]} != warp source {warp.source_size}")
    if warp.inverse_map is None:
        raise InvalidArgument("warp has no inverse map")
    squeeze = image.ndim == 2
    src = image[..., None] if squeeze else image
    out = kernels.bilinear_sample(src, warp.inverse_map.reshape(-1, 2))
    out = out.reshape(*warp.target_size, src.shape[2]).astype(image.dtype, copy=False)
    return out[..., 0] if squeeze else out


# ---------------------------------------------------------------- photometric

_LUMA = np.array([0.299, 0.587, 0.114])
_RGB2YIQ = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
_YIQ2RGB = np.linalg.inv(_RGB2YIQ)

_JPEG_LUMA = np.array([
    16, 11, 10, 16, 24, 40, 51, 61, 12, 12, 14, 19, 26, 58, 60, 55,
    14, 13, 16, 24, 40, 57, 69, 56, 14, 17, 22, 29, 51, 87, 80, 62,
    18, 22, 37, 56, 68, 109, 103, 77, 24, 35, 55, 64, 81, 104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99,
], dtype=np.float64).reshape(8, 8)
_JPEG_CHROMA = np.full((8, 8), 99.0)
_JPEG_CHROMA[:4, :4] = np.array([
    17, 18, 24, 47, 18, 21, 26, 66, 24, 26, 56, 99, 47, 66, 99, 99,
]).reshape(4, 4)


def draw_jitter(params, seed):
    """The colour-jitter factors used by ``photometric_transform`` for ``seed``."""
    rng = np.random.default_rng(seed)
    draws = rng.uniform(-1.0, 1.0, size=4)
    return {
        "brightness": params.brightness * draws[0],
        "contrast": params.contrast * draws[1],
        "saturation": params.saturation * draws[2],
        "hue": params.hue * draws[3],
    }


def _quant_table(base, quality):
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    return np.clip(np.floor((base * scale + 50.0) / 100.0), 1.0, 255.0)


def block_dct_noise(image, quality):
    """Simulate JPEG compression noise with 8x8 block-DCT quantisation."""
    if quality >= 100:
        return image
    h, w = image.shape[:2]
    ph, pw = -h % 8, -w % 8
    ycc = image @ _RGB2YIQ.T * 255.0
    ycc[..., 0] -= 128.0
    ycc = np.pad(ycc, ((0, ph), (0, pw), (0, 0)), mode="edge")
    hh, ww = ycc.shape[:2]
    out = np.empty_like(ycc)
    for ch in range(3):
        table = _quant_table(_JPEG_LUMA if ch == 0 else _JPEG_CHROMA, quality)
        blocks = ycc[..., ch].reshape(hh // 8, 8, ww // 8, 8).transpose(0, 2, 1, 3)
        coef = sfft.dctn(blocks, axes=(2, 3), norm="ortho")
        coef = np.round(coef / table) * table
        rec = sfft.idctn(coef, axes=(2, 3), norm="ortho")
        out[..., ch] = rec.transpose(0, 2, 1, 3).reshape(hh, ww)
    out[..., 0] += 128.0
    out = out[:h, :w] / 255.0
    return np.clip(out @ _YIQ2RGB.T, 0.0, 1.0)


def photometric_transform(image, params, seed):
    """Colour jitter, Gaussian blur, then compression noise; clipped to [0, 1]."""
    if params.is_identity:
        return image
    dtype = image.dtype
    x = np.asarray(image, dtype=np.float64)
    j = draw_jitter(params, seed)
    if j["brightness"]:
        x = np.clip(x * (1.0 + j["brightness"]), 0.0, 1.0)
    if j["contrast"]:
        mean = float((x @ _LUMA).mean())
        x = np.clip(mean + (x - mean) * (1.0 + j["contrast"]), 0.0, 1.0)
    if j["saturation"]:
        gray = (x @ _LUMA)[..., None]
        x = np.clip(gray + (x - gray) * (1.0 + j["saturation"]), 0.0, 1.0)
    if j["hue"]:
        theta = 2.0 * math.pi * j["hue"]
        c, s = math.cos(theta), math.sin(theta)
        rot = np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
        x = np.clip(x @ (_YIQ2RGB @ rot @ _RGB2YIQ).T, 0.0, 1.0)
    if params.blur_sigma > 0:
        x = ndimage.gaussian_filter(x, sigma=(params.blur_sigma, params.blur_sigma, 0), mode="reflect")
    x = block_dct_noise(x, int(params.noise_quality))
    return np.clip(x, 0.0, 1.0).astype(dtype, copy=False)


# ---------------------------------------------------------------- view pairs


def random_crop_box(rng, size, policy):
    h, w = size
    area = rng.uniform(policy.crop_scale_min, policy.crop_scale_max)
    log_r = rng.uniform(math.log(policy.crop_ratio_min), math.log(policy.crop_ratio_max))
    ratio = math.exp(log_r)
    cw = min(w, w * math.sqrt(area * ratio))
    ch = min(h, h * math.sqrt(area / ratio))
    left = rng.uniform(0.0, w - cw) - 0.5
    top = rng.uniform(0.0, h - ch) - 0.5
    return left, top, left + cw, top + ch


def sample_view_pair(image, policy, seed, tps=None):
    """Draw a random (view_a, view_b) pair with the exact warp between them.

    ``view_a`` is the input image; ``view_b`` is a random crop/resize
    (optionally followed by TPS) of it, photometrically jittered.  ``tps``
    overrides ``policy.tps_enabled``.
    """
    image = np.asarray(image)
    size = tuple(image.shape[:2])
    use_tps = policy.tps_enabled if tps is None else tps
    rng = np.random.default_rng(seed)
    for _ in range(MAX_DRAWS):
        box = random_crop_box(rng, size, policy)
        warp = crop_resize_warp(size, box, size)
        if use_tps and policy.tps_sigma > 0:
            tps_seed = int(rng.integers(2**31))
            warp = compose_warps(warp, make_tps_warp(policy.tps_grid, policy.tps_sigma, size, tps_seed))
        if warp.valid_fraction >= MIN_VALID_FRACTION:
            break
    else:
        raise GenerationFailure(f"no non-degenerate warp after {MAX_DRAWS} draws")
    quality = int(rng.integers(policy.jpeg_quality_min, 101))
    photo = PhotometricParams(
        brightness=policy.jitter_brightness,
        contrast=policy.jitter_contrast,
        saturation=policy.jitter_saturation,
        hue=policy.jitter_hue,
        blur_sigma=float(rng.uniform(0.0, policy.blur_sigma_max)) if policy.blur_sigma_max > 0 else 0.0,
        noise_quality=quality,
    )
    photo_seed = int(rng.integers(2**31))
    warped = apply_warp(image, warp)
    view_b = photometric_transform(warped, photo, photo_seed)
    return ViewPair(image, view_b, warp, photo, seed, draw_jitter(photo, photo_seed))


__all__ = [
    "WarpField", "PhotometricParams", "TransformPolicy", "ViewPair", "identity_warp",
    "translation_warp", "crop_resize_warp", "compose_warps", "resize_warp", "make_tps_warp",
    "tps_warp_from_controls", "apply_warp", "map_coords", "inverse_map_coords",
    "photometric_transform", "draw_jitter", "sample_view_pair",
]
