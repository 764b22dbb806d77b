"""Pure numpy implementations of the hot kernels.

These mirror ``_ckernels.pyx`` exactly and are used whenever the compiled
extension is unavailable (or disabled with ``EQUINV_NO_EXT=1``).
"""
import numpy as np


def bilinear_sample(src, coords):
    """Sample ``src`` (H, W, C) at float ``coords`` (N, 2) given as (x, y).

    Coordinates are clamped to the pixel-centre range, which amounts to
    border replication.
    """
    src = np.ascontiguousarray(src, dtype=np.float64)
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    h, w = src.shape[:2]
    x = np.clip(coords[:, 0], 0.0, w - 1.0)
    y = np.clip(coords[:, 1], 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    top = src[y0, x0] * (1.0 - fx) + src[y0, x1] * fx
    bot = src[y1, x0] * (1.0 - fx) + src[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


def tps_eval(points, ctrl, weights, affine):
    """Evaluate a 2-D thin-plate spline and its Jacobian.

    f(p) = affine[0] + p @ affine[1:] + sum_i weights[i] * U(|p - ctrl[i]|)
    with U(r) = r^2 log r.  Returns (values (N, 2), jacobian (N, 2, 2)) where
    ``jacobian[n, i, j] = d f_i / d p_j``.
    """
    points = np.asarray(points, dtype=np.float64)
    diff = points[:, None, :] - ctrl[None, :, :]
    r2 = np.einsum("nmk,nmk->nm", diff, diff)
    safe = np.where(r2 > 0.0, r2, 1.0)
    log_r2 = np.log(safe)
    u = np.where(r2 > 0.0, 0.5 * r2 * log_r2, 0.0)
    # dU/dp = (log r^2 + 1) (p - c)
    du = np.where(r2 > 0.0, log_r2 + 1.0, 0.0)
    values = affine[0] + points @ affine[1:] + u @ weights
    jac = np.einsum("nm,nmj,mi->nij", du, diff, weights)
    jac = jac + affine[1:].T[None, :, :]
    return values, jac
