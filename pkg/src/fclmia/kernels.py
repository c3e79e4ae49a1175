"""Hot numeric kernels with numba and pure-numpy implementations.

Every kernel exists twice: ``*_numpy`` (vectorised numpy) and ``*_numba``
(explicit loops under ``@njit``).  The unsuffixed name dispatches on the
backend chosen at import time (see :mod:`fclmia._accel`).  Both variants
are always importable so they can be cross-checked and benchmarked.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._accel import NUMBA_ENABLED, njit


# ---------------------------------------------------------------------------
# im2col: padded NHWC input -> (N*Ho*Wo, C*k*k) patch matrix
# ---------------------------------------------------------------------------

def im2col_numpy(xp, k, stride, ho, wo):
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # N, H', W', C, k, k
    win = win[:, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    n, c = xp.shape[0], xp.shape[3]
    return np.ascontiguousarray(win).reshape(n * ho * wo, c * k * k)


@njit(cache=True)
def _im2col_loops(xp, k, stride, ho, wo):
    n, _, _, c = xp.shape
    out = np.empty((n * ho * wo, c * k * k), dtype=xp.dtype)
    row = 0
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                y0 = i * stride
                x0 = j * stride
                col = 0
                for ch in range(c):
                    for di in range(k):
                        for dj in range(k):
                            out[row, col] = xp[b, y0 + di, x0 + dj, ch]
                            col += 1
                row += 1
    return out


def im2col_numba(xp, k, stride, ho, wo):
    return _im2col_loops(np.ascontiguousarray(xp), k, stride, ho, wo)


# ---------------------------------------------------------------------------
# col2im: scatter-add patch gradients back onto the padded input grid
# ---------------------------------------------------------------------------

def col2im_numpy(dcols, xp_shape, k, stride):
    n, ho, wo, c = dcols.shape[0], dcols.shape[1], dcols.shape[2], xp_shape[3]
    d = dcols.reshape(n, ho, wo, c, k, k)
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    for di in range(k):
        for dj in range(k):
            dxp[:, di : di + stride * ho : stride, dj : dj + stride * wo : stride, :] += d[..., di, dj]
    return dxp


@njit(cache=True)
def _col2im_loops(d, n, hp, wp, c, k, stride):
    ho, wo = d.shape[1], d.shape[2]
    dxp = np.zeros((n, hp, wp, c), dtype=d.dtype)
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                y0 = i * stride
                x0 = j * stride
                for ch in range(c):
                    for di in range(k):
                        for dj in range(k):
                            dxp[b, y0 + di, x0 + dj, ch] += d[b, i, j, ch, di, dj]
    return dxp


def col2im_numba(dcols, xp_shape, k, stride):
    n, hp, wp, c = xp_shape
    ho, wo = dcols.shape[1], dcols.shape[2]
    d = np.ascontiguousarray(dcols).reshape(n, ho, wo, c, k, k)
    return _col2im_loops(d, n, hp, wp, c, k, stride)


# ---------------------------------------------------------------------------
# crop_resize: per-image bilinear resampling of an axis-aligned box
# ---------------------------------------------------------------------------

def _sample_grid(start, extent, n_out, limit):
    pos = start[:, None] + (np.arange(n_out) + 0.5)[None, :] * (extent[:, None] / n_out) - 0.5
    pos = np.clip(pos, 0.0, limit - 1.0)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, limit - 1)
    return lo, hi, pos - lo


def crop_resize_numpy(images, boxes, out_h, out_w):
    """Bilinear crop-and-resize.  ``boxes[i] = (y0, x0, h, w)`` in pixels."""
    n, h, w, _ = images.shape
    y_lo, y_hi, fy = _sample_grid(boxes[:, 0], boxes[:, 2], out_h, h)
    x_lo, x_hi, fx = _sample_grid(boxes[:, 1], boxes[:, 3], out_w, w)
    b = np.arange(n)[:, None, None]
    fy = fy[:, :, None, None].astype(images.dtype)
    fx = fx[:, None, :, None].astype(images.dtype)
    top = images[b, y_lo[:, :, None], x_lo[:, None, :]] * (1 - fx) + images[b, y_lo[:, :, None], x_hi[:, None, :]] * fx
    bot = images[b, y_hi[:, :, None], x_lo[:, None, :]] * (1 - fx) + images[b, y_hi[:, :, None], x_hi[:, None, :]] * fx
    return top * (1 - fy) + bot * fy


@njit(cache=True)
def _crop_resize_loops(images, boxes, out_h, out_w):
    n, h, w, c = images.shape
    out = np.empty((n, out_h, out_w, c), dtype=images.dtype)
    for b in range(n):
        y0, x0, bh, bw = boxes[b, 0], boxes[b, 1], boxes[b, 2], boxes[b, 3]
        for i in range(out_h):
            py = y0 + (i + 0.5) * (bh / out_h) - 0.5
            py = min(max(py, 0.0), h - 1.0)
            yl = int(np.floor(py))
            yh = min(yl + 1, h - 1)
            fy = py - yl
            for j in range(out_w):
                px = x0 + (j + 0.5) * (bw / out_w) - 0.5
                px = min(max(px, 0.0), w - 1.0)
                xl = int(np.floor(px))
                xh = min(xl + 1, w - 1)
                fx = px - xl
                for ch in range(c):
                    top = images[b, yl, xl, ch] * (1 - fx) + images[b, yl, xh, ch] * fx
                    bot = images[b, yh, xl, ch] * (1 - fx) + images[b, yh, xh, ch] * fx
                    out[b, i, j, ch] = top * (1 - fy) + bot * fy
    return out


def crop_resize_numba(images, boxes, out_h, out_w):
    return _crop_resize_loops(np.ascontiguousarray(images), np.ascontiguousarray(boxes, dtype=np.float64), out_h, out_w)


if NUMBA_ENABLED:
    im2col, col2im, crop_resize = im2col_numba, col2im_numba, crop_resize_numba
else:
    im2col, col2im, crop_resize = im2col_numpy, col2im_numpy, crop_resize_numpy
