"""Pure numpy implementations of the hot kernels.

Every function here has a compiled twin in ``_ckernels.pyx`` with the same
signature and results (up to floating-point summation order).
"""
import numpy as np


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    win = _windows(xp, k, stride, ho, wo)  # n, c, ho, wo, k, k
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)
    out = cols @ w.reshape(o, -1).T
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))
    return out, cols


def conv2d_backward(g, cols, w, x_shape, stride, padding, need_input=True):
    n, c, h, wd = x_shape
    o, _, k, _ = w.shape
    _, _, ho, wo = g.shape
    g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, o)
    gw = (g2.T @ cols).reshape(w.shape)
    if not need_input:
        return None, gw
    gcols = (g2 @ w.reshape(o, -1)).reshape(n, ho, wo, c, k, k)
    gxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=g.dtype)
    for ky in range(k):
        for kx in range(k):
            gxp[:, :, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride] += gcols[
                :, :, :, :, ky, kx
            ].transpose(0, 3, 1, 2)
    if padding:
        gxp = gxp[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(gxp), gw


def _corners(coords: np.ndarray, valid: np.ndarray, h: int, w: int):
    x = coords[..., 0]
    y = coords[..., 1]
    inside = (valid != 0) & (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xs = np.where(inside, x, 0.0)
    ys = np.where(inside, y, 0.0)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wts = [(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy]
    wts = [np.where(inside, wt, 0.0) for wt in wts]
    idx = [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1]
    return idx, wts


def bilinear_gather(x: np.ndarray, coords: np.ndarray, valid: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    ho, wo = coords.shape[1:3]
    idx, wts = _corners(coords, valid, h, w)
    flat = x.reshape(n, c, h * w)
    out = np.zeros((n, c, ho * wo), dtype=x.dtype)
    for i, wt in zip(idx, wts):
        gathered = np.take_along_axis(flat, i.reshape(n, 1, -1).repeat(c, axis=1), axis=2)
        out += gathered * wt.reshape(n, 1, -1).astype(x.dtype)
    return out.reshape(n, c, ho, wo)


def bilinear_scatter(g: np.ndarray, coords: np.ndarray, valid: np.ndarray, h: int, w: int) -> np.ndarray:
    n, c, ho, wo = g.shape
    idx, wts = _corners(coords, valid, h, w)
    gflat = g.reshape(n, c, ho * wo)
    out = np.zeros(n * c * h * w, dtype=np.float64)
    base = (np.arange(n * c) * (h * w)).reshape(n, c, 1)
    for i, wt in zip(idx, wts):
        target = (base + i.reshape(n, 1, -1)).ravel()
        vals = (gflat * wt.reshape(n, 1, -1)).ravel()
        out += np.bincount(target, weights=vals, minlength=out.size)
    return out.reshape(n, c, h, w).astype(g.dtype)


def hard_argmax(p: np.ndarray) -> np.ndarray:
    return np.argmax(p, axis=-1)
