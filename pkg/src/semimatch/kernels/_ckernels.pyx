# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in ``_fallback.py``.

Convolutions with a small receptive volume (``C_in * k * k <= DIRECT_MAX``)
run as direct loops (plane-at-a-time scratch buffers when the stride is one);
larger ones use an im2col layout written in C followed by a BLAS matrix
product through numpy.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()

ctypedef fused real:
    float
    double

DIRECT_MAX = 16


# -- im2col / col2im -----------------------------------------------------------------
cdef void _im2col(const real[:, :, :, ::1] x, real[:, ::1] cols, int k, int stride, int pad, int ho, int wo) noexcept nogil:
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t b, ci, ky, kx, oy, ox, iy, ix, row, col
    for b in range(n):
        for oy in range(ho):
            for ox in range(wo):
                row = (b * ho + oy) * wo + ox
                col = 0
                for ci in range(c):
                    for ky in range(k):
                        iy = oy * stride + ky - pad
                        for kx in range(k):
                            ix = ox * stride + kx - pad
                            if 0 <= iy < h and 0 <= ix < w:
                                cols[row, col] = x[b, ci, iy, ix]
                            else:
                                cols[row, col] = 0
                            col += 1


cdef void _col2im(const real[:, ::1] gcols, real[:, :, :, ::1] gx, int k, int stride, int pad, int ho, int wo) noexcept nogil:
    cdef Py_ssize_t n = gx.shape[0], c = gx.shape[1], h = gx.shape[2], w = gx.shape[3]
    cdef Py_ssize_t b, ci, ky, kx, oy, ox, iy, ix, row, col
    for b in range(n):
        for oy in range(ho):
            for ox in range(wo):
                row = (b * ho + oy) * wo + ox
                col = 0
                for ci in range(c):
                    for ky in range(k):
                        iy = oy * stride + ky - pad
                        for kx in range(k):
                            ix = ox * stride + kx - pad
                            if 0 <= iy < h and 0 <= ix < w:
                                gx[b, ci, iy, ix] += gcols[row, col]
                            col += 1


# -- direct convolution --------------------------------------------------------------
# Strided direct path (stride != 1, narrow filters): plane by plane, one filter tap
# at a time, so the innermost loop walks a contiguous output row (an axpy for the
# forward pass, a dot for the weight gradient), addressed through raw pointers.
cdef inline void _col_range(Py_ssize_t wo, Py_ssize_t w, int kx, int stride, int pad,
                            Py_ssize_t* lo, Py_ssize_t* hi) noexcept nogil:
    cdef Py_ssize_t a = 0, e = wo
    while a < wo and a * stride + kx - pad < 0:
        a += 1
    while e > a and (e - 1) * stride + kx - pad >= w:
        e -= 1
    lo[0] = a
    hi[0] = e


cdef void _direct_fwd(const real* x, const real* wt, real* out, Py_ssize_t n, Py_ssize_t c, Py_ssize_t h,
                      Py_ssize_t w, Py_ssize_t o, int k, Py_ssize_t ho, Py_ssize_t wo,
                      int stride, int pad) noexcept nogil:
    cdef Py_ssize_t b, oc, ci, ky, kx, oy, ox, iy, ox0, ox1, shift
    cdef real wv
    cdef real* orow
    cdef const real* xrow
    for b in range(n):
        for oc in range(o):
            for ci in range(c):
                for ky in range(k):
                    for kx in range(k):
                        wv = wt[((oc * c + ci) * k + ky) * k + kx]
                        _col_range(wo, w, kx, stride, pad, &ox0, &ox1)
                        shift = kx - pad
                        for oy in range(ho):
                            iy = oy * stride + ky - pad
                            if iy < 0 or iy >= h:
                                continue
                            orow = out + ((b * o + oc) * ho + oy) * wo
                            xrow = x + ((b * c + ci) * h + iy) * w
                            if stride == 1:
                                for ox in range(ox0, ox1):
                                    orow[ox] += wv * xrow[ox + shift]
                            else:
                                for ox in range(ox0, ox1):
                                    orow[ox] += wv * xrow[ox * stride + shift]


cdef void _direct_bwd(const real* x, const real* wt, const real* g, real* gx, double* gw,
                      Py_ssize_t n, Py_ssize_t c, Py_ssize_t h, Py_ssize_t w, Py_ssize_t o, int k,
                      Py_ssize_t ho, Py_ssize_t wo, int stride, int pad, bint need_input) noexcept nogil:
    cdef Py_ssize_t b, oc, ci, ky, kx, oy, ox, iy, ox0, ox1, shift
    cdef real wv, acc
    cdef const real* grow
    cdef const real* xrow
    cdef real* gxrow
    for b in range(n):
        for oc in range(o):
            for ci in range(c):
                for ky in range(k):
                    for kx in range(k):
                        wv = wt[((oc * c + ci) * k + ky) * k + kx]
                        _col_range(wo, w, kx, stride, pad, &ox0, &ox1)
                        shift = kx - pad
                        acc = 0
                        for oy in range(ho):
                            iy = oy * stride + ky - pad
                            if iy < 0 or iy >= h:
                                continue
                            grow = g + ((b * o + oc) * ho + oy) * wo
                            xrow = x + ((b * c + ci) * h + iy) * w
                            gxrow = gx + ((b * c + ci) * h + iy) * w
                            for ox in range(ox0, ox1):
                                acc = acc + grow[ox] * xrow[ox * stride + shift]
                            if need_input:
                                for ox in range(ox0, ox1):
                                    gxrow[ox * stride + shift] += wv * grow[ox]
                        gw[((oc * c + ci) * k + ky) * k + kx] += acc


# Stride one, one sample at a time: copy each input plane into a zero-bordered
# scratch plane and build outputs at the padded row width, so every tap is a
# single contiguous loop over an L1-sized buffer. Only valid columns leave it.
cdef inline void _load_padded(const real* x, real* xs, Py_ssize_t c, Py_ssize_t h, Py_ssize_t w,
                              Py_ssize_t wp, int pad) noexcept nogil:
    cdef Py_ssize_t ci, y, i, hp = h + 2 * pad
    for ci in range(c):
        for y in range(h):
            for i in range(w):
                xs[(ci * hp + y + pad) * wp + pad + i] = x[(ci * h + y) * w + i]


cdef void _plane_fwd(const real* x, const real* wt, real* out, real* xs, real* os, Py_ssize_t n, Py_ssize_t c,
                     Py_ssize_t h, Py_ssize_t w, Py_ssize_t o, int k, int pad) noexcept nogil:
    cdef Py_ssize_t hp = h + 2 * pad, wp = w + 2 * pad
    cdef Py_ssize_t ho = hp - k + 1, wo = wp - k + 1, span = ho * wp - k + 1
    cdef Py_ssize_t b, oc, ci, ky, kx, q, y, i
    cdef real w0, w1, w2, w3, w4, w5, w6, w7, w8, wv
    cdef const real* wr
    cdef const real* src
    cdef real* dst
    for b in range(n):
        _load_padded(x + b * c * h * w, xs, c, h, w, wp, pad)
        for oc in range(o):
            for q in range(ho * wp):
                os[q] = 0
            for ci in range(c):
                src = xs + ci * hp * wp
                wr = wt + (oc * c + ci) * k * k
                if k == 3:
                    # all nine taps at once: one store per output
                    w0 = wr[0]; w1 = wr[1]; w2 = wr[2]; w3 = wr[3]; w4 = wr[4]
                    w5 = wr[5]; w6 = wr[6]; w7 = wr[7]; w8 = wr[8]
                    for q in range(span):
                        os[q] += (w0 * src[q] + w1 * src[q + 1] + w2 * src[q + 2]
                                  + w3 * src[q + wp] + w4 * src[q + wp + 1] + w5 * src[q + wp + 2]
                                  + w6 * src[q + 2 * wp] + w7 * src[q + 2 * wp + 1] + w8 * src[q + 2 * wp + 2])
                else:
                    for ky in range(k):
                        for kx in range(k):
                            wv = wr[ky * k + kx]
                            for q in range(span):
                                os[q] += wv * src[q + ky * wp + kx]
            dst = out + (b * o + oc) * ho * wo
            for y in range(ho):
                for i in range(wo):
                    dst[y * wo + i] = os[y * wp + i]


cdef void _plane_bwd(const real* x, const real* wt, const real* g, real* gx, real* acc, real* xs, real* gsb,
                     real* gxs, Py_ssize_t n, Py_ssize_t c, Py_ssize_t h, Py_ssize_t w, Py_ssize_t o, int k, int pad,
                     bint need_input) noexcept nogil:
    # acc[(oc, ci, tap), q] collects products per output slot; summed over q by the caller.
    # gsb holds the output gradient at padded row width after a zero lead of ``front``
    # slots, so the input gradient reads it backwards by each tap offset.
    cdef Py_ssize_t hp = h + 2 * pad, wp = w + 2 * pad
    cdef Py_ssize_t ho = hp - k + 1, wo = wp - k + 1, span = ho * wp - k + 1
    cdef Py_ssize_t front = (k - 1) * wp + k - 1, plane = hp * wp
    cdef Py_ssize_t b, oc, ci, t, off, q, y, i, kk = k * k
    cdef real v, wv
    cdef const real* src
    cdef const real* gs = gsb + front
    cdef const real* wr
    cdef real* a
    cdef real* dst
    cdef const real* grow
    for b in range(n):
        _load_padded(x + b * c * h * w, xs, c, h, w, wp, pad)
        if need_input:
            for q in range(c * plane):
                gxs[q] = 0
        for oc in range(o):
            grow = g + (b * o + oc) * ho * wo
            for y in range(ho):
                for i in range(wo):
                    gsb[front + y * wp + i] = grow[y * wo + i]
            for ci in range(c):
                src = xs + ci * plane
                for t in range(kk):
                    off = (t // k) * wp + t % k
                    a = acc + ((oc * c + ci) * kk + t) * span
                    for q in range(span):
                        a[q] += gs[q] * src[q + off]
                if not need_input:
                    continue
                wr = wt + (oc * c + ci) * kk
                dst = gxs + ci * plane
                if k == 3:
                    for q in range(plane):
                        dst[q] += (wr[0] * gs[q] + wr[1] * gs[q - 1] + wr[2] * gs[q - 2]
                                   + wr[3] * gs[q - wp] + wr[4] * gs[q - wp - 1] + wr[5] * gs[q - wp - 2]
                                   + wr[6] * gs[q - 2 * wp] + wr[7] * gs[q - 2 * wp - 1]
                                   + wr[8] * gs[q - 2 * wp - 2])
                else:
                    for t in range(kk):
                        wv = wr[t]
                        off = (t // k) * wp + t % k
                        for q in range(span):
                            dst[q + off] += wv * gs[q]
        if need_input:
            dst = gx + b * c * h * w
            for ci in range(c):
                for y in range(h):
                    for i in range(w):
                        dst[(ci * h + y) * w + i] = gxs[(ci * hp + y + pad) * wp + pad + i]


def _plane_fwd_call(x, w, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t o = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t hp = h + 2 * pad, wp = wd + 2 * pad
    out = np.empty((n, o, hp - k + 1, wp - k + 1), dtype=x.dtype)
    xs = np.zeros(c * hp * wp, dtype=x.dtype)
    os = np.zeros(hp * wp, dtype=x.dtype)
    cdef const float[:, :, :, ::1] x32, w32
    cdef float[:, :, :, ::1] o32
    cdef float[::1] xs32, os32
    cdef const double[:, :, :, ::1] x64, w64
    cdef double[:, :, :, ::1] o64
    cdef double[::1] xs64, os64
    if x.dtype == np.float32:
        x32, w32, o32, xs32, os32 = x, w, out, xs, os
        with nogil:
            _plane_fwd[float](&x32[0, 0, 0, 0], &w32[0, 0, 0, 0], &o32[0, 0, 0, 0], &xs32[0], &os32[0],
                              n, c, h, wd, o, k, pad)
    else:
        x64, w64, o64, xs64, os64 = x, w, out, xs, os
        with nogil:
            _plane_fwd[double](&x64[0, 0, 0, 0], &w64[0, 0, 0, 0], &o64[0, 0, 0, 0], &xs64[0], &os64[0],
                               n, c, h, wd, o, k, pad)
    return out


def _plane_bwd_call(x, w, g, int pad, bint need_input):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t o = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t hp = h + 2 * pad, wp = wd + 2 * pad
    cdef Py_ssize_t span = (hp - k + 1) * wp - k + 1
    gx = np.zeros(x.shape if need_input else (1, 1, 1, 1), dtype=x.dtype)
    acc = np.zeros((o * c * k * k, span), dtype=x.dtype)
    xs = np.zeros(c * hp * wp, dtype=x.dtype)
    gs = np.zeros((k - 1) * wp + k - 1 + hp * wp, dtype=x.dtype)
    gxs = np.zeros(c * hp * wp, dtype=x.dtype)
    cdef float[:, ::1] acc32
    cdef double[:, ::1] acc64
    cdef const float[:, :, :, ::1] x32, w32, g32
    cdef float[:, :, :, ::1] gx32
    cdef float[::1] xs32, gs32, gxs32
    cdef const double[:, :, :, ::1] x64, w64, g64
    cdef double[:, :, :, ::1] gx64
    cdef double[::1] xs64, gs64, gxs64
    if x.dtype == np.float32:
        x32, w32, g32, gx32, xs32, gs32, gxs32, acc32 = x, w, g, gx, xs, gs, gxs, acc
        with nogil:
            _plane_bwd[float](&x32[0, 0, 0, 0], &w32[0, 0, 0, 0], &g32[0, 0, 0, 0], &gx32[0, 0, 0, 0],
                              &acc32[0, 0], &xs32[0], &gs32[0], &gxs32[0], n, c, h, wd, o, k, pad, need_input)
    else:
        x64, w64, g64, gx64, xs64, gs64, gxs64, acc64 = x, w, g, gx, xs, gs, gxs, acc
        with nogil:
            _plane_bwd[double](&x64[0, 0, 0, 0], &w64[0, 0, 0, 0], &g64[0, 0, 0, 0], &gx64[0, 0, 0, 0],
                               &acc64[0, 0], &xs64[0], &gs64[0], &gxs64[0], n, c, h, wd, o, k, pad, need_input)
    gw = acc.sum(axis=1, dtype=np.float64).reshape(w.shape).astype(x.dtype)
    return (gx if need_input else None), gw


def _fwd_f32(const float[:, :, :, ::1] x, const float[:, :, :, ::1] w, float[:, :, :, ::1] out, int stride, int pad):
    with nogil:
        _direct_fwd[float](&x[0, 0, 0, 0], &w[0, 0, 0, 0], &out[0, 0, 0, 0], x.shape[0], x.shape[1], x.shape[2],
                           x.shape[3], w.shape[0], w.shape[2], out.shape[2], out.shape[3], stride, pad)


def _fwd_f64(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w, double[:, :, :, ::1] out, int stride, int pad):
    with nogil:
        _direct_fwd[double](&x[0, 0, 0, 0], &w[0, 0, 0, 0], &out[0, 0, 0, 0], x.shape[0], x.shape[1], x.shape[2],
                            x.shape[3], w.shape[0], w.shape[2], out.shape[2], out.shape[3], stride, pad)


def _bwd_f32(const float[:, :, :, ::1] x, const float[:, :, :, ::1] w, const float[:, :, :, ::1] g, float[::1] gx,
             double[:, :, :, ::1] gw, int stride, int pad, bint need_input):
    with nogil:
        _direct_bwd[float](&x[0, 0, 0, 0], &w[0, 0, 0, 0], &g[0, 0, 0, 0], &gx[0], &gw[0, 0, 0, 0], x.shape[0],
                           x.shape[1], x.shape[2], x.shape[3], w.shape[0], w.shape[2], g.shape[2], g.shape[3],
                           stride, pad, need_input)


def _bwd_f64(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w, const double[:, :, :, ::1] g, double[::1] gx,
             double[:, :, :, ::1] gw, int stride, int pad, bint need_input):
    with nogil:
        _direct_bwd[double](&x[0, 0, 0, 0], &w[0, 0, 0, 0], &g[0, 0, 0, 0], &gx[0], &gw[0, 0, 0, 0], x.shape[0],
                            x.shape[1], x.shape[2], x.shape[3], w.shape[0], w.shape[2], g.shape[2], g.shape[3],
                            stride, pad, need_input)


def conv2d_forward(x, w, int stride, int padding):
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w, dtype=x.dtype)
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t o = w.shape[0], k = w.shape[2]
    cdef int ho = (h + 2 * padding - k) // stride + 1
    cdef int wo = (wd + 2 * padding - k) // stride + 1
    if c * k * k <= DIRECT_MAX and stride == 1:
        return _plane_fwd_call(x, w, padding), ("plane", x)
    if c * k * k <= DIRECT_MAX:
        out = np.zeros((n, o, ho, wo), dtype=x.dtype)
        if x.dtype == np.float32:
            _fwd_f32(x, w, out, stride, padding)
        else:
            _fwd_f64(x, w, out, stride, padding)
        return out, ("direct", x)
    cols = np.empty((n * ho * wo, c * k * k), dtype=x.dtype)
    if x.dtype == np.float32:
        _im2col[float](x, cols, k, stride, padding, ho, wo)
    else:
        _im2col[double](x, cols, k, stride, padding, ho, wo)
    out = cols @ w.reshape(o, -1).T
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))
    return out, ("gemm", cols)


def conv2d_backward(g, saved, w, x_shape, int stride, int padding, need_input=True):
    kind, buf = saved
    g = np.ascontiguousarray(g, dtype=buf.dtype)
    w = np.ascontiguousarray(w, dtype=g.dtype)
    cdef Py_ssize_t n = x_shape[0], c = x_shape[1], h = x_shape[2], wd = x_shape[3]
    cdef Py_ssize_t o = w.shape[0], k = w.shape[2]
    cdef int ho = g.shape[2], wo = g.shape[3]
    if kind == "plane":
        return _plane_bwd_call(buf, w, g, padding, need_input)
    if kind == "direct":
        gw = np.zeros(w.shape)
        gx = np.zeros(x_shape if need_input else (1,), dtype=g.dtype)
        if g.dtype == np.float32:
            _bwd_f32(buf, w, g, gx.reshape(-1), gw, stride, padding, need_input)
        else:
            _bwd_f64(buf, w, g, gx.reshape(-1), gw, stride, padding, need_input)
        return (gx if need_input else None), gw.astype(g.dtype)
    cols = buf
    g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, o)
    gw = (g2.T @ cols).reshape(w.shape)
    if not need_input:
        return None, gw
    gcols = np.ascontiguousarray(g2 @ w.reshape(o, -1))
    gx = np.zeros(x_shape, dtype=g.dtype)
    if g.dtype == np.float32:
        _col2im[float](gcols, gx, k, stride, padding, ho, wo)
    else:
        _col2im[double](gcols, gx, k, stride, padding, ho, wo)
    return gx, gw


# -- bilinear sampling ------------------------------------------------------------------
cdef inline bint _prep(double x, double y, int h, int w, Py_ssize_t* idx, double* wts) noexcept nogil:
    if x < 0 or x > w - 1 or y < 0 or y > h - 1:
        return 0
    cdef Py_ssize_t x0 = <Py_ssize_t>floor(x)
    cdef Py_ssize_t y0 = <Py_ssize_t>floor(y)
    cdef double fx = x - x0, fy = y - y0
    cdef Py_ssize_t x1 = x0 + 1 if x0 + 1 < w else w - 1
    cdef Py_ssize_t y1 = y0 + 1 if y0 + 1 < h else h - 1
    idx[0] = y0 * w + x0
    idx[1] = y0 * w + x1
    idx[2] = y1 * w + x0
    idx[3] = y1 * w + x1
    wts[0] = (1 - fx) * (1 - fy)
    wts[1] = fx * (1 - fy)
    wts[2] = (1 - fx) * fy
    wts[3] = fx * fy
    return 1


cdef void _gather(const real[:, :, ::1] x, const double[:, :, ::1] coords, const unsigned char[:, ::1] valid,
                  real[:, :, ::1] out, int h, int w) noexcept nogil:
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], m = coords.shape[1]
    cdef Py_ssize_t b, p, ci, q
    cdef Py_ssize_t idx[4]
    cdef double wts[4]
    cdef double acc
    for b in range(n):
        for p in range(m):
            if not valid[b, p]:
                continue
            if not _prep(coords[b, p, 0], coords[b, p, 1], h, w, idx, wts):
                continue
            for ci in range(c):
                acc = 0
                for q in range(4):
                    acc = acc + wts[q] * x[b, ci, idx[q]]
                out[b, ci, p] = <real>acc


cdef void _scatter(const real[:, :, ::1] g, const double[:, :, ::1] coords, const unsigned char[:, ::1] valid,
                   double[:, :, ::1] out, int h, int w) noexcept nogil:
    cdef Py_ssize_t n = g.shape[0], c = g.shape[1], m = coords.shape[1]
    cdef Py_ssize_t b, p, ci, q
    cdef Py_ssize_t idx[4]
    cdef double wts[4]
    cdef double gv
    for b in range(n):
        for p in range(m):
            if not valid[b, p]:
                continue
            if not _prep(coords[b, p, 0], coords[b, p, 1], h, w, idx, wts):
                continue
            for ci in range(c):
                gv = g[b, ci, p]
                for q in range(4):
                    out[b, ci, idx[q]] += wts[q] * gv


def bilinear_gather(x, coords, valid):
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    ho, wo = coords.shape[1], coords.shape[2]
    xc = x.reshape(n, c, h * w)
    cc = np.ascontiguousarray(coords, dtype=np.float64).reshape(n, ho * wo, 2)
    vv = np.ascontiguousarray(valid, dtype=np.uint8).reshape(n, ho * wo)
    out = np.zeros((n, c, ho * wo), dtype=x.dtype)
    if x.dtype == np.float32:
        _gather[float](xc, cc, vv, out, h, w)
    else:
        _gather[double](xc, cc, vv, out, h, w)
    return out.reshape(n, c, ho, wo)


def bilinear_scatter(g, coords, valid, int h, int w):
    g = np.ascontiguousarray(g)
    n, c, ho, wo = g.shape
    gc = g.reshape(n, c, ho * wo)
    cc = np.ascontiguousarray(coords, dtype=np.float64).reshape(n, ho * wo, 2)
    vv = np.ascontiguousarray(valid, dtype=np.uint8).reshape(n, ho * wo)
    out = np.zeros((n, c, h * w), dtype=np.float64)
    if g.dtype == np.float32:
        _scatter[float](gc, cc, vv, out, h, w)
    else:
        _scatter[double](gc, cc, vv, out, h, w)
    return out.reshape(n, c, h, w).astype(g.dtype)


# -- arg-max ------------------------------------------------------------------------------
def hard_argmax(p):
    # numpy's SIMD arg-max beats a scalar loop here, with the same lowest-index tie rule
    return np.argmax(p, axis=-1)
