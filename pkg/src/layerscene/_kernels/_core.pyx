# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the kernels in ``_ops.py``.

Each function performs the same floating-point operations in the same order
as the numpy fallback, so backends agree bit-for-bit. Only float32/float64
grids are supported.
"""


cimport cython

from libc.math cimport sqrt, sqrtf

import numpy as np

ctypedef fused real:
    float
    double


cdef inline real _rsqrt(real x) noexcept nogil:
    if real is float:
        return sqrtf(x)
    else:
        return sqrt(x)


def _shift3d(real[:, :, ::1] src, real[:, :, ::1] dst, int dx, int dy):
    cdef Py_ssize_t b = src.shape[0], h = src.shape[1], w = src.shape[2]
    cdef Py_ssize_t ys_lo = -dy if dy < 0 else 0
    cdef Py_ssize_t ys_hi = h - (dy if dy > 0 else 0)
    cdef Py_ssize_t xs_lo = -dx if dx < 0 else 0
    cdef Py_ssize_t xs_hi = w - (dx if dx > 0 else 0)
    cdef Py_ssize_t i, ys, xs
    for i in range(b):
        for ys in range(ys_lo, ys_hi):
            for xs in range(xs_lo, xs_hi):
                dst[i, ys + dy, xs + dx] = src[i, ys, xs]


def _alpha_binary(real[:, :, ::1] masks, real[:, :, ::1] alphas):
    cdef Py_ssize_t K = masks.shape[0], h = masks.shape[1], w = masks.shape[2]
    cdef Py_ssize_t k, y, x
    cdef real occ
    for y in range(h):
        for x in range(w):
            occ = <real>1.0
            for k in range(K):
                alphas[k, y, x] = masks[k, y, x] * occ
                if k < K - 1:
                    occ = occ * (<real>1.0 - masks[k, y, x])


def _alpha_soft(real[:, :, ::1] masks, real[:, :, ::1] alphas):
    cdef Py_ssize_t K = masks.shape[0], h = masks.shape[1], w = masks.shape[2]
    cdef Py_ssize_t k, y, x
    cdef real occ, m
    for y in range(h):
        for x in range(w):
            occ = <real>1.0
            for k in range(K):
                m = masks[k, y, x]
                alphas[k, y, x] = m * occ
                if k < K - 1:
                    occ = occ * _rsqrt(<real>1.0 - m * m)


def _composite(real[:, :, ::1] alphas, real[:, :, :, ::1] feats, real[:, :, ::1] out):
    cdef Py_ssize_t K = alphas.shape[0], h = alphas.shape[1], w = alphas.shape[2]
    cdef Py_ssize_t c = feats.shape[1]
    cdef Py_ssize_t k, ch, y, x
    for k in range(K):
        for ch in range(c):
            for y in range(h):
                for x in range(w):
                    out[ch, y, x] = out[ch, y, x] + alphas[k, y, x] * feats[k, ch, y, x]


def _scatter(
    real[:, :, ::1] num,
    real[:, ::1] den,
    real[:, ::1] alpha,
    real[:, :, ::1] view,
    real weight,
    int dx,
    int dy,
):
    cdef Py_ssize_t c = num.shape[0], h = num.shape[1], w = num.shape[2]
    # source rectangle whose back-shift (-dx, -dy) stays in bounds
    cdef Py_ssize_t ys_lo = dy if dy > 0 else 0
    cdef Py_ssize_t ys_hi = h + (dy if dy < 0 else 0)
    cdef Py_ssize_t xs_lo = dx if dx > 0 else 0
    cdef Py_ssize_t xs_hi = w + (dx if dx < 0 else 0)
    cdef Py_ssize_t ch, ys, xs
    cdef real a
    for ys in range(ys_lo, ys_hi):
        for xs in range(xs_lo, xs_hi):
            a = alpha[ys, xs]
            for ch in range(c):
                num[ch, ys - dy, xs - dx] = (
                    num[ch, ys - dy, xs - dx] + weight * (a * view[ch, ys, xs])
                )
            den[ys - dy, xs - dx] = den[ys - dy, xs - dx] + weight * a


cdef bint _is_f32(arr) except? -1:
    if arr.dtype == np.float32:
        return True
    if arr.dtype == np.float64:
        return False
    raise TypeError(f"kernels support float32/float64 grids, got {arr.dtype}")


@cython.wraparound(True)
def shift2d(arr, dx, dy):
    arr = np.ascontiguousarray(arr)
    out = np.zeros_like(arr)
    h, w = arr.shape[-2], arr.shape[-1]
    if abs(dx) >= w or abs(dy) >= h:
        return out
    a3 = arr.reshape(-1, h, w)
    o3 = out.reshape(-1, h, w)
    if _is_f32(arr):
        _shift3d["float"](a3, o3, int(dx), int(dy))
    else:
        _shift3d["double"](a3, o3, int(dx), int(dy))
    return out


def alpha_chain_binary(moved_masks):
    moved_masks = np.ascontiguousarray(moved_masks)
    alphas = np.empty_like(moved_masks)
    if _is_f32(moved_masks):
        _alpha_binary["float"](moved_masks, alphas)
    else:
        _alpha_binary["double"](moved_masks, alphas)
    return alphas


def alpha_chain_soft(moved_masks):
    moved_masks = np.ascontiguousarray(moved_masks)
    alphas = np.empty_like(moved_masks)
    if _is_f32(moved_masks):
        _alpha_soft["float"](moved_masks, alphas)
    else:
        _alpha_soft["double"](moved_masks, alphas)
    return alphas


def composite(alphas, moved_features):
    alphas = np.ascontiguousarray(alphas)
    moved_features = np.ascontiguousarray(moved_features)
    if alphas.dtype != moved_features.dtype:
        raise TypeError("alphas and features must share a dtype")
    out = np.zeros_like(moved_features[0])
    if _is_f32(alphas):
        _composite["float"](alphas, moved_features, out)
    else:
        _composite["double"](alphas, moved_features, out)
    return out


def scatter_accumulate(num, den, alpha, view, weight, dx, dy):
    if not (num.flags.c_contiguous and den.flags.c_contiguous):
        raise ValueError("accumulators must be C-contiguous")
    alpha = np.ascontiguousarray(alpha)
    view = np.ascontiguousarray(view)
    if not (num.dtype == den.dtype == alpha.dtype == view.dtype):
        raise TypeError("scatter operands must share a dtype")
    if _is_f32(num):
        _scatter["float"](
            num, den, alpha, view, np.float32(weight), int(dx), int(dy)
        )
    else:
        _scatter["double"](
            num, den, alpha, view, float(weight), int(dx), int(dy)
        )
