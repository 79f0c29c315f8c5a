# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled sliding-window kernels for 3D convolution and pooling.

Layouts match ``_kernels_py`` exactly; see that module for the reference.
"""
import numpy as np
from libc.string cimport memcpy

ctypedef fused real:
    float
    double


def im2col3d(real[:, :, :, :, ::1] xp, int kt, int kh, int kw, int st, int sh, int sw):
    cdef Py_ssize_t N = xp.shape[0], C = xp.shape[1]
    cdef Py_ssize_t T = xp.shape[2], H = xp.shape[3], W = xp.shape[4]
    cdef Py_ssize_t To = (T - kt) // st + 1, Ho = (H - kh) // sh + 1, Wo = (W - kw) // sw + 1
    cdef Py_ssize_t K = C * kt * kh * kw, P = To * Ho * Wo
    dtype = np.float32 if real is float else np.float64
    out = np.empty((N, K, P), dtype=dtype)
    if N == 0 or K == 0 or P == 0:
        return out
    cdef real[:, :, ::1] cols = out
    cdef Py_ssize_t n, c, dt, dy, dx, to, ho, wo, row, t0, h0
    cdef real* src
    cdef real* dst
    with nogil:
        for n in range(N):
            for c in range(C):
                for dt in range(kt):
                    for dy in range(kh):
                        for dx in range(kw):
                            row = ((c * kt + dt) * kh + dy) * kw + dx
                            dst = &cols[n, row, 0]
                            for to in range(To):
                                t0 = to * st + dt
                                for ho in range(Ho):
                                    h0 = ho * sh + dy
                                    src = &xp[n, c, t0, h0, dx]
                                    if sw == 1:
                                        memcpy(dst, src, Wo * sizeof(real))
                                    else:
                                        for wo in range(Wo):
                                            dst[wo] = src[wo * sw]
                                    dst += Wo
    return out


def col2im3d(real[:, :, ::1] cols, tuple padded_shape, int kt, int kh, int kw, int st, int sh, int sw):
    cdef Py_ssize_t N = padded_shape[0], C = padded_shape[1]
    cdef Py_ssize_t T = padded_shape[2], H = padded_shape[3], W = padded_shape[4]
    cdef Py_ssize_t To = (T - kt) // st + 1, Ho = (H - kh) // sh + 1, Wo = (W - kw) // sw + 1
    dtype = np.float32 if real is float else np.float64
    result = np.zeros(padded_shape, dtype=dtype)
    if N == 0 or C == 0 or To * Ho * Wo == 0:
        return result
    cdef real[:, :, :, :, ::1] out = result
    cdef Py_ssize_t n, c, dt, dy, dx, to, ho, wo, row, t0, h0
    cdef real* src
    cdef real* dst
    with nogil:
        for n in range(N):
            for c in range(C):
                for dt in range(kt):
                    for dy in range(kh):
                        for dx in range(kw):
                            row = ((c * kt + dt) * kh + dy) * kw + dx
                            src = &cols[n, row, 0]
                            for to in range(To):
                                t0 = to * st + dt
                                for ho in range(Ho):
                                    h0 = ho * sh + dy
                                    dst = &out[n, c, t0, h0, dx]
                                    for wo in range(Wo):
                                        dst[wo * sw] += src[wo]
                                    src += Wo
    return result


def maxpool3d_forward(real[:, :, :, :, ::1] xp, int kt, int kh, int kw, int st, int sh, int sw):
    cdef Py_ssize_t N = xp.shape[0], C = xp.shape[1]
    cdef Py_ssize_t T = xp.shape[2], H = xp.shape[3], W = xp.shape[4]
    cdef Py_ssize_t To = (T - kt) // st + 1, Ho = (H - kh) // sh + 1, Wo = (W - kw) // sw + 1
    dtype = np.float32 if real is float else np.float64
    result = np.empty((N, C, To, Ho, Wo), dtype=dtype)
    index = np.empty((N, C, To, Ho, Wo), dtype=np.int32)
    cdef real[:, :, :, :, ::1] out = result
    cdef int[:, :, :, :, ::1] idx = index
    cdef Py_ssize_t n, c, to, ho, wo, dt, dy, dx
    cdef int k, best_k
    cdef real v, best
    with nogil:
        for n in range(N):
            for c in range(C):
                for to in range(To):
                    for ho in range(Ho):
                        for wo in range(Wo):
                            best = xp[n, c, to * st, ho * sh, wo * sw]
                            best_k = 0
                            k = 0
                            for dt in range(kt):
                                for dy in range(kh):
                                    for dx in range(kw):
                                        v = xp[n, c, to * st + dt, ho * sh + dy, wo * sw + dx]
                                        if v > best:
                                            best = v
                                            best_k = k
                                        k += 1
                            out[n, c, to, ho, wo] = best
                            idx[n, c, to, ho, wo] = best_k
    return result, index


def maxpool3d_backward(real[:, :, :, :, ::1] grad, int[:, :, :, :, ::1] idx, tuple padded_shape,
                       int kt, int kh, int kw, int st, int sh, int sw):
    cdef Py_ssize_t N = grad.shape[0], C = grad.shape[1]
    cdef Py_ssize_t To = grad.shape[2], Ho = grad.shape[3], Wo = grad.shape[4]
    dtype = np.float32 if real is float else np.float64
    result = np.zeros(padded_shape, dtype=dtype)
    cdef real[:, :, :, :, ::1] out = result
    cdef Py_ssize_t n, c, to, ho, wo
    cdef int k, dt, dy, dx
    with nogil:
        for n in range(N):
            for c in range(C):
                for to in range(To):
                    for ho in range(Ho):
                        for wo in range(Wo):
                            k = idx[n, c, to, ho, wo]
                            dx = k % kw
                            dy = (k // kw) % kh
                            dt = k // (kw * kh)
                            out[n, c, to * st + dt, ho * sh + dy, wo * sw + dx] += grad[n, c, to, ho, wo]
    return result
