# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled MLP kernels: BLAS dgemm plus fused bias/tanh loops.

Interface-identical to the pure-numpy fallback. The payoff at desk scale is
per-call overhead: the sampler and the loss evaluate one row at a time (a
bitwise-reproducibility requirement), so dispatch cost dominates arithmetic.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport tanh
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef inline void _gemm_out(const double[:, ::1] w, const double[:, ::1] h, double[:, ::1] z) noexcept nogil:
    # z (B, dout) = h (B, din) @ w.T, with all arrays C-order. In BLAS's
    # column-major view this is z^T = w^T_f . h_f.
    cdef int m = <int> z.shape[1]
    cdef int n = <int> z.shape[0]
    cdef int k = <int> h.shape[1]
    cdef double one = 1.0, zero = 0.0
    dgemm("T", "N", &m, &n, &k, &one,
          <double*> <void*> &w[0, 0], &k,
          <double*> <void*> &h[0, 0], &k,
          &zero, &z[0, 0], &m)


cdef inline void _gemm_grad_w(const double[:, ::1] dz, const double[:, ::1] below, double[:, ::1] gw) noexcept nogil:
    # gw (dout, din) = dz.T (dout, B) @ below (B, din)
    cdef int m = <int> gw.shape[1]
    cdef int n = <int> gw.shape[0]
    cdef int k = <int> dz.shape[0]
    cdef int ldb = <int> dz.shape[1]
    cdef double one = 1.0, zero = 0.0
    dgemm("N", "T", &m, &n, &k, &one,
          <double*> <void*> &below[0, 0], &m,
          <double*> <void*> &dz[0, 0], &ldb,
          &zero, &gw[0, 0], &m)


cdef inline void _gemm_dh(const double[:, ::1] dz, const double[:, ::1] w, double[:, ::1] dh) noexcept nogil:
    # dh (B, din) = dz (B, dout) @ w (dout, din)
    cdef int m = <int> dh.shape[1]
    cdef int n = <int> dh.shape[0]
    cdef int k = <int> dz.shape[1]
    cdef double one = 1.0, zero = 0.0
    dgemm("N", "N", &m, &n, &k, &one,
          <double*> <void*> &w[0, 0], &m,
          <double*> <void*> &dz[0, 0], &k,
          &zero, &dh[0, 0], &m)


cdef const double[:, ::1] _as_c2d(object a):
    return np.ascontiguousarray(a, dtype=np.float64)


cdef const double[::1] _as_c1d(object a):
    return np.ascontiguousarray(a, dtype=np.float64)


def mlp_forward(object feats, object weights, object biases):
    """Batched forward pass; returns (out, post-tanh hidden cache)."""
    cdef object farr = np.ascontiguousarray(feats, dtype=np.float64)
    if farr.ndim != 2:
        raise ValueError("feats must be 2-D")
    cdef Py_ssize_t last = len(weights) - 1
    cdef list hiddens = []
    cdef object h_obj = farr
    cdef const double[:, ::1] h, w
    cdef const double[::1] b
    cdef double[:, ::1] z
    cdef object z_arr
    cdef Py_ssize_t l, i, j, rows, dout
    for l in range(last + 1):
        h = _as_c2d(h_obj)
        w = _as_c2d(weights[l])
        b = _as_c1d(biases[l])
        rows = h.shape[0]
        dout = w.shape[0]
        if w.shape[1] != h.shape[1] or b.shape[0] != dout:
            raise ValueError("layer shape mismatch")
        z_arr = np.empty((rows, dout), dtype=np.float64)
        z = z_arr
        _gemm_out(w, h, z)
        if l < last:
            for i in range(rows):
                for j in range(dout):
                    z[i, j] = tanh(z[i, j] + b[j])
            hiddens.append(z_arr)
            h_obj = z_arr
        else:
            for i in range(rows):
                for j in range(dout):
                    z[i, j] = z[i, j] + b[j]
    return z_arr, hiddens


def mlp_backward(object feats, object hiddens, object weights, object upstream):
    """Gradients of sum_i <upstream[i], out[i]> w.r.t. weights and biases."""
    cdef Py_ssize_t n_layers = len(weights)
    cdef list grad_w = [None] * n_layers
    cdef list grad_b = [None] * n_layers
    cdef object dz_obj = np.ascontiguousarray(upstream, dtype=np.float64)
    cdef object below_obj, gw_arr, gb_arr, dh_arr
    cdef const double[:, ::1] dz, below, w, hid
    cdef double[:, ::1] gw, dh
    cdef double[::1] gb
    cdef Py_ssize_t l, i, j, rows, dout, din
    cdef double s
    for l in range(n_layers - 1, -1, -1):
        below_obj = feats if l == 0 else hiddens[l - 1]
        dz = _as_c2d(dz_obj)
        below = _as_c2d(below_obj)
        rows = dz.shape[0]
        dout = dz.shape[1]
        din = below.shape[1]
        gw_arr = np.empty((dout, din), dtype=np.float64)
        gw = gw_arr
        _gemm_grad_w(dz, below, gw)
        gb_arr = np.empty(dout, dtype=np.float64)
        gb = gb_arr
        for j in range(dout):
            s = 0.0
            for i in range(rows):
                s += dz[i, j]
            gb[j] = s
        grad_w[l] = gw_arr
        grad_b[l] = gb_arr
        if l > 0:
            w = _as_c2d(weights[l])
            hid = _as_c2d(hiddens[l - 1])
            dh_arr = np.empty((rows, din), dtype=np.float64)
            dh = dh_arr
            _gemm_dh(dz, w, dh)
            for i in range(rows):
                for j in range(din):
                    dh[i, j] = dh[i, j] * (1.0 - hid[i, j] * hid[i, j])
            dz_obj = dh_arr
    return grad_w, grad_b
