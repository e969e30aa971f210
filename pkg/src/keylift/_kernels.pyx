# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Fused MLP kernels: forward, backward and Adam in one compiled module.

Same semantics as keylift._net_numpy (the import-time fallback); matrix
products go through BLAS dgemm, activations and the optimizer update run
as fused C loops, which removes the per-layer numpy dispatch and
temporary allocations that dominate at small batch sizes.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport sqrt
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

ACT_LINEAR = 0
ACT_TANH = 1
ACT_RELU = 2


cdef void _gemm_nn(double[:, ::1] a, double[:, ::1] w, double[:, ::1] out) noexcept:
    # row-major out (B,O) = a (B,I) @ w (I,O)
    cdef int B = <int> a.shape[0], I = <int> a.shape[1], O = <int> w.shape[1]
    cdef double one = 1.0, zero = 0.0
    cdef char cn = b'N'
    dgemm(&cn, &cn, &O, &B, &I, &one, &w[0, 0], &O, &a[0, 0], &I, &zero, &out[0, 0], &O)


cdef void _gemm_nt(double[:, ::1] g, double[:, ::1] w, double[:, ::1] out) noexcept:
    # row-major out (B,I) = g (B,O) @ w.T, w stored (I,O)
    cdef int B = <int> g.shape[0], O = <int> g.shape[1], I = <int> w.shape[0]
    cdef double one = 1.0, zero = 0.0
    cdef char cn = b'N', ct = b'T'
    dgemm(&ct, &cn, &I, &B, &O, &one, &w[0, 0], &O, &g[0, 0], &O, &zero, &out[0, 0], &I)


cdef void _gemm_tn(double[:, ::1] a, double[:, ::1] g, double[:, ::1] out) noexcept:
    # row-major out (I,O) = a.T @ g, a stored (B,I), g stored (B,O)
    cdef int B = <int> a.shape[0], I = <int> a.shape[1], O = <int> g.shape[1]
    cdef double one = 1.0, zero = 0.0
    cdef char cn = b'N', ct = b'T'
    dgemm(&cn, &ct, &O, &I, &B, &one, &g[0, 0], &O, &a[0, 0], &I, &zero, &out[0, 0], &O)


def mlp_forward(object x, list weights, list biases, object act_codes):
    """Run the affine+activation stack; returns (output, activations list)."""
    cdef list acts = [x]
    cdef double[:, ::1] a = x
    cdef double[:, ::1] z, wv
    cdef double[::1] bv
    cdef cnp.ndarray z_arr
    cdef int[:] codes = np.ascontiguousarray(act_codes, dtype=np.int32)
    cdef Py_ssize_t l, i, j, B, O
    cdef int code
    for l in range(len(weights)):
        wv = weights[l]
        bv = biases[l]
        B = a.shape[0]
        O = wv.shape[1]
        z_arr = np.empty((B, O), dtype=np.float64)
        z = z_arr
        _gemm_nn(a, wv, z)
        code = codes[l]
        if code == 2:
            for i in range(B):
                for j in range(O):
                    z[i, j] = z[i, j] + bv[j]
                    if z[i, j] < 0.0:
                        z[i, j] = 0.0
        else:
            for i in range(B):
                for j in range(O):
                    z[i, j] = z[i, j] + bv[j]
            if code == 1:
                # numpy's SIMD tanh beats a scalar libm loop by a wide margin
                np.tanh(z_arr, out=z_arr)
        acts.append(z_arr)
        a = z
    return acts[len(weights)], acts


def mlp_backward(object grad_out, list weights, object act_codes, list acts):
    """Exact reverse-mode gradients of mlp_forward; see the numpy reference."""
    cdef Py_ssize_t n_layers = len(weights)
    cdef list d_weights = [None] * n_layers
    cdef list d_biases = [None] * n_layers
    cdef int[:] codes = np.ascontiguousarray(act_codes, dtype=np.int32)
    cdef cnp.ndarray g_arr = np.array(grad_out, dtype=np.float64, copy=True, order="C")
    cdef cnp.ndarray dW_arr, db_arr, gx_arr
    cdef double[:, ::1] g = g_arr, a_out, a_in, dW, gx, wv
    cdef double[::1] db
    cdef Py_ssize_t l, i, j, B, O
    cdef int code
    cdef double s
    for l in range(n_layers - 1, -1, -1):
        a_out = acts[l + 1]
        a_in = acts[l]
        B = g.shape[0]
        O = g.shape[1]
        code = codes[l]
        if code == 1:
            for i in range(B):
                for j in range(O):
                    g[i, j] *= 1.0 - a_out[i, j] * a_out[i, j]
        elif code == 2:
            for i in range(B):
                for j in range(O):
                    if a_out[i, j] <= 0.0:
                        g[i, j] = 0.0
        wv = weights[l]
        dW_arr = np.empty((a_in.shape[1], O), dtype=np.float64)
        dW = dW_arr
        _gemm_tn(a_in, g, dW)
        db_arr = np.empty(O, dtype=np.float64)
        db = db_arr
        for j in range(O):
            s = 0.0
            for i in range(B):
                s += g[i, j]
            db[j] = s
        d_weights[l] = dW_arr
        d_biases[l] = db_arr
        gx_arr = np.empty((B, a_in.shape[1]), dtype=np.float64)
        gx = gx_arr
        _gemm_nt(g, wv, gx)
        g_arr = gx_arr
        g = gx
    return d_weights, d_biases, g_arr


def adam_update(list arrays, list grads, list m, list v, long step,
                double lr, double beta1, double beta2, double eps):
    """One bias-corrected Adam step, in place over a flat list of arrays."""
    cdef double c1 = 1.0 - beta1 ** step
    cdef double c2 = 1.0 - beta2 ** step
    cdef double[::1] p, g, mi, vi
    cdef Py_ssize_t k, n, idx
    cdef double gk
    for idx in range(len(arrays)):
        p = arrays[idx].ravel()
        g = np.ascontiguousarray(grads[idx], dtype=np.float64).ravel()
        mi = m[idx].ravel()
        vi = v[idx].ravel()
        n = p.shape[0]
        for k in range(n):
            gk = g[k]
            mi[k] = beta1 * mi[k] + (1.0 - beta1) * gk
            vi[k] = beta2 * vi[k] + (1.0 - beta2) * gk * gk
            p[k] -= lr * (mi[k] / c1) / (sqrt(vi[k] / c2) + eps)
