# cython: language_level=3
"""Compiled selective-scan kernel; same contract as ``_scan_py``.

The loop itself lives in ``scan_core.h``; this module validates and
allocates buffers, then releases the GIL for the sweep.
"""

import numpy as np
cimport numpy as cnp

cdef extern from "scan_core.h" nogil:
    int ssm_scan_f32(const float *x, const float *delta, const float *A, const float *B,
                     const float *C, float *h, float *y, float *states, int store,
                     Py_ssize_t nb, Py_ssize_t L, Py_ssize_t D, Py_ssize_t N)
    int ssm_scan_f64(const double *x, const double *delta, const double *A, const double *B,
                     const double *C, double *h, double *y, double *states, int store,
                     Py_ssize_t nb, Py_ssize_t L, Py_ssize_t D, Py_ssize_t N)
    float ssm_expm1_f(float z)
    double ssm_expm1_d(double z)

cnp.import_array()


def expm1(z):
    """Elementwise expm1 using the kernel's own approximation (for testing)."""
    arr = np.asarray(z)
    out = np.empty_like(arr)
    flat_in = arr.reshape(-1)
    flat_out = out.reshape(-1)
    cdef Py_ssize_t i
    if arr.dtype == np.float32:
        for i in range(flat_in.shape[0]):
            flat_out[i] = ssm_expm1_f(flat_in[i])
    else:
        for i in range(flat_in.shape[0]):
            flat_out[i] = ssm_expm1_d(flat_in[i])
    return out


def selective_scan_fwd(x, delta, A, B, C, h0=None, store_states=False):
    dtype = np.asarray(x).dtype
    if dtype != np.float32 and dtype != np.float64:
        raise TypeError(f"unsupported dtype {dtype}")
    cdef cnp.ndarray xa = np.ascontiguousarray(x, dtype=dtype)
    cdef cnp.ndarray da = np.ascontiguousarray(delta, dtype=dtype)
    cdef cnp.ndarray Aa = np.ascontiguousarray(A, dtype=dtype)
    cdef cnp.ndarray Ba = np.ascontiguousarray(B, dtype=dtype)
    cdef cnp.ndarray Ca = np.ascontiguousarray(C, dtype=dtype)
    cdef Py_ssize_t nb = xa.shape[0], length = xa.shape[1], nd = xa.shape[2], nn = Aa.shape[1]
    if da.shape[0] != nb or da.shape[1] != length or da.shape[2] != nd:
        raise ValueError("delta shape must match x")
    if Aa.shape[0] != nd:
        raise ValueError("A must have shape (D, N)")
    for name, arr in (("B", Ba), ("C", Ca)):
        if arr.shape[0] != nb or arr.shape[1] != length or arr.shape[2] != nn:
            raise ValueError(f"{name} must have shape (batch, L, N)")
    cdef cnp.ndarray h
    if h0 is None:
        h = np.zeros((nb, nd, nn), dtype=dtype)
    else:
        h = np.array(h0, dtype=dtype, order="C")
        if h.shape[0] != nb or h.shape[1] != nd or h.shape[2] != nn:
            raise ValueError("h0 must have shape (batch, D, N)")
    cdef cnp.ndarray y = np.empty((nb, length, nd), dtype=dtype)
    if store_states:
        state_shape = (nb, length, nd, nn)
    else:
        state_shape = (1,)
    cdef cnp.ndarray states = np.empty(state_shape, dtype=dtype)
    cdef int store = 1 if store_states else 0
    cdef int rc
    if dtype == np.float32:
        with nogil:
            rc = ssm_scan_f32(<float *>xa.data, <float *>da.data, <float *>Aa.data,
                              <float *>Ba.data, <float *>Ca.data, <float *>h.data,
                              <float *>y.data, <float *>states.data, store, nb, length, nd, nn)
    else:
        with nogil:
            rc = ssm_scan_f64(<double *>xa.data, <double *>da.data, <double *>Aa.data,
                              <double *>Ba.data, <double *>Ca.data, <double *>h.data,
                              <double *>y.data, <double *>states.data, store, nb, length, nd, nn)
    if rc != 0:
        raise MemoryError("scan workspace allocation failed")
    return y, h, (states if store_states else None)
