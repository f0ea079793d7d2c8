# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled local-update kernels.

Each function runs the full K-step local phase for one client. The quadratic
kernels replicate the numpy fallback's elementwise operation order exactly,
so the two backends agree bitwise there; the logistic kernels accumulate dot
products sequentially and agree with the fallback to rounding error.
"""
import numpy as np

cimport numpy as cnp
from libc.math cimport exp, sqrt

cnp.import_array()


cdef inline void _quad_grad(double[::1] x, double[::1] a, double[::1] b,
                            double[::1] out, Py_ssize_t d) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(d):
        out[i] = a[i] * (x[i] - b[i])


cdef void _logistic_grad(double[::1] x, double[:, ::1] phi, long[::1] y,
                         long[:, ::1] idx, Py_ssize_t k, Py_ssize_t n_classes,
                         double[::1] scores, double[::1] out) noexcept nogil:
    # mean softmax cross-entropy gradient over minibatch row k of idx;
    # theta is x viewed as (n_classes, p) row-major
    cdef Py_ssize_t p = phi.shape[1]
    cdef Py_ssize_t batch = idx.shape[1]
    cdef Py_ssize_t r, c, j, row
    cdef double smax, ssum, coef, inv_batch
    inv_batch = 1.0 / batch
    for j in range(n_classes * p):
        out[j] = 0.0
    for r in range(batch):
        row = idx[k, r]
        for c in range(n_classes):
            scores[c] = 0.0
            for j in range(p):
                scores[c] += x[c * p + j] * phi[row, j]
        smax = scores[0]
        for c in range(1, n_classes):
            if scores[c] > smax:
                smax = scores[c]
        ssum = 0.0
        for c in range(n_classes):
            scores[c] = exp(scores[c] - smax)
            ssum += scores[c]
        for c in range(n_classes):
            coef = scores[c] / ssum
            if c == y[row]:
                coef -= 1.0
            coef *= inv_batch
            for j in range(p):
                out[c * p + j] += coef * phi[row, j]


# ---------------------------------------------------------------------------
# quadratic kernels
# ---------------------------------------------------------------------------

def prox_quadratic(x0, anchor, a, b, etas, double lam, noise=None):
    cdef cnp.ndarray[double, ndim=1] x_arr = np.array(x0, dtype=np.float64)
    cdef double[::1] x = x_arr
    cdef double[::1] anc = np.ascontiguousarray(anchor, dtype=np.float64)
    cdef double[::1] av = np.ascontiguousarray(a, dtype=np.float64)
    cdef double[::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    cdef double[::1] ev = np.ascontiguousarray(etas, dtype=np.float64)
    cdef double[:, ::1] nz
    cdef bint has_noise = noise is not None
    if has_noise:
        nz = np.ascontiguousarray(noise, dtype=np.float64)
    cdef Py_ssize_t d = x.shape[0], steps = ev.shape[0]
    cdef Py_ssize_t k, i
    cdef double g, step
    with nogil:
        for k in range(steps):
            for i in range(d):
                g = av[i] * (x[i] - bv[i])
                if has_noise:
                    g = g + nz[k, i]
                step = g + lam * (x[i] - anc[i])
                x[i] = x[i] - ev[k] * step
    return x_arr


def momentum_quadratic(x0, v0, a, b, etas, double momentum, noise=None):
    cdef cnp.ndarray[double, ndim=1] x_arr = np.array(x0, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] v_arr = np.array(v0, dtype=np.float64)
    cdef double[::1] x = x_arr
    cdef double[::1] v = v_arr
    cdef double[::1] av = np.ascontiguousarray(a, dtype=np.float64)
    cdef double[::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    cdef double[::1] ev = np.ascontiguousarray(etas, dtype=np.float64)
    cdef double[:, ::1] nz
    cdef bint has_noise = noise is not None
    if has_noise:
        nz = np.ascontiguousarray(noise, dtype=np.float64)
    cdef Py_ssize_t d = x.shape[0], steps = ev.shape[0]
    cdef Py_ssize_t k, i
    cdef double g
    with nogil:
        for k in range(steps):
            for i in range(d):
                g = av[i] * (x[i] - bv[i])
                if has_noise:
                    g = g + nz[k, i]
                v[i] = momentum * v[i] + g
                x[i] = x[i] - ev[k] * v[i]
    return x_arr, v_arr


def sam_quadratic(x0, a, b, etas, double rho, noise=None):
    cdef cnp.ndarray[double, ndim=1] x_arr = np.array(x0, dtype=np.float64)
    cdef double[::1] x = x_arr
    cdef double[::1] av = np.ascontiguousarray(a, dtype=np.float64)
    cdef double[::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    cdef double[::1] ev = np.ascontiguousarray(etas, dtype=np.float64)
    cdef double[::1] g1 = np.empty(x.shape[0])
    cdef double[::1] g2 = np.empty(x.shape[0])
    cdef double[::1] xp = np.empty(x.shape[0])
    cdef double[:, ::1] nz
    cdef bint has_noise = noise is not None
    if has_noise:
        nz = np.ascontiguousarray(noise, dtype=np.float64)
    cdef Py_ssize_t d = x.shape[0], steps = ev.shape[0]
    cdef Py_ssize_t k, i
    cdef double nrm, scale
    with nogil:
        for k in range(steps):
            _quad_grad(x, av, bv, g1, d)
            if has_noise:
                for i in range(d):
                    g1[i] = g1[i] + nz[k, i]
            nrm = 0.0
            for i in range(d):
                nrm += g1[i] * g1[i]
            nrm = sqrt(nrm)
            if nrm > 0.0 and rho != 0.0:
                scale = rho / nrm
                for i in range(d):
                    xp[i] = x[i] + scale * g1[i]
                _quad_grad(xp, av, bv, g2, d)
                if has_noise:
                    for i in range(d):
                        g2[i] = g2[i] + nz[k, i]
            else:
                for i in range(d):
                    g2[i] = g1[i]
            for i in range(d):
                x[i] = x[i] - ev[k] * g2[i]
    return x_arr


# ---------------------------------------------------------------------------
# logistic kernels
# ---------------------------------------------------------------------------

def prox_logistic(x0, anchor, phi, y, Py_ssize_t n_classes, etas, double lam,
                  idx, noise=None):
    cdef cnp.ndarray[double, ndim=1] x_arr = np.array(x0, dtype=np.float64)
    cdef double[::1] x = x_arr
    cdef double[::1] anc = np.ascontiguousarray(anchor, dtype=np.float64)
    cdef double[:, ::1] ph = np.ascontiguousarray(phi, dtype=np.float64)
    cdef long[::1] yv = np.ascontiguousarray(y, dtype=np.int64)
    cdef long[:, ::1] iv = np.ascontiguousarray(idx, dtype=np.int64)
    cdef double[::1] ev = np.ascontiguousarray(etas, dtype=np.float64)
    cdef double[::1] g = np.empty(x.shape[0])
    cdef double[::1] scores = np.empty(n_classes)
    cdef double[:, ::1] nz
    cdef bint has_noise = noise is not None
    if has_noise:
        nz = np.ascontiguousarray(noise, dtype=np.float64)
    cdef Py_ssize_t d = x.shape[0], steps = ev.shape[0]
    cdef Py_ssize_t k, i
    cdef double step
    with nogil:
        for k in range(steps):
            _logistic_grad(x, ph, yv, iv, k, n_classes, scores, g)
            for i in range(d):
                if has_noise:
                    g[i] = g[i] + nz[k, i]
                step = g[i] + lam * (x[i] - anc[i])
                x[i] = x[i] - ev[k] * step
    return x_arr


def momentum_logistic(x0, v0, phi, y, Py_ssize_t n_classes, etas,
                      double momentum, idx, noise=None):
    cdef cnp.ndarray[double, ndim=1] x_arr = np.array(x0, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] v_arr = np.array(v0, dtype=np.float64)
    cdef double[::1] x = x_arr
    cdef double[::1] v = v_arr
    cdef double[:, ::1] ph = np.ascontiguousarray(phi, dtype=np.float64)
    cdef long[::1] yv = np.ascontiguousarray(y, dtype=np.int64)
    cdef long[:, ::1] iv = np.ascontiguousarray(idx, dtype=np.int64)
    cdef double[::1] ev = np.ascontiguousarray(etas, dtype=np.float64)
    cdef double[::1] g = np.empty(x.shape[0])
    cdef double[::1] scores = np.empty(n_classes)
    cdef double[:, ::1] nz
    cdef bint has_noise = noise is not None
    if has_noise:
        nz = np.ascontiguousarray(noise, dtype=np.float64)
    cdef Py_ssize_t d = x.shape[0], steps = ev.shape[0]
    cdef Py_ssize_t k, i
    with nogil:
        for k in range(steps):
            _logistic_grad(x, ph, yv, iv, k, n_classes, scores, g)
            for i in range(d):
                if has_noise:
                    g[i] = g[i] + nz[k, i]
                v[i] = momentum * v[i] + g[i]
                x[i] = x[i] - ev[k] * v[i]
    return x_arr, v_arr


def sam_logistic(x0, phi, y, Py_ssize_t n_classes, etas, double rho, idx,
                 noise=None):
    cdef cnp.ndarray[double, ndim=1] x_arr = np.array(x0, dtype=np.float64)
    cdef double[::1] x = x_arr
    cdef double[:, ::1] ph = np.ascontiguousarray(phi, dtype=np.float64)
    cdef long[::1] yv = np.ascontiguousarray(y, dtype=np.int64)
    cdef long[:, ::1] iv = np.ascontiguousarray(idx, dtype=np.int64)
    cdef double[::1] ev = np.ascontiguousarray(etas, dtype=np.float64)
    cdef double[::1] g1 = np.empty(x.shape[0])
    cdef double[::1] g2 = np.empty(x.shape[0])
    cdef double[::1] xp = np.empty(x.shape[0])
    cdef double[::1] scores = np.empty(n_classes)
    cdef double[:, ::1] nz
    cdef bint has_noise = noise is not None
    if has_noise:
        nz = np.ascontiguousarray(noise, dtype=np.float64)
    cdef Py_ssize_t d = x.shape[0], steps = ev.shape[0]
    cdef Py_ssize_t k, i
    cdef double nrm, scale
    with nogil:
        for k in range(steps):
            _logistic_grad(x, ph, yv, iv, k, n_classes, scores, g1)
            if has_noise:
                for i in range(d):
                    g1[i] = g1[i] + nz[k, i]
            nrm = 0.0
            for i in range(d):
                nrm += g1[i] * g1[i]
            nrm = sqrt(nrm)
            if nrm > 0.0 and rho != 0.0:
                scale = rho / nrm
                for i in range(d):
                    xp[i] = x[i] + scale * g1[i]
                _logistic_grad(xp, ph, yv, iv, k, n_classes, scores, g2)
                if has_noise:
                    for i in range(d):
                        g2[i] = g2[i] + nz[k, i]
            else:
                for i in range(d):
                    g2[i] = g1[i]
            for i in range(d):
                x[i] = x[i] - ev[k] * g2[i]
    return x_arr
