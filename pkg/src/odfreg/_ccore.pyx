# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: Gaussian kernel sums and real spherical-harmonic synthesis.

Every output element is accumulated by exactly one thread in a fixed
order, so results are bitwise independent of ``nthreads``.
"""
import numpy as np
from cython.parallel cimport prange
from libc.math cimport exp, sqrt

cdef void _row_matvec(const double* yx, const double* yy, const double* yz,
                      const double* a0, const double* a1, const double* a2, Py_ssize_t m,
                      double px, double py, double pz, double c, double* out) noexcept nogil:
    cdef Py_ssize_t j
    cdef double dx, dy, dz, k, s0 = 0.0, s1 = 0.0, s2 = 0.0
    for j in range(m):
        dx = px - yx[j]
        dy = py - yy[j]
        dz = pz - yz[j]
        k = exp(c * (dx * dx + dy * dy + dz * dz))
        s0 += k * a0[j]
        s1 += k * a1[j]
        s2 += k * a2[j]
    out[0] = s0
    out[1] = s1
    out[2] = s2


cdef void _row_adjoint(const double* yx, const double* yy, const double* yz,
                       const double* a0, const double* a1, const double* a2, Py_ssize_t m,
                       double px, double py, double pz, double q0, double q1, double q2,
                       double c, double* out) noexcept nogil:
    # sum_j k_ij (x_i - y_j) (a_j . q_i)
    cdef Py_ssize_t j
    cdef double dx, dy, dz, k, s0 = 0.0, s1 = 0.0, s2 = 0.0
    for j in range(m):
        dx = px - yx[j]
        dy = py - yy[j]
        dz = pz - yz[j]
        k = exp(c * (dx * dx + dy * dy + dz * dz)) * (a0[j] * q0 + a1[j] * q1 + a2[j] * q2)
        s0 += k * dx
        s1 += k * dy
        s2 += k * dz
    out[0] = s0
    out[1] = s1
    out[2] = s2


def gauss_matvec(const double[:, ::1] x, const double[:, ::1] y,
                 const double[:, ::1] a, double sigma, int nthreads=1):
    """out[i] = sum_j exp(-|x_i - y_j|^2 / (2 sigma^2)) a[j]"""
    cdef Py_ssize_t n = x.shape[0], m = y.shape[0], i
    cdef double c = -0.5 / (sigma * sigma)
    # struct-of-arrays copies keep the inner loop unit-stride
    cdef double[:, ::1] ys = np.ascontiguousarray(np.asarray(y).T)
    cdef double[:, ::1] as_ = np.ascontiguousarray(np.asarray(a).T)
    out = np.empty((n, 3), dtype=np.float64)
    cdef double[:, ::1] o = out
    if n == 0:
        return out
    if m == 0:
        out[:] = 0.0
        return out
    for i in prange(n, nogil=True, num_threads=nthreads, schedule="static"):
        _row_matvec(&ys[0, 0], &ys[1, 0], &ys[2, 0], &as_[0, 0], &as_[1, 0], &as_[2, 0], m,
                    x[i, 0], x[i, 1], x[i, 2], c, &o[i, 0])
    return out


def gauss_adjoint(const double[:, ::1] x, const double[:, ::1] y,
                  const double[:, ::1] alpha, const double[:, ::1] q,
                  double sigma, int nthreads=1):
    """Transpose of the derivative of ``gauss_matvec(x, y, alpha)`` w.r.t. x and y, applied to q.

    Returns ``(gx, gy)`` with
    gx[i] = -1/sigma^2 sum_j k_ij (x_i - y_j) (alpha_j . q_i)
    gy[j] = +1/sigma^2 sum_i k_ij (x_i - y_j) (alpha_j . q_i)
    """
    cdef Py_ssize_t n = x.shape[0], m = y.shape[0], i, j
    cdef double c = -0.5 / (sigma * sigma)
    cdef double inv_s2 = 1.0 / (sigma * sigma)
    gx = np.zeros((n, 3), dtype=np.float64)
    gy = np.zeros((m, 3), dtype=np.float64)
    if n == 0 or m == 0:
        return gx, gy
    cdef double[:, ::1] ox = gx
    cdef double[:, ::1] oy = gy
    cdef double[:, ::1] ys = np.ascontiguousarray(np.asarray(y).T)
    cdef double[:, ::1] als = np.ascontiguousarray(np.asarray(alpha).T)
    cdef double[:, ::1] xs = np.ascontiguousarray(np.asarray(x).T)
    cdef double[:, ::1] qs = np.ascontiguousarray(np.asarray(q).T)
    for i in prange(n, nogil=True, num_threads=nthreads, schedule="static"):
        _row_adjoint(&ys[0, 0], &ys[1, 0], &ys[2, 0], &als[0, 0], &als[1, 0], &als[2, 0], m,
                     x[i, 0], x[i, 1], x[i, 2], q[i, 0], q[i, 1], q[i, 2], c, &ox[i, 0])
        ox[i, 0] = -ox[i, 0] * inv_s2
        ox[i, 1] = -ox[i, 1] * inv_s2
        ox[i, 2] = -ox[i, 2] * inv_s2
    # the y-derivative swaps roles: sum_i k_ij (x_i - y_j) (q_i . alpha_j), negated
    for j in prange(m, nogil=True, num_threads=nthreads, schedule="static"):
        _row_adjoint(&xs[0, 0], &xs[1, 0], &xs[2, 0], &qs[0, 0], &qs[1, 0], &qs[2, 0], n,
                     y[j, 0], y[j, 1], y[j, 2], alpha[j, 0], alpha[j, 1], alpha[j, 2],
                     c, &oy[j, 0])
        oy[j, 0] = -oy[j, 0] * inv_s2
        oy[j, 1] = -oy[j, 1] * inv_s2
        oy[j, 2] = -oy[j, 2] * inv_s2
    return gx, gy


cdef enum:
    LMAX = 16


cdef double _synth_point(const double[:, ::1] coeffs, Py_ssize_t v,
                         double x, double y, double z,
                         const double[:, ::1] norm, const Py_ssize_t[:, ::1] idx_pos,
                         const Py_ssize_t[:, ::1] idx_neg, const double[::1] qmm,
                         int order) noexcept nogil:
    cdef double cm[LMAX + 1]
    cdef double sm[LMAX + 1]
    cdef double r, acc, q, q1, q2, tmp
    cdef int l, mm
    r = sqrt(x * x + y * y + z * z)
    x = x / r
    y = y / r
    z = z / r
    cm[0] = 1.0
    sm[0] = 0.0
    for mm in range(1, order + 1):
        cm[mm] = cm[mm - 1] * x - sm[mm - 1] * y
        sm[mm] = sm[mm - 1] * x + cm[mm - 1] * y
    acc = 0.0
    for mm in range(order + 1):
        q2 = 0.0
        q1 = 0.0
        for l in range(mm, order + 1):
            if l == mm:
                q = qmm[mm]
            elif l == mm + 1:
                q = z * (2 * mm + 1) * q1
            else:
                q = ((2 * l - 1) * z * q1 - (l + mm - 1) * q2) / (l - mm)
            q2 = q1
            q1 = q
            if idx_pos[l, mm] < 0:
                continue
            tmp = norm[l, mm] * q
            if mm == 0:
                acc = acc + coeffs[v, idx_pos[l, 0]] * tmp
            else:
                acc = acc + tmp * (coeffs[v, idx_pos[l, mm]] * cm[mm]
                                   + coeffs[v, idx_neg[l, mm]] * sm[mm])
    return acc


def sh_synth(const double[:, ::1] coeffs, const double[:, :, ::1] dirs,
             const double[:, ::1] norm, const Py_ssize_t[:, ::1] idx_pos,
             const Py_ssize_t[:, ::1] idx_neg, const double[::1] qmm,
             int order, int nthreads=1):
    """out[v, k] = sum_c coeffs[v, c] Y_c(dirs[v, k] / |dirs[v, k]|).

    ``norm[l, m]`` holds the orthonormalisation constant (sqrt(2) folded in
    for m > 0), ``idx_pos[l, m]`` / ``idx_neg[l, m]`` the coefficient index of
    the cosine / sine function (-1 when the degree is absent), ``qmm[m]`` the
    seed (-1)^m (2m-1)!! of the Legendre recurrence.
    """
    cdef Py_ssize_t nv = dirs.shape[0], nk = dirs.shape[1], v, kk
    if order > LMAX:
        raise ValueError("order exceeds compiled maximum")
    out = np.empty((nv, nk), dtype=np.float64)
    cdef double[:, ::1] o = out
    for v in prange(nv, nogil=True, num_threads=nthreads, schedule="static"):
        for kk in range(nk):
            o[v, kk] = _synth_point(coeffs, v, dirs[v, kk, 0], dirs[v, kk, 1], dirs[v, kk, 2],
                                    norm, idx_pos, idx_neg, qmm, order)
    return out
