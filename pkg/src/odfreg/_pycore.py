"""Pure numpy implementations of the hot loops in ``_ccore.pyx``.

Same signatures and semantics; used when the compiled extension is not
available or when ``ODFREG_BACKEND=python``.  Work is split into fixed-size
row chunks so results do not depend on ``nthreads`` (accepted and ignored).
"""
import numpy as np

_CHUNK = 512


def _sqdist(x, y):
    d = x[:, None, :] - y[None, :, :]
    return d, np.einsum("ijk,ijk->ij", d, d)


def gauss_matvec(x, y, a, sigma, nthreads=1):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    a = np.asarray(a, dtype=float)
    c = -0.5 / (sigma * sigma)
    out = np.empty((x.shape[0], 3))
    for s in range(0, x.shape[0], _CHUNK):
        _, d2 = _sqdist(x[s:s + _CHUNK], y)
        out[s:s + _CHUNK] = np.exp(c * d2) @ a
    return out


def gauss_adjoint(x, y, alpha, q, sigma, nthreads=1):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    q = np.asarray(q, dtype=float)
    c = -0.5 / (sigma * sigma)
    gx = np.empty((x.shape[0], 3))
    gy = np.zeros((y.shape[0], 3))
    for s in range(0, x.shape[0], _CHUNK):
        d, d2 = _sqdist(x[s:s + _CHUNK], y)
        w = np.exp(c * d2) * (q[s:s + _CHUNK] @ alpha.T)
        gx[s:s + _CHUNK] = -np.einsum("ij,ijk->ik", w, d) / sigma**2
        gy += np.einsum("ij,ijk->jk", w, d) / sigma**2
    return gx, gy


def sh_synth(coeffs, dirs, norm, idx_pos, idx_neg, qmm, order, nthreads=1):
    coeffs = np.asarray(coeffs, dtype=float)
    dirs = np.asarray(dirs, dtype=float)
    r = np.linalg.norm(dirs, axis=-1)
    x, y, z = (dirs[..., i] / r for i in range(3))
    cm = [np.ones_like(x)]
    sm = [np.zeros_like(x)]
    for m in range(1, order + 1):
        cm.append(cm[-1] * x - sm[-1] * y)
        sm.append(sm[-1] * x + cm[-2] * y)
    out = np.zeros_like(x)
    for m in range(order + 1):
        q1 = q2 = None
        for l in range(m, order + 1):
            if l == m:
                q = np.full_like(z, qmm[m])
            elif l == m + 1:
                q = z * (2 * m + 1) * q1
            else:
                q = ((2 * l - 1) * z * q1 - (l + m - 1) * q2) / (l - m)
            q2, q1 = q1, q
            if idx_pos[l, m] < 0:
                continue
            tmp = norm[l, m] * q
            if m == 0:
                out += coeffs[:, idx_pos[l, 0], None] * tmp
            else:
                out += tmp * (coeffs[:, idx_pos[l, m], None] * cm[m]
                              + coeffs[:, idx_neg[l, m], None] * sm[m])
    return out
