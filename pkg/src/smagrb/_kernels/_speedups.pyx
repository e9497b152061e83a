# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled assembly kernels.

Signatures and semantics mirror :mod:`smagrb._kernels.fallback`; the
parity tests compare both implementations on random data.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def field_gradients(double[:, :, :, ::1] vgrad, double[:, :, ::1] uloc):
    cdef Py_ssize_t n_el = vgrad.shape[0]
    cdef Py_ssize_t n_qp = vgrad.shape[1]
    cdef Py_ssize_t nb = vgrad.shape[2]
    out = np.zeros((n_el, n_qp, 2, 2))
    cdef double[:, :, :, ::1] g = out
    cdef Py_ssize_t e, q, j, a
    cdef double c
    for e in range(n_el):
        for q in range(n_qp):
            for a in range(2):
                for j in range(nb):
                    c = uloc[e, a, j]
                    g[e, q, a, 0] += c * vgrad[e, q, j, 0]
                    g[e, q, a, 1] += c * vgrad[e, q, j, 1]
    return out


def field_values(double[:, ::1] vval, double[:, :, ::1] uloc):
    cdef Py_ssize_t n_el = uloc.shape[0]
    cdef Py_ssize_t nb = uloc.shape[2]
    cdef Py_ssize_t n_qp = vval.shape[0]
    out = np.zeros((n_el, n_qp, 2))
    cdef double[:, :, ::1] v = out
    cdef Py_ssize_t e, q, j, a
    cdef double acc
    for e in range(n_el):
        for q in range(n_qp):
            for a in range(2):
                acc = 0.0
                for j in range(nb):
                    acc += uloc[e, a, j] * vval[q, j]
                v[e, q, a] = acc
    return out


def frobenius_norm(double[:, :, :, ::1] grad):
    cdef Py_ssize_t n_el = grad.shape[0]
    cdef Py_ssize_t n_qp = grad.shape[1]
    out = np.empty((n_el, n_qp))
    cdef double[:, ::1] m = out
    cdef Py_ssize_t e, q
    cdef double s
    for e in range(n_el):
        for q in range(n_qp):
            s = (grad[e, q, 0, 0] * grad[e, q, 0, 0]
                 + grad[e, q, 0, 1] * grad[e, q, 0, 1]
                 + grad[e, q, 1, 0] * grad[e, q, 1, 0]
                 + grad[e, q, 1, 1] * grad[e, q, 1, 1])
            m[e, q] = s ** 0.5
    return out


def weighted_stiffness_local(double[:, :, :, ::1] vgrad, double[:, ::1] detw,
                             weight=None):
    cdef Py_ssize_t n_el = vgrad.shape[0]
    cdef Py_ssize_t n_qp = vgrad.shape[1]
    cdef Py_ssize_t nb = vgrad.shape[2]
    out = np.zeros((n_el, nb, nb))
    cdef double[:, :, ::1] k = out
    cdef double[:, ::1] w
    cdef bint has_w = weight is not None
    if has_w:
        w = weight
    cdef Py_ssize_t e, q, i, j
    cdef double c, gx, gy
    for e in range(n_el):
        for q in range(n_qp):
            c = detw[e, q]
            if has_w:
                c *= w[e, q]
            for i in range(nb):
                gx = c * vgrad[e, q, i, 0]
                gy = c * vgrad[e, q, i, 1]
                for j in range(nb):
                    k[e, i, j] += gx * vgrad[e, q, j, 0] + gy * vgrad[e, q, j, 1]
    return out


def weighted_mass_local(double[:, ::1] val, double[:, ::1] detw, weight=None):
    cdef Py_ssize_t n_el = detw.shape[0]
    cdef Py_ssize_t n_qp = detw.shape[1]
    cdef Py_ssize_t nb = val.shape[1]
    out = np.zeros((n_el, nb, nb))
    cdef double[:, :, ::1] m = out
    cdef double[:, ::1] w
    cdef bint has_w = weight is not None
    if has_w:
        w = weight
    cdef Py_ssize_t e, q, i, j
    cdef double c, vi
    for e in range(n_el):
        for q in range(n_qp):
            c = detw[e, q]
            if has_w:
                c *= w[e, q]
            for i in range(nb):
                vi = c * val[q, i]
                for j in range(nb):
                    m[e, i, j] += vi * val[q, j]
    return out


def convection_local(double[:, ::1] vval, double[:, :, :, ::1] vgrad,
                     double[:, ::1] detw, double[:, :, ::1] wq):
    cdef Py_ssize_t n_el = vgrad.shape[0]
    cdef Py_ssize_t n_qp = vgrad.shape[1]
    cdef Py_ssize_t nb = vgrad.shape[2]
    out = np.zeros((n_el, nb, nb))
    cdef double[:, :, ::1] cmat = out
    cdef Py_ssize_t e, q, j, k
    cdef double c, zg
    for e in range(n_el):
        for q in range(n_qp):
            c = detw[e, q]
            for k in range(nb):
                zg = c * (wq[e, q, 0] * vgrad[e, q, k, 0]
                          + wq[e, q, 1] * vgrad[e, q, k, 1])
                for j in range(nb):
                    cmat[e, j, k] += vval[q, j] * zg
    return out


def convection_dual_local(double[:, ::1] vval, double[:, ::1] detw,
                          double[:, :, :, ::1] gz):
    cdef Py_ssize_t n_el = detw.shape[0]
    cdef Py_ssize_t n_qp = detw.shape[1]
    cdef Py_ssize_t nb = vval.shape[1]
    out = np.zeros((n_el, 2 * nb, 2 * nb))
    cdef double[:, :, ::1] m = out
    cdef Py_ssize_t e, q, a, b, j, k
    cdef double c, vj
    for e in range(n_el):
        for q in range(n_qp):
            c = detw[e, q]
            for a in range(2):
                for j in range(nb):
                    vj = c * vval[q, j]
                    for b in range(2):
                        for k in range(nb):
                            m[e, a * nb + j, b * nb + k] += (
                                vj * vval[q, k] * gz[e, q, a, b])
    return out


def rank_one_viscosity_local(double[:, :, :, ::1] vgrad, double[:, ::1] detw,
                             double[:, :, :, ::1] gw, double[:, ::1] gmag,
                             double[::1] scale, double eps):
    cdef Py_ssize_t n_el = vgrad.shape[0]
    cdef Py_ssize_t n_qp = vgrad.shape[1]
    cdef Py_ssize_t nb = vgrad.shape[2]
    out = np.zeros((n_el, 2 * nb, 2 * nb))
    cdef double[:, :, ::1] m = out
    cdef double dvec[12]
    cdef Py_ssize_t e, q, b, k, i, j
    cdef double c, g
    for e in range(n_el):
        for q in range(n_qp):
            g = gmag[e, q]
            if g < eps:
                g = eps
            c = detw[e, q] * scale[e] / g
            for b in range(2):
                for k in range(nb):
                    dvec[b * nb + k] = (gw[e, q, b, 0] * vgrad[e, q, k, 0]
                                        + gw[e, q, b, 1] * vgrad[e, q, k, 1])
            for i in range(2 * nb):
                for j in range(2 * nb):
                    m[e, i, j] += c * dvec[i] * dvec[j]
    return out


def divergence_local(double[:, ::1] pval, double[:, :, :, ::1] vgrad,
                     double[:, ::1] detw):
    cdef Py_ssize_t n_el = vgrad.shape[0]
    cdef Py_ssize_t n_qp = vgrad.shape[1]
    cdef Py_ssize_t nb = vgrad.shape[2]
    cdef Py_ssize_t np_ = pval.shape[1]
    out = np.zeros((n_el, np_, 2 * nb))
    cdef double[:, :, ::1] m = out
    cdef Py_ssize_t e, q, l, b, k
    cdef double c
    for e in range(n_el):
        for q in range(n_qp):
            for l in range(np_):
                c = detw[e, q] * pval[q, l]
                for b in range(2):
                    for k in range(nb):
                        m[e, l, b * nb + k] -= c * vgrad[e, q, k, b]
    return out
