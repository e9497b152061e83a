"""Pure-numpy reference implementation of the assembly kernels.

Shapes used throughout (``e`` elements, ``q`` quadrature points per
element, ``j``/``k`` local basis functions, ``a``/``b`` spatial axes):

``vgrad``
    ``(e, q, 6, 2)`` physical gradients of the quadratic basis.
``vval``
    ``(q, 6)`` reference values of the quadratic basis (same on every
    element for an affine map).
``detw``
    ``(e, q)`` quadrature weight times absolute Jacobian determinant.
``uloc``
    ``(e, 2, 6)`` per-element velocity coefficients, component first.
"""

import numpy as np


def field_gradients(vgrad, uloc):
    """Velocity gradient tensor at quadrature points, shape ``(e, q, 2, 2)``.

    ``G[e, q, a, b]`` is the derivative of component ``a`` along axis ``b``.
    """
    return np.ascontiguousarray(
        np.einsum("eaj,eqjb->eqab", uloc, vgrad, optimize=True)
    )


def field_values(vval, uloc):
    """Velocity values at quadrature points, shape ``(e, q, 2)``."""
    return np.ascontiguousarray(
        np.einsum("eaj,qj->eqa", uloc, vval, optimize=True)
    )


def frobenius_norm(grad):
    """Pointwise Frobenius norm of a ``(e, q, 2, 2)`` tensor field."""
    return np.ascontiguousarray(
        np.sqrt(np.einsum("eqab,eqab->eq", grad, grad, optimize=True))
    )


def weighted_stiffness_local(vgrad, detw, weight=None):
    """Local matrices of ``(w grad u, grad v)``, shape ``(e, n, n)``.

    ``weight`` is a ``(e, q)`` field or ``None`` for the plain stiffness.
    """
    coeff = detw if weight is None else detw * weight
    return np.ascontiguousarray(
        np.einsum("eq,eqjb,eqkb->ejk", coeff, vgrad, vgrad, optimize=True)
    )


def weighted_mass_local(val, detw, weight=None):
    """Local matrices of ``(w u, v)`` for a scalar basis, shape ``(e, n, n)``.

    ``val`` has shape ``(q, n)``; works for both the quadratic and the
    linear basis.
    """
    coeff = detw if weight is None else detw * weight
    return np.ascontiguousarray(
        np.einsum("eq,qj,qk->ejk", coeff, val, val, optimize=True)
    )


def convection_local(vval, vgrad, detw, wq):
    """Local matrices of ``((z . grad) u, v)`` per scalar component.

    ``wq`` holds the convecting field at quadrature points, shape
    ``(e, q, 2)``.  The same 6x6 block applies to both velocity
    components, so only the scalar block is returned.
    """
    zdg = np.einsum("eqb,eqkb->eqk", wq, vgrad, optimize=True)
    return np.ascontiguousarray(
        np.einsum("eq,qj,eqk->ejk", detw, vval, zdg, optimize=True)
    )


def convection_dual_local(vval, detw, gz):
    """Local matrices of ``((u . grad) z, v)``, shape ``(e, 12, 12)``.

    ``gz`` is the gradient of the frozen field ``z`` at quadrature
    points, shape ``(e, q, 2, 2)``.  Row index ``a*6 + j`` is the test
    component/basis pair, column index ``b*6 + k`` the trial pair.
    """
    n_el, n_qp = detw.shape
    blocks = np.einsum("eq,qj,qk,eqab->eajbk", detw, vval, vval, gz, optimize=True)
    return np.ascontiguousarray(blocks.reshape(n_el, 12, 12))


def rank_one_viscosity_local(vgrad, detw, gw, gmag, scale, eps):
    """Local matrices of the eddy-viscosity derivative term, ``(e, 12, 12)``.

    For each quadrature point the integrand is the rank-one form
    ``scale / max(|G|, eps) * (G : grad z)(G : grad v)`` where ``G`` is the
    frozen velocity gradient ``gw``.  ``scale`` is a per-element factor and
    ``eps`` regularizes the norm where the gradient vanishes.
    """
    n_el, n_qp = detw.shape
    dvec = np.einsum("eqbc,eqkc->eqbk", gw, vgrad, optimize=True).reshape(
        n_el, n_qp, 12
    )
    coeff = detw * (scale[:, None] / np.maximum(gmag, eps))
    return np.ascontiguousarray(
        np.einsum("eq,eqi,eqj->eij", coeff, dvec, dvec, optimize=True)
    )


def divergence_local(pval, vgrad, detw):
    """Local matrices of ``-(div u, r)``, shape ``(e, 3, 12)``.

    Rows are linear pressure test functions, column ``b*6 + k`` is the
    velocity trial pair.
    """
    n_el, n_qp = detw.shape
    blocks = -np.einsum("eq,ql,eqkb->elbk", detw, pval, vgrad, optimize=True)
    return np.ascontiguousarray(blocks.reshape(n_el, 3, 12))
