"""Sparse assembly of all bilinear and nonlinear forms on a Taylor-Hood space.

Every function here takes an :class:`smagrb.spaces.FESpace` plus plain
numpy coefficient vectors and returns scipy sparse matrices (CSR) or
dense vectors.  Element-level number crunching is delegated to
:mod:`smagrb._kernels`; this module owns connectivity, sparsity patterns
and boundary-condition bookkeeping.

Sign conventions
----------------
The divergence matrix ``B`` discretizes ``b(v, q) = -(div v, q)``, so the
momentum equation carries ``B^T p`` and the continuity equation reads
``B u = 0``.  A velocity unknown ``u`` is always the homogeneous part; the
lifted field is ``w = u + lift``.
"""

import dataclasses

import numpy as np
import scipy.sparse as sparse
import scipy.sparse.linalg as spla

from . import _kernels as kernels
from .exceptions import SingularSystemError

#: regularization floor for the gradient norm in derivative terms
EPS_GRADIENT = 1e-12


class PatternAssembler:
    """Repeated sparse assembly on a fixed sparsity pattern.

    The constructor sorts the raw (row, col) pairs of all local entries
    once; :meth:`assemble` then reduces any per-element value array onto
    the pattern with a single ``bincount``.  Optional dof maps restrict
    to a subset of rows/columns (entries mapped to -1 are dropped),
    which is how Dirichlet dofs are eliminated without renumbering.
    """

    def __init__(self, rows, cols, shape, row_map=None, col_map=None):
        rows = np.asarray(rows).ravel()
        cols = np.asarray(cols).ravel()
        if row_map is not None:
            rows = row_map[rows]
            shape = (int(row_map.max()) + 1, shape[1])
        if col_map is not None:
            cols = col_map[cols]
            shape = (shape[0], int(col_map.max()) + 1)
        keep = (rows >= 0) & (cols >= 0)
        self._keep = None if keep.all() else keep
        rows, cols = rows[keep], cols[keep]
        order = np.lexsort((cols, rows))
        r, c = rows[order], cols[order]
        first = np.ones(r.size, dtype=bool)
        first[1:] = (r[1:] != r[:-1]) | (c[1:] != c[:-1])
        pos_sorted = np.cumsum(first) - 1
        self.nnz = int(pos_sorted[-1]) + 1 if r.size else 0
        position = np.empty(r.size, dtype=np.int64)
        position[order] = pos_sorted
        self._position = position
        self._shape = shape
        self._indices = c[first].astype(np.int32)
        row_unique = r[first]
        self._indptr = np.zeros(shape[0] + 1, dtype=np.int32)
        np.add.at(self._indptr, row_unique + 1, 1)
        np.cumsum(self._indptr, out=self._indptr)

    def assemble(self, local_values):
        """Sum raveled per-element local entries into a CSR matrix."""
        values = np.asarray(local_values).ravel()
        if self._keep is not None:
            values = values[self._keep]
        data = np.bincount(self._position, weights=values, minlength=self.nnz)
        return sparse.csr_matrix(
            (data, self._indices, self._indptr), shape=self._shape
        )


def _cache(space):
    cache = getattr(space, "_assembly_cache", None)
    if cache is None:
        cache = {}
        space._assembly_cache = cache
    return cache


def _conn_vector(space):
    cache = _cache(space)
    if "conn_vector" not in cache:
        cache["conn_vector"] = np.concatenate(
            [space.conn, space.conn + space.n_scalar], axis=1
        )
    return cache["conn_vector"]


def scalar_pattern(space, row_map=None, col_map=None, key=None):
    """Fixed 6x6-per-element pattern on the scalar quadratic space."""
    cache = _cache(space)
    cache_key = ("scalar_pattern", key)
    if cache_key not in cache:
        conn = space.conn
        rows = np.repeat(conn, 6, axis=1)
        cols = np.tile(conn, 6)
        n = space.n_scalar
        cache[cache_key] = PatternAssembler(rows, cols, (n, n), row_map, col_map)
    return cache[cache_key]


def vector_pattern(space, row_map=None, col_map=None, key=None):
    """Fixed 12x12-per-element pattern on the velocity space."""
    cache = _cache(space)
    cache_key = ("vector_pattern", key)
    if cache_key not in cache:
        conn = _conn_vector(space)
        rows = np.repeat(conn, 12, axis=1)
        cols = np.tile(conn, 12)
        n = space.n_velocity
        cache[cache_key] = PatternAssembler(rows, cols, (n, n), row_map, col_map)
    return cache[cache_key]


def divergence_pattern(space):
    cache = _cache(space)
    if "divergence_pattern" not in cache:
        conn_v = _conn_vector(space)
        rows = np.repeat(space.conn_p, 12, axis=1)
        cols = np.tile(conn_v, 3)
        cache["divergence_pattern"] = PatternAssembler(
            rows, cols, (space.n_pressure, space.n_velocity)
        )
    return cache["divergence_pattern"]


def _expand_blockdiag(mat):
    """Vector-valued operator acting identically on both components."""
    return sparse.block_diag((mat, mat), format="csr")


def assemble_scalar_stiffness(space, weight=None):
    """Stiffness matrix of the scalar quadratic space, optionally weighted."""
    local = kernels.weighted_stiffness_local(space.vgrad, space.detw, weight)
    return scalar_pattern(space).assemble(local)


def assemble_diffusion(space):
    """Vector diffusion matrix ``(grad u, grad v)`` (cached)."""
    cache = _cache(space)
    if "diffusion" not in cache:
        cache["diffusion"] = _expand_blockdiag(assemble_scalar_stiffness(space))
    return cache["diffusion"]


def assemble_velocity_mass(space):
    """Vector mass matrix ``(u, v)`` (cached)."""
    cache = _cache(space)
    if "velocity_mass" not in cache:
        local = kernels.weighted_mass_local(space.vval, space.detw)
        cache["velocity_mass"] = _expand_blockdiag(
            scalar_pattern(space).assemble(local)
        )
    return cache["velocity_mass"]


def assemble_pressure_mass(space):
    """Pressure mass matrix on the linear space (cached)."""
    cache = _cache(space)
    if "pressure_mass" not in cache:
        local = kernels.weighted_mass_local(space.pval, space.detw)
        conn = space.conn_p
        rows = np.repeat(conn, 3, axis=1)
        cols = np.tile(conn, 3)
        pat = PatternAssembler(rows, cols, (space.n_pressure, space.n_pressure))
        cache["pressure_mass"] = pat.assemble(local)
    return cache["pressure_mass"]


def assemble_divergence(space):
    """Divergence matrix ``B`` with ``(B u)_l = -(div u, psi_l)`` (cached)."""
    cache = _cache(space)
    if "divergence" not in cache:
        local = kernels.divergence_local(space.pval, space.vgrad, space.detw)
        cache["divergence"] = divergence_pattern(space).assemble(local)
    return cache["divergence"]


def velocity_gradients(space, coeffs):
    """Gradient tensor of a velocity field at all quadrature points."""
    return kernels.field_gradients(space.vgrad, space.gather_velocity(coeffs))


def velocity_values(space, coeffs):
    """Values of a velocity field at all quadrature points."""
    return kernels.field_values(space.vval, space.gather_velocity(coeffs))


def gradient_magnitude(space, coeffs):
    """Pointwise Frobenius norm of the velocity gradient, shape ``(e, q)``."""
    return kernels.frobenius_norm(velocity_gradients(space, coeffs))


def eddy_viscosity(space, coeffs, c_s):
    """Smagorinsky eddy viscosity ``(c_s h_K)^2 |grad w|`` at quadrature points."""
    return (c_s * space.h[:, None]) ** 2 * gradient_magnitude(space, coeffs)


def assemble_weighted_vector_stiffness(space, weight):
    """Vector form ``(w grad u, grad v)`` for a quadrature-point weight."""
    local = kernels.weighted_stiffness_local(space.vgrad, space.detw, weight)
    return _expand_blockdiag(scalar_pattern(space).assemble(local))


def assemble_smagorinsky(space, coeffs, c_s):
    """Eddy-viscosity diffusion ``(nu_T(w) grad u, grad v)`` for ``w`` given
    by ``coeffs`` (a full lifted field)."""
    return assemble_weighted_vector_stiffness(
        space, eddy_viscosity(space, coeffs, c_s)
    )


def assemble_convection(space, coeffs):
    """Convection ``((z . grad) u, v)`` with frozen convecting field ``z``."""
    wq = velocity_values(space, coeffs)
    local = kernels.convection_local(space.vval, space.vgrad, space.detw, wq)
    return _expand_blockdiag(scalar_pattern(space).assemble(local))


def assemble_convection_dual(space, coeffs):
    """Convection by the unknown, ``((u . grad) z, v)``, with frozen ``z``."""
    gz = velocity_gradients(space, coeffs)
    local = kernels.convection_dual_local(space.vval, space.detw, gz)
    return vector_pattern(space).assemble(local)


def assemble_viscosity_derivative(space, coeffs, c_s, eps=EPS_GRADIENT):
    """Derivative of the eddy-viscosity term at the lifted field ``coeffs``.

    Discretizes ``(c_s h_K)^2 (grad w : grad z / max(|grad w|, eps))
    (grad w : grad v)``, the rank-one part of the Smagorinsky Jacobian.
    """
    gw = velocity_gradients(space, coeffs)
    gmag = kernels.frobenius_norm(gw)
    scale = (c_s * space.h) ** 2
    local = kernels.rank_one_viscosity_local(
        space.vgrad, space.detw, gw, gmag, scale, eps
    )
    return vector_pattern(space).assemble(local)


def assemble_energy_gram(space, weight):
    """Gram matrix of the energy inner product ``(w grad u, grad v)``.

    ``weight`` must be strictly positive at every quadrature point for
    this to define an inner product.
    """
    weight = np.asarray(weight)
    if weight.min() <= 0.0:
        raise ValueError(
            f"energy weight must be strictly positive, min is {weight.min():.3e}"
        )
    return assemble_weighted_vector_stiffness(space, weight)


def assemble_weighted_vector_mass(space, weight):
    """Vector mass with a quadrature-point weight, ``(w u, v)``."""
    local = kernels.weighted_mass_local(space.vval, space.detw, weight)
    return _expand_blockdiag(scalar_pattern(space).assemble(local))


def assemble_load(space, f):
    """Body force vector for a callable ``f(x, y) -> (fx, fy)``."""
    x = space.qp_coords[..., 0]
    y = space.qp_coords[..., 1]
    fx, fy = f(x, y)
    out = np.zeros(space.n_velocity)
    for comp, values in enumerate((fx, fy)):
        local = np.einsum(
            "eq,qj->ej", space.detw * values, space.vval, optimize=True
        )
        block = np.bincount(
            space.conn.ravel(), weights=local.ravel(), minlength=space.n_scalar
        )
        out[comp * space.n_scalar : (comp + 1) * space.n_scalar] = block
    return out


def velocity_l4_norm(space, coeffs):
    """Quadrature-rule L4 norm of a velocity field."""
    vq = velocity_values(space, coeffs)
    mag2 = vq[..., 0] ** 2 + vq[..., 1] ** 2
    return float((space.detw * mag2**2).sum()) ** 0.25


@dataclasses.dataclass
class AssemblyContext:
    """Parameter bundle shared by Jacobian, residual and right-hand side.

    ``mu`` is the Reynolds-like parameter scaling the diffusion as
    ``1/mu``, ``c_s`` the Smagorinsky constant and ``lift`` the full
    velocity vector carrying the Dirichlet data.
    """

    mu: float
    c_s: float
    lift: np.ndarray
    eps_reg: float = EPS_GRADIENT


def assemble_jacobian(space, ctx, u):
    """Velocity-block Jacobian of the steady operator at ``u``.

    Returns a full (unrestricted) CSR matrix; callers restrict to free
    dofs and append the divergence blocks.
    """
    w = u + ctx.lift
    scalar = kernels.weighted_stiffness_local(
        space.vgrad, space.detw, eddy_viscosity(space, w, ctx.c_s)
    )
    scalar += (1.0 / ctx.mu) * kernels.weighted_stiffness_local(
        space.vgrad, space.detw
    )
    wq = velocity_values(space, w)
    scalar += kernels.convection_local(space.vval, space.vgrad, space.detw, wq)
    jac = _expand_blockdiag(scalar_pattern(space).assemble(scalar))
    jac = jac + assemble_convection_dual(space, w)
    jac = jac + assemble_viscosity_derivative(space, w, ctx.c_s, ctx.eps_reg)
    return jac


def apply_operator(space, ctx, u, p, f_vec=None):
    """Evaluate the steady nonlinear operator at ``(u, p)``.

    Returns the full momentum and continuity residual vectors
    ``(r_u, r_p)`` with ``r_u = (1/mu) A0 w + C(w) w + S(w) w + B^T p -
    f`` for ``w = u + lift`` and ``r_p = B u``.
    """
    w = u + ctx.lift
    a0 = assemble_diffusion(space)
    b = assemble_divergence(space)
    r_u = (1.0 / ctx.mu) * (a0 @ w)
    r_u += assemble_convection(space, w) @ w
    r_u += assemble_smagorinsky(space, w, ctx.c_s) @ w
    r_u += b.T @ p
    if f_vec is not None:
        r_u -= f_vec
    return r_u, b @ u


def assemble_rhs_pieces(space, ctx, f_vec=None):
    """Parameter-separated right-hand side of the steady problem.

    The momentum functional is ``F(mu) = f0 + (1/mu) f1`` with ``f0``
    collecting the body force and the convective lift term and ``f1``
    the viscous lift term.  Returns ``(f0, f1)`` as full vectors.
    """
    lift = ctx.lift
    f0 = -(assemble_convection(space, lift) @ lift)
    if f_vec is not None:
        f0 = f0 + f_vec
    f1 = -(assemble_diffusion(space) @ lift)
    return f0, f1


class StateGram:
    """Norms and Riesz representers for the product state space.

    The velocity carries the energy inner product defined by ``vel_gram``
    and the pressure the plain L2 inner product; the state norm is the
    root of the sum of squares.  Dual norms restrict to the given free
    dofs, matching the test space of the discrete problem.
    """

    def __init__(self, space, vel_gram, free_velocity, free_pressure):
        self.space = space
        self.vel_gram = vel_gram
        self.free_velocity = free_velocity
        self.free_pressure = free_pressure
        self.pressure_mass = assemble_pressure_mass(space)
        self._vel_ff = vel_gram[free_velocity][:, free_velocity].tocsc()
        self._pr_ff = self.pressure_mass[free_pressure][:, free_pressure].tocsc()
        self._vel_solve = None
        self._pr_solve = None

    def _factor(self, mat, label):
        try:
            return spla.splu(mat)
        except RuntimeError as exc:
            raise SingularSystemError(f"{label} gram factorization failed: {exc}")

    def velocity_norm(self, u):
        return float(np.sqrt(max(u @ (self.vel_gram @ u), 0.0)))

    def pressure_norm(self, p):
        return float(np.sqrt(max(p @ (self.pressure_mass @ p), 0.0)))

    def state_norm(self, u, p):
        return float(np.hypot(self.velocity_norm(u), self.pressure_norm(p)))

    def riesz_velocity(self, r_free):
        """Riesz representer (on free dofs) of a momentum functional."""
        if self._vel_solve is None:
            self._vel_solve = self._factor(self._vel_ff, "velocity")
        return self._vel_solve.solve(r_free)

    def riesz_pressure(self, r_free):
        if self._pr_solve is None:
            self._pr_solve = self._factor(self._pr_ff, "pressure")
        return self._pr_solve.solve(r_free)

    def dual_norm(self, r_u_free, r_p_free):
        """Dual norm of a state residual restricted to free dofs."""
        vu = float(r_u_free @ self.riesz_velocity(r_u_free))
        vp = float(r_p_free @ self.riesz_pressure(r_p_free))
        return float(np.sqrt(max(vu, 0.0) + max(vp, 0.0)))
