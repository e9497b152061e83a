"""Taylor-Hood finite element space on a triangulation.

Velocity uses continuous piecewise quadratics (nodes plus edge
midpoints), pressure continuous piecewise linears on the same mesh.
Scalar quadratic dofs are numbered vertices first, then ``n_nodes +
edge_index``; a velocity vector stores the x-component block followed by
the y-component block, so its length is ``2 * (n_nodes + n_edges)``.
Dirichlet constraints are not eliminated from the numbering: constrained
entries are simply kept at zero and solvers restrict to the free rows.

All integrals in the package use one fixed rule: the symmetric 7-point
triangle rule, exact for polynomials up to degree five.
"""

import dataclasses

import numpy as np

from . import meshing
from .exceptions import InvalidMeshError

#: local edges of the reference triangle, in dof order
LOCAL_EDGES = ((0, 1), (1, 2), (2, 0))


def triangle_quadrature():
    """Symmetric 7-point rule on the reference triangle, degree 5 exact.

    Returns ``(points, weights)`` where ``points`` has shape ``(7, 2)``
    in reference coordinates and the weights sum to the reference area
    one half.
    """
    s15 = np.sqrt(15.0)
    a = (6.0 + s15) / 21.0
    b = (6.0 - s15) / 21.0
    wa = (155.0 + s15) / 1200.0
    wb = (155.0 - s15) / 1200.0
    bary = np.array(
        [
            [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            [1.0 - 2.0 * a, a, a],
            [a, 1.0 - 2.0 * a, a],
            [a, a, 1.0 - 2.0 * a],
            [1.0 - 2.0 * b, b, b],
            [b, 1.0 - 2.0 * b, b],
            [b, b, 1.0 - 2.0 * b],
        ]
    )
    weights = 0.5 * np.array([9.0 / 40.0, wa, wa, wa, wb, wb, wb])
    points = bary[:, 1:]
    return points, weights


def quadratic_basis(points):
    """Values and reference gradients of the 6 quadratic basis functions.

    Dof order: the three vertices, then the midpoints of edges (0,1),
    (1,2), (2,0).  Returns ``(values, gradients)`` with shapes
    ``(n_pts, 6)`` and ``(n_pts, 6, 2)``.
    """
    x, y = points[:, 0], points[:, 1]
    lam = np.stack([1.0 - x - y, x, y], axis=1)
    grad_lam = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    n = points.shape[0]
    values = np.empty((n, 6))
    grads = np.empty((n, 6, 2))
    for i in range(3):
        values[:, i] = lam[:, i] * (2.0 * lam[:, i] - 1.0)
        grads[:, i] = (4.0 * lam[:, i] - 1.0)[:, None] * grad_lam[i]
    for m, (i, j) in enumerate(LOCAL_EDGES):
        values[:, 3 + m] = 4.0 * lam[:, i] * lam[:, j]
        grads[:, 3 + m] = 4.0 * (
            lam[:, i, None] * grad_lam[j] + lam[:, j, None] * grad_lam[i]
        )
    return values, grads


def linear_basis(points):
    """Values and reference gradients of the 3 linear basis functions."""
    x, y = points[:, 0], points[:, 1]
    values = np.stack([1.0 - x - y, x, y], axis=1)
    grads = np.broadcast_to(
        np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]]), (points.shape[0], 3, 2)
    ).copy()
    return values, grads


def _build_edges(triangles):
    """Unique mesh edges and the triangle-to-edge connectivity."""
    sides = np.concatenate(
        [triangles[:, list(pair)] for pair in LOCAL_EDGES]
    )
    sides = np.sort(sides, axis=1)
    edges, inverse = np.unique(sides, axis=0, return_inverse=True)
    tri_edges = inverse.reshape(3, triangles.shape[0]).T
    return edges, tri_edges


@dataclasses.dataclass
class FESpace:
    """Precomputed Taylor-Hood discretization data for one mesh.

    Geometry tables (``vgrad``, ``detw``, ``qp_coords``) are stored per
    element and quadrature point so that every assembly pass is a single
    vectorized sweep; see :mod:`smagrb._kernels` for the layout.
    """

    mesh: meshing.Mesh
    qpoints: np.ndarray
    qweights: np.ndarray
    edges: np.ndarray
    tri_edges: np.ndarray
    conn: np.ndarray
    conn_p: np.ndarray
    vval: np.ndarray
    pval: np.ndarray
    vgrad: np.ndarray
    detw: np.ndarray
    qp_coords: np.ndarray
    dof_coords: np.ndarray
    h: np.ndarray
    dirichlet_scalar: np.ndarray
    inflow_scalar: np.ndarray
    has_neumann: bool

    @property
    def n_nodes(self):
        return self.mesh.n_nodes

    @property
    def n_scalar(self):
        return self.n_nodes + self.edges.shape[0]

    @property
    def n_velocity(self):
        return 2 * self.n_scalar

    @property
    def n_pressure(self):
        return self.n_nodes

    @property
    def n_elements(self):
        return self.mesh.n_triangles

    @property
    def dirichlet_velocity(self):
        """Constrained velocity dofs (both components of each scalar dof)."""
        return np.concatenate(
            [self.dirichlet_scalar, self.n_scalar + self.dirichlet_scalar]
        )

    @property
    def free_scalar(self):
        mask = np.ones(self.n_scalar, dtype=bool)
        mask[self.dirichlet_scalar] = False
        return np.flatnonzero(mask)

    @property
    def free_velocity(self):
        free = self.free_scalar
        return np.concatenate([free, self.n_scalar + free])

    def gather_velocity(self, coeffs):
        """Per-element velocity coefficients, shape ``(e, 2, 6)``."""
        n = self.n_scalar
        return np.stack(
            [coeffs[: n][self.conn], coeffs[n:][self.conn]], axis=1
        )


def _dirichlet_sets(mesh, edges, n_nodes):
    """Scalar dofs on the Dirichlet boundary, split by tag.

    A dof touched by both an ``inflow`` and a ``wall`` edge counts as
    ``inflow`` so that boundary data is continuous at tag corners.
    """
    keys = edges[:, 0] * mesh.n_nodes + edges[:, 1]
    listed = np.sort(mesh.boundary_edges, axis=1)
    listed_keys = listed[:, 0] * mesh.n_nodes + listed[:, 1]
    edge_ids = np.searchsorted(keys, listed_keys)
    by_tag = {}
    for tag in (meshing.TAG_INFLOW, meshing.TAG_WALL):
        sel = mesh.boundary_tags == tag
        dofs = np.concatenate(
            [listed[sel].ravel(), n_nodes + edge_ids[sel]]
        )
        by_tag[tag] = np.unique(dofs)
    dirichlet = np.union1d(by_tag[meshing.TAG_INFLOW], by_tag[meshing.TAG_WALL])
    return dirichlet, by_tag[meshing.TAG_INFLOW]


def build_taylor_hood(mesh):
    """Construct the Taylor-Hood space and its geometry tables."""
    meshing.validate_mesh(mesh)
    qpoints, qweights = triangle_quadrature()
    vval, vgrad_ref = quadratic_basis(qpoints)
    pval, _ = linear_basis(qpoints)
    edges, tri_edges = _build_edges(mesh.triangles)
    conn = np.concatenate([mesh.triangles, mesh.n_nodes + tri_edges], axis=1)

    p0 = mesh.nodes[mesh.triangles[:, 0]]
    jac = np.stack(
        [
            mesh.nodes[mesh.triangles[:, 1]] - p0,
            mesh.nodes[mesh.triangles[:, 2]] - p0,
        ],
        axis=2,
    )
    det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
    if np.any(det <= 0):
        raise InvalidMeshError("inverted triangle in geometry tables")
    inv_t = np.empty_like(jac)
    inv_t[:, 0, 0] = jac[:, 1, 1]
    inv_t[:, 0, 1] = -jac[:, 1, 0]
    inv_t[:, 1, 0] = -jac[:, 0, 1]
    inv_t[:, 1, 1] = jac[:, 0, 0]
    inv_t /= det[:, None, None]
    vgrad = np.ascontiguousarray(
        np.einsum("qjb,eab->eqja", vgrad_ref, inv_t, optimize=True)
    )
    detw = np.ascontiguousarray(qweights[None, :] * det[:, None])
    qp_coords = p0[:, None, :] + np.einsum(
        "eab,qb->eqa", jac, qpoints, optimize=True
    )

    midpoints = 0.5 * (mesh.nodes[edges[:, 0]] + mesh.nodes[edges[:, 1]])
    dof_coords = np.concatenate([mesh.nodes, midpoints])
    dirichlet, inflow = _dirichlet_sets(mesh, edges, mesh.n_nodes)
    has_neumann = bool(np.any(mesh.boundary_tags == meshing.TAG_NEUMANN))
    return FESpace(
        mesh=mesh,
        qpoints=qpoints,
        qweights=qweights,
        edges=edges,
        tri_edges=tri_edges,
        conn=conn,
        conn_p=np.ascontiguousarray(mesh.triangles),
        vval=np.ascontiguousarray(vval),
        pval=np.ascontiguousarray(pval),
        vgrad=vgrad,
        detw=detw,
        qp_coords=qp_coords,
        dof_coords=dof_coords,
        h=mesh.diameters(),
        dirichlet_scalar=dirichlet,
        inflow_scalar=inflow,
        has_neumann=has_neumann,
    )


def interpolate_velocity(space, f):
    """Nodal interpolation of a velocity field onto the quadratic space.

    ``f`` is called with coordinate arrays ``(x, y)`` and must return the
    two components as a pair of arrays.
    """
    x, y = space.dof_coords[:, 0], space.dof_coords[:, 1]
    fx, fy = f(x, y)
    out = np.empty(space.n_velocity)
    out[: space.n_scalar] = np.broadcast_to(fx, x.shape)
    out[space.n_scalar :] = np.broadcast_to(fy, x.shape)
    return out


def interpolate_pressure(space, f):
    """Nodal interpolation of a scalar field onto the linear space."""
    x, y = space.mesh.nodes[:, 0], space.mesh.nodes[:, 1]
    return np.asarray(f(x, y), dtype=float)
