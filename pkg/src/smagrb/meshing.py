"""Structured triangulations of the benchmark geometries and mesh file I/O.

Two geometries are built in: the unit lid-driven cavity and a backward
facing step channel.  Both generators produce right-angled structured
triangulations whose element diameter halves exactly when the resolution
doubles, which the convergence tests rely on.

Boundary tags have a fixed meaning throughout the package:

``inflow``
    Dirichlet boundary carrying nonzero velocity data (channel inlet,
    cavity lid).
``wall``
    Homogeneous Dirichlet boundary.
``neumann``
    Natural (do-nothing) outflow boundary.

Mesh file format (plain text)::

    nodes N triangles T bedges B
    x y        -- N node lines
    i j k      -- T triangle lines, zero-based, counter-clockwise
    i j tag    -- B boundary edge lines, tag in {inflow, wall, neumann}
"""

import dataclasses

import numpy as np

from .exceptions import InvalidMeshError, MeshFormatError

TAG_INFLOW = "inflow"
TAG_WALL = "wall"
TAG_NEUMANN = "neumann"
VALID_TAGS = frozenset((TAG_INFLOW, TAG_WALL, TAG_NEUMANN))

_GEOM_TOL = 1e-9


@dataclasses.dataclass
class Mesh:
    """Conforming triangulation with tagged boundary edges.

    Attributes
    ----------
    nodes : (n_nodes, 2) float array
        Vertex coordinates.
    triangles : (n_triangles, 3) int array
        Vertex indices, counter-clockwise.
    boundary_edges : (n_bedges, 2) int array
        Endpoint indices of boundary edges.
    boundary_tags : (n_bedges,) str array
        One tag per boundary edge.
    """

    nodes: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    boundary_tags: np.ndarray

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    @property
    def n_triangles(self):
        return self.triangles.shape[0]

    def signed_areas(self):
        """Signed area of each triangle; positive means counter-clockwise."""
        p = self.nodes[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def diameters(self):
        """Diameter of each triangle, taken as its longest edge."""
        p = self.nodes[self.triangles]
        lengths = np.stack(
            [
                np.linalg.norm(p[:, 1] - p[:, 0], axis=1),
                np.linalg.norm(p[:, 2] - p[:, 1], axis=1),
                np.linalg.norm(p[:, 0] - p[:, 2], axis=1),
            ],
            axis=1,
        )
        return lengths.max(axis=1)


def _edge_counts(triangles):
    """Sorted endpoint pairs of all triangle sides and their multiplicity."""
    sides = np.concatenate(
        [triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]]
    )
    sides = np.sort(sides, axis=1)
    return np.unique(sides, axis=0, return_counts=True)


def validate_mesh(mesh):
    """Check structural mesh invariants, raising ``InvalidMeshError``.

    Verifies index ranges, strict counter-clockwise orientation, and that
    the tagged boundary edges are exactly the sides shared by a single
    triangle, each listed once.
    """
    if mesh.nodes.ndim != 2 or mesh.nodes.shape[1] != 2:
        raise InvalidMeshError("node array must have shape (n, 2)")
    n = mesh.n_nodes
    for name, arr in (("triangle", mesh.triangles), ("boundary edge", mesh.boundary_edges)):
        if arr.size and (arr.min() < 0 or arr.max() >= n):
            raise InvalidMeshError(f"{name} refers to node outside [0, {n})")
    areas = mesh.signed_areas()
    bad = np.flatnonzero(areas <= 0)
    if bad.size:
        raise InvalidMeshError(
            f"triangle {bad[0]} has non-positive signed area {areas[bad[0]]:.3e}; "
            "triangles must be counter-clockwise and non-degenerate"
        )
    pairs, counts = _edge_counts(mesh.triangles)
    if counts.max(initial=0) > 2:
        raise InvalidMeshError("an edge is shared by more than two triangles")
    boundary = pairs[counts == 1]
    listed = np.sort(mesh.boundary_edges, axis=1)
    listed_unique = np.unique(listed, axis=0)
    if listed_unique.shape[0] != listed.shape[0]:
        raise InvalidMeshError("duplicate boundary edge in tag list")
    if boundary.shape[0] != listed.shape[0] or not np.array_equal(
        boundary, listed_unique
    ):
        raise InvalidMeshError(
            f"tagged boundary edges ({listed.shape[0]}) do not match the "
            f"topological boundary ({boundary.shape[0]} edges)"
        )
    for tag in mesh.boundary_tags:
        if tag not in VALID_TAGS:
            raise InvalidMeshError(f"unknown boundary tag {tag!r}")
    return mesh


def _structured_triangles(index_grid, cell_mask):
    """Split each kept grid cell into two counter-clockwise triangles.

    ``index_grid[i, j]`` is the global node index at grid position
    ``(i, j)`` or -1 where the node was removed; ``cell_mask[i, j]`` is
    True for cells that belong to the domain.
    """
    tris = []
    nx, ny = cell_mask.shape
    for i in range(nx):
        for j in range(ny):
            if not cell_mask[i, j]:
                continue
            v00 = index_grid[i, j]
            v10 = index_grid[i + 1, j]
            v01 = index_grid[i, j + 1]
            v11 = index_grid[i + 1, j + 1]
            tris.append((v00, v10, v11))
            tris.append((v00, v11, v01))
    return np.array(tris, dtype=np.int64)


def _boundary_from_topology(triangles):
    """Edges that belong to exactly one triangle, as sorted endpoint pairs."""
    pairs, counts = _edge_counts(triangles)
    return pairs[counts == 1]


def _tag_edges(nodes, edges, classify):
    """Tag each edge by applying ``classify`` to its midpoint coordinates."""
    mids = 0.5 * (nodes[edges[:, 0]] + nodes[edges[:, 1]])
    return np.array([classify(x, y) for x, y in mids], dtype=object)


def generate_cavity_mesh(n):
    """Uniform triangulation of the unit square with a driven lid.

    Splits an ``n`` by ``n`` grid of square cells along their diagonals,
    giving ``2 n^2`` triangles and ``(n + 1)^2`` nodes.  The top side
    (the moving lid) is tagged ``inflow``, the other three sides
    ``wall``; there is no ``neumann`` part.
    """
    if n < 1:
        raise InvalidMeshError("cavity resolution must be at least 1")
    coords = np.linspace(0.0, 1.0, n + 1)
    xg, yg = np.meshgrid(coords, coords, indexing="ij")
    nodes = np.column_stack([xg.ravel(), yg.ravel()])
    index_grid = np.arange((n + 1) * (n + 1), dtype=np.int64).reshape(n + 1, n + 1)
    cell_mask = np.ones((n, n), dtype=bool)
    triangles = _structured_triangles(index_grid, cell_mask)

    def classify(x, y):
        return TAG_INFLOW if y > 1.0 - _GEOM_TOL else TAG_WALL

    edges = _boundary_from_topology(triangles)
    tags = _tag_edges(nodes, edges, classify)
    return validate_mesh(Mesh(nodes, triangles, edges, tags))


@dataclasses.dataclass(frozen=True)
class StepGeometry:
    """Backward facing step channel dimensions.

    The channel occupies ``[0, length] x [0, height]`` minus the solid
    block ``[0, inlet_length] x [0, height - inlet_height]`` below the
    inlet; flow enters through ``x = 0`` over the upper ``inlet_height``
    of the left side and leaves through ``x = length``.
    """

    length: float = 20.0
    height: float = 2.0
    inlet_length: float = 4.0
    inlet_height: float = 1.0

    @property
    def step_height(self):
        return self.height - self.inlet_height


def generate_step_mesh(resolution, geometry=None):
    """Structured triangulation of the backward facing step channel.

    ``resolution`` is the number of square cells across the step height;
    all geometry dimensions must be integer multiples of the resulting
    cell size.  With the default geometry this yields ``72 r^2``
    triangles.  The inlet is tagged ``inflow``, the outlet ``neumann``
    and every remaining side ``wall``.
    """
    geom = geometry or StepGeometry()
    if resolution < 1:
        raise InvalidMeshError("step resolution must be at least 1")
    size = geom.step_height / resolution

    def cells(extent, name):
        count = round(extent / size)
        if abs(count * size - extent) > _GEOM_TOL * max(1.0, extent):
            raise InvalidMeshError(
                f"{name} ({extent}) is not a multiple of the cell size {size}"
            )
        return count

    nx = cells(geom.length, "channel length")
    ny = cells(geom.height, "channel height")
    nx_step = cells(geom.inlet_length, "inlet length")
    ny_step = cells(geom.step_height, "step height")

    xs = np.linspace(0.0, geom.length, nx + 1)
    ys = np.linspace(0.0, geom.height, ny + 1)
    keep = np.ones((nx + 1, ny + 1), dtype=bool)
    keep[:nx_step, :ny_step] = False
    index_grid = np.full((nx + 1, ny + 1), -1, dtype=np.int64)
    index_grid[keep] = np.arange(keep.sum())
    xg, yg = np.meshgrid(xs, ys, indexing="ij")
    nodes = np.column_stack([xg[keep], yg[keep]])

    cell_mask = np.ones((nx, ny), dtype=bool)
    cell_mask[:nx_step, :ny_step] = False
    triangles = _structured_triangles(index_grid, cell_mask)

    def classify(x, y):
        if x < _GEOM_TOL:
            return TAG_INFLOW
        if x > geom.length - _GEOM_TOL:
            return TAG_NEUMANN
        return TAG_WALL

    edges = _boundary_from_topology(triangles)
    tags = _tag_edges(nodes, edges, classify)
    return validate_mesh(Mesh(nodes, triangles, edges, tags))


def write_mesh(mesh, path):
    """Write a mesh in the plain-text format described in the module docs."""
    lines = [
        f"nodes {mesh.n_nodes} triangles {mesh.n_triangles} "
        f"bedges {mesh.boundary_edges.shape[0]}"
    ]
    lines.extend(f"{float(x)!r} {float(y)!r}" for x, y in mesh.nodes)
    lines.extend(f"{i} {j} {k}" for i, j, k in mesh.triangles)
    lines.extend(
        f"{i} {j} {tag}"
        for (i, j), tag in zip(mesh.boundary_edges, mesh.boundary_tags)
    )
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def read_mesh(path):
    """Read and validate a mesh file; raises ``MeshFormatError`` on bad input."""
    try:
        with open(path, encoding="ascii") as fh:
            raw = fh.read().splitlines()
    except OSError as exc:
        raise MeshFormatError(f"{path}: cannot read mesh file: {exc}")
    lines = [(no, line.strip()) for no, line in enumerate(raw, start=1) if line.strip()]
    if not lines:
        raise MeshFormatError(f"{path}: empty mesh file")
    header_no, header = lines[0]
    fields = header.split()
    if len(fields) != 6 or fields[0] != "nodes" or fields[2] != "triangles" or fields[4] != "bedges":
        raise MeshFormatError(
            f"{path}:{header_no}: expected header 'nodes N triangles T bedges B', "
            f"got {header!r}"
        )
    try:
        n_nodes, n_tris, n_bedges = int(fields[1]), int(fields[3]), int(fields[5])
    except ValueError as exc:
        raise MeshFormatError(f"{path}:{header_no}: non-integer count in header") from exc
    expected = 1 + n_nodes + n_tris + n_bedges
    if len(lines) != expected:
        raise MeshFormatError(
            f"{path}: expected {expected} non-empty lines for header counts, "
            f"found {len(lines)}"
        )
    body = lines[1:]

    def parse_block(rows, n_fields, caster, what):
        out = []
        for no, line in rows:
            parts = line.split()
            if len(parts) != n_fields:
                raise MeshFormatError(
                    f"{path}:{no}: expected {n_fields} fields for {what}, got {len(parts)}"
                )
            try:
                out.append(caster(parts))
            except ValueError as exc:
                raise MeshFormatError(f"{path}:{no}: bad {what} line {line!r}") from exc
        return out

    nodes = np.array(
        parse_block(body[:n_nodes], 2, lambda p: (float(p[0]), float(p[1])), "node"),
        dtype=float,
    ).reshape(n_nodes, 2)
    tris = np.array(
        parse_block(
            body[n_nodes : n_nodes + n_tris],
            3,
            lambda p: (int(p[0]), int(p[1]), int(p[2])),
            "triangle",
        ),
        dtype=np.int64,
    ).reshape(n_tris, 3)

    def edge_caster(p):
        tag = p[2]
        if tag not in VALID_TAGS:
            raise ValueError(tag)
        return (int(p[0]), int(p[1]), tag)

    edge_rows = parse_block(body[n_nodes + n_tris :], 3, edge_caster, "boundary edge")
    edges = np.array([(i, j) for i, j, _ in edge_rows], dtype=np.int64).reshape(
        n_bedges, 2
    )
    tags = np.array([t for _, _, t in edge_rows], dtype=object)
    return validate_mesh(Mesh(nodes, tris, edges, tags))
