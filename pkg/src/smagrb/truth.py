"""Semi-implicit pseudo-time solver for the steady Smagorinsky problem.

Each pseudo-time step freezes the convecting field and the eddy
viscosity at the previous iterate and solves one linear saddle-point
system; iteration stops when the relative velocity increment drops below
the steady-state tolerance.  The module also builds the lift fields for
the two benchmarks and persists snapshots as versioned text files.
"""

import dataclasses
import logging
import os
import time

import numpy as np
import scipy.sparse as sparse
import scipy.sparse.linalg as spla

from . import _kernels as kernels
from . import assembly as asm
from . import meshing, spaces
from .exceptions import (
    ArchiveFormatError,
    NonConvergenceError,
    SingularSystemError,
)

log = logging.getLogger(__name__)

SNAPSHOT_MAGIC = "smagrb-snapshot"
SNAPSHOT_VERSION = 1


@dataclasses.dataclass
class LiftField:
    """Velocity field carrying the non-homogeneous Dirichlet data.

    ``divergence_norm`` records ``||B u_D||_2 / ||u_D||`` after
    construction so callers can verify how solenoidal the lift is.
    """

    coeffs: np.ndarray
    divergence_norm: float


@dataclasses.dataclass
class SolverConfig:
    """Pseudo-time stepping parameters."""

    dt: float = 0.01
    eps_fe: float = 1e-10
    max_steps: int = 20000

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ValueError("pseudo-time step must be positive")
        if self.eps_fe <= 0.0:
            raise ValueError("steady-state tolerance must be positive")
        if self.max_steps < 1:
            raise ValueError("step budget must be at least 1")


@dataclasses.dataclass
class Snapshot:
    """Converged steady state for one parameter value."""

    mu: float
    u: np.ndarray
    p: np.ndarray
    iterations: int
    final_relative_increment: float
    wall_time: float


def _interpolated_boundary_field(space, profile):
    """Velocity vector with ``profile`` values at inflow dofs, zero elsewhere."""
    out = np.zeros(space.n_velocity)
    dofs = space.inflow_scalar
    x = space.dof_coords[dofs, 0]
    y = space.dof_coords[dofs, 1]
    fx, fy = profile(x, y)
    out[dofs] = fx
    out[space.n_scalar + dofs] = fy
    return out


def _divergence_free_extension(space, boundary_field):
    """Extend boundary data into the domain with a discrete Stokes solve.

    Solves a homogeneous Stokes problem for the interior correction so
    that the extended field satisfies the discrete divergence constraint
    to solver precision (the divergence acts as a penalized multiplier).
    """
    a0 = asm.assemble_diffusion(space)
    b = asm.assemble_divergence(space)
    free_v = space.free_velocity
    free_p = _free_pressure(space)
    a_ff = a0[free_v][:, free_v]
    b_fp = b[free_p][:, free_v]
    rhs_u = -(a0 @ boundary_field)[free_v]
    rhs_p = -(b @ boundary_field)[free_p]
    system = sparse.bmat(
        [[a_ff, b_fp.T], [b_fp, None]], format="csc"
    )
    try:
        solution = spla.splu(system).solve(np.concatenate([rhs_u, rhs_p]))
    except RuntimeError as exc:
        raise SingularSystemError(f"lift extension solve failed: {exc}")
    out = boundary_field.copy()
    out[free_v] += solution[: free_v.size]
    return out


def _free_pressure(space):
    """Free pressure dofs: all of them, minus one fixed gauge node when
    the boundary has no natural part."""
    if space.has_neumann:
        return np.arange(space.n_pressure)
    return np.arange(1, space.n_pressure)


def compute_lift(space, benchmark, amplitude=1.0):
    """Build the lift field for a benchmark geometry.

    ``cavity`` interpolates the unit lid velocity ``(1, 0)`` directly;
    ``step`` interpolates a parabolic inflow profile with mean
    ``amplitude`` and extends it divergence-free into the channel.
    """
    if benchmark == "cavity":
        coeffs = _interpolated_boundary_field(
            space, lambda x, y: (amplitude * np.ones_like(x), np.zeros_like(y))
        )
    elif benchmark == "step":
        ys = space.dof_coords[space.inflow_scalar, 1]
        if ys.size == 0:
            raise ValueError("step mesh has no inflow boundary")
        y_lo, y_hi = ys.min(), ys.max()
        span = y_hi - y_lo

        def profile(x, y):
            s = (y - y_lo) / span
            return 6.0 * amplitude * s * (1.0 - s), np.zeros_like(y)

        interpolated = _interpolated_boundary_field(space, profile)
        coeffs = _divergence_free_extension(space, interpolated)
    else:
        raise ValueError(f"unknown benchmark {benchmark!r}")
    b = asm.assemble_divergence(space)
    norm = float(np.linalg.norm(b @ coeffs))
    scale = float(np.linalg.norm(coeffs)) or 1.0
    return LiftField(coeffs=coeffs, divergence_norm=norm / scale)


def _scalar_free_map(space):
    out = np.full(space.n_scalar, -1, dtype=np.int64)
    out[space.free_scalar] = np.arange(space.free_scalar.size)
    return out


class SteadyModel:
    """Caches everything parameter-independent for one space and lift.

    Each pseudo-time step only reassembles the convection and
    eddy-viscosity blocks (on a fixed sparsity pattern); diffusion,
    mass, divergence and the lift couplings are built once here.
    """

    def __init__(self, space, lift, c_s, f=None, stopping_gram=None):
        self.space = space
        self.lift = lift
        self.c_s = c_s
        self.f_vec = None if f is None else asm.assemble_load(space, f)
        self.free_velocity = space.free_velocity
        self.free_pressure = _free_pressure(space)
        smap = _scalar_free_map(space)
        self._pattern_full = asm.scalar_pattern(space)
        self._pattern_free = asm.scalar_pattern(
            space, row_map=smap, col_map=smap, key="free"
        )
        a0 = asm.assemble_diffusion(space)
        self.divergence = asm.assemble_divergence(space)
        self.velocity_mass = asm.assemble_velocity_mass(space)
        fv = self.free_velocity
        self.a0_ff = a0[fv][:, fv].tocsr()
        self.mass_ff = self.velocity_mass[fv][:, fv].tocsr()
        self.b_fp = self.divergence[self.free_pressure][:, fv].tocsr()
        dual = asm.assemble_convection_dual(space, lift.coeffs)
        self.lift_dual_ff = dual[fv][:, fv].tocsr()
        ctx = self.context(mu=1.0)
        f0, f1 = asm.assemble_rhs_pieces(space, ctx, self.f_vec)
        self.f0_free = f0[fv]
        self.f1_free = f1[fv]
        self.stopping_gram = stopping_gram

    def context(self, mu):
        return asm.AssemblyContext(mu=mu, c_s=self.c_s, lift=self.lift.coeffs)

    def rhs_free(self, mu):
        return self.f0_free + (1.0 / mu) * self.f1_free

    def _step_blocks(self, w):
        """Scalar convection+viscosity matrices at the frozen field ``w``.

        Returns the free-restricted scalar block for the system and the
        full eddy-viscosity matrix needed for the lift coupling.
        """
        space = self.space
        nu = asm.eddy_viscosity(space, w, self.c_s)
        visc_local = kernels.weighted_stiffness_local(space.vgrad, space.detw, nu)
        wq = asm.velocity_values(space, w)
        conv_local = kernels.convection_local(
            space.vval, space.vgrad, space.detw, wq
        )
        visc_full = self._pattern_full.assemble(visc_local)
        step_free = self._pattern_free.assemble(visc_local + conv_local)
        return step_free, visc_full

    def _increment_gram(self):
        if self.stopping_gram is not None:
            return self.stopping_gram
        return self.a0_ff

    def solve(self, mu, cfg, initial=None):
        """Run the pseudo-time iteration at parameter ``mu``.

        ``initial`` warm-starts the iteration with a previous velocity
        field (full-length); the default is the zero field.
        """
        t0 = time.perf_counter()
        space = self.space
        fv = self.free_velocity
        n_free = fv.size
        u_free = np.zeros(n_free) if initial is None else initial[fv].copy()
        gram = self._increment_gram()
        const_ff = (1.0 / cfg.dt) * self.mass_ff + (
            1.0 / mu
        ) * self.a0_ff + self.lift_dual_ff
        rhs_const = self.rhs_free(mu)
        lift = self.lift.coeffs
        increment = np.inf
        for step in range(1, cfg.max_steps + 1):
            w = np.zeros(space.n_velocity)
            w[fv] = u_free
            w += lift
            step_free, visc_full = self._step_blocks(w)
            k_ff = sparse.block_diag((step_free, step_free), format="csr")
            k_ff = k_ff + const_ff
            system = sparse.bmat(
                [[k_ff, self.b_fp.T], [self.b_fp, None]], format="csc"
            )
            rhs_u = rhs_const + (1.0 / cfg.dt) * (self.mass_ff @ u_free)
            visc_lift = sparse.block_diag((visc_full, visc_full), format="csr") @ lift
            rhs_u = rhs_u - visc_lift[fv]
            rhs = np.concatenate([rhs_u, np.zeros(self.free_pressure.size)])
            try:
                solution = spla.splu(system).solve(rhs)
            except RuntimeError as exc:
                raise SingularSystemError(
                    f"pseudo-time step {step} factorization failed at "
                    f"mu={mu:g}: {exc}"
                )
            if not np.all(np.isfinite(solution)):
                raise SingularSystemError(
                    f"pseudo-time step {step} produced non-finite values at mu={mu:g}"
                )
            u_next = solution[:n_free]
            du = u_next - u_free
            norm_new = float(np.sqrt(max(u_next @ (gram @ u_next), 0.0)))
            norm_du = float(np.sqrt(max(du @ (gram @ du), 0.0)))
            u_free = u_next
            if norm_new == 0.0:
                increment = 0.0 if norm_du == 0.0 else np.inf
            else:
                increment = norm_du / norm_new
            log.debug("mu=%g step %d increment %.3e", mu, step, increment)
            if increment <= cfg.eps_fe:
                u = np.zeros(space.n_velocity)
                u[fv] = u_free
                p = np.zeros(space.n_pressure)
                p[self.free_pressure] = solution[n_free:]
                wall = time.perf_counter() - t0
                log.info(
                    "mu=%g converged in %d steps (increment %.3e, %.2fs)",
                    mu, step, increment, wall,
                )
                return Snapshot(
                    mu=float(mu),
                    u=u,
                    p=p,
                    iterations=step,
                    final_relative_increment=increment,
                    wall_time=wall,
                )
        raise NonConvergenceError(
            f"no steady state within {cfg.max_steps} pseudo-time steps at "
            f"mu={mu:g} (last increment {increment:.3e})",
            iterations=cfg.max_steps,
            last_increment=increment,
        )

    def steady_residual(self, mu, u, p):
        """Free-dof residual of the steady weak form at ``(u, p)``."""
        ctx = self.context(mu)
        r_u, r_p = asm.apply_operator(self.space, ctx, u, p, self.f_vec)
        return r_u[self.free_velocity], r_p[self.free_pressure]


def cached_solve(model, mu, cfg, cache_dir=None, initial=None):
    """Solve at one parameter, reusing a snapshot cache when given.

    Cached snapshots round-trip through text files, so a rerun reloads
    bit-identical fields instead of recomputing.
    """
    mu = float(mu)
    if cache_dir is None:
        return model.solve(mu, cfg, initial=initial)
    os.makedirs(cache_dir, exist_ok=True)
    path = os.path.join(cache_dir, f"snapshot_mu{mu!r}.txt")
    if os.path.exists(path):
        return load_snapshot(
            path,
            expected_velocity=model.space.n_velocity,
            expected_pressure=model.space.n_pressure,
        )
    snap = model.solve(mu, cfg, initial=initial)
    save_snapshot(snap, path)
    return snap


def solve_sweep(model, mus, cfg, cache_dir=None):
    """Solve a sorted parameter sweep with warm-start continuation.

    Returns ``{mu: Snapshot}``.  If ``cache_dir`` is given, snapshots
    are stored there and reloaded on a rerun instead of being recomputed.
    """
    results = {}
    previous = None
    for mu in sorted(float(m) for m in mus):
        snap = cached_solve(model, mu, cfg, cache_dir=cache_dir, initial=previous)
        results[mu] = snap
        previous = snap.u
    return results


def save_snapshot(snapshot, path):
    """Write a snapshot as versioned text with round-trippable floats."""
    lines = [
        f"{SNAPSHOT_MAGIC} {SNAPSHOT_VERSION}",
        f"mu {float(snapshot.mu)!r} dim_velocity {snapshot.u.size} "
        f"dim_pressure {snapshot.p.size} iterations {snapshot.iterations} "
        f"increment {float(snapshot.final_relative_increment)!r} "
        f"wall_time {float(snapshot.wall_time)!r}",
    ]
    lines.extend(repr(float(v)) for v in snapshot.u)
    lines.extend(repr(float(v)) for v in snapshot.p)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_snapshot(path, expected_velocity=None, expected_pressure=None):
    """Read a snapshot file, checking version and dimensions."""
    with open(path, encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith(SNAPSHOT_MAGIC):
        raise ArchiveFormatError(f"{path}:1: not a snapshot file")
    version = lines[0].removeprefix(SNAPSHOT_MAGIC).strip()
    if version != str(SNAPSHOT_VERSION):
        raise ArchiveFormatError(
            f"{path}:1: unsupported snapshot version {version!r}"
        )
    if len(lines) < 2:
        raise ArchiveFormatError(f"{path}:2: missing snapshot header")
    fields = lines[1].split()
    keys = fields[0::2]
    values = fields[1::2]
    expected_keys = [
        "mu", "dim_velocity", "dim_pressure", "iterations", "increment",
        "wall_time",
    ]
    if keys != expected_keys or len(values) != len(expected_keys):
        raise ArchiveFormatError(f"{path}:2: malformed snapshot header")
    try:
        mu = float(values[0])
        dim_v, dim_p = int(values[1]), int(values[2])
        iterations = int(values[3])
        increment = float(values[4])
        wall_time = float(values[5])
    except ValueError as exc:
        raise ArchiveFormatError(f"{path}:2: bad header value: {exc}")
    for what, found, expected in (
        ("velocity", dim_v, expected_velocity),
        ("pressure", dim_p, expected_pressure),
    ):
        if expected is not None and found != expected:
            raise ArchiveFormatError(
                f"{path}: {what} dimension mismatch: expected {expected}, "
                f"found {found}"
            )
    body = lines[2:]
    if len(body) != dim_v + dim_p:
        raise ArchiveFormatError(
            f"{path}: expected {dim_v + dim_p} coefficient lines, "
            f"found {len(body)}"
        )
    try:
        coeffs = np.array([float(v) for v in body])
    except ValueError as exc:
        raise ArchiveFormatError(f"{path}: bad coefficient: {exc}")
    return Snapshot(
        mu=mu,
        u=coeffs[:dim_v],
        p=coeffs[dim_v:],
        iterations=iterations,
        final_relative_increment=increment,
        wall_time=wall_time,
    )


def build_benchmark_model(benchmark, resolution, c_s, amplitude=1.0,
                          mesh=None, stopping_gram=None):
    """Convenience constructor: mesh, space, lift and model in one call."""
    if mesh is None:
        if benchmark == "cavity":
            mesh = meshing.generate_cavity_mesh(resolution)
        elif benchmark == "step":
            mesh = meshing.generate_step_mesh(resolution)
        else:
            raise ValueError(f"unknown benchmark {benchmark!r}")
    space = spaces.build_taylor_hood(mesh)
    lift = compute_lift(space, benchmark, amplitude)
    return SteadyModel(space, lift, c_s, stopping_gram=stopping_gram)
