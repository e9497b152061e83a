"""Parameter-independent reduced operators and the dense online solver.

``project_operators`` compresses every operator of the truth model onto
the reduced bases once; afterwards a query at a new parameter touches
only dense arrays whose sizes scale with the basis and interpolation
dimensions, never with the mesh.  The online iteration mirrors the
semi-implicit time march of the truth solver on the reduced saddle
system, with the eddy viscosity reconstructed from gradient tables at
the interpolation points.
"""

import csv
import dataclasses
import json
import logging
import time

import numpy as np
import scipy.linalg as sla

from . import assembly as asm
from . import eim
from .exceptions import (
    ArchiveFormatError,
    NonConvergenceError,
    SingularSystemError,
    SolverFailure,
)

log = logging.getLogger(__name__)

OPERATORS_VERSION = 1

#: exact benchmark column order of the per-parameter report
BENCHMARK_COLUMNS = ("mu", "t_fe_s", "t_online_s", "speedup", "err_u_T", "err_p_L2")


@dataclasses.dataclass
class ReducedOperators:
    """Dense projections of every parameter-independent operator.

    Shapes use ``nv`` velocity and ``np`` pressure basis vectors and
    ``m`` interpolation modes.  ``conv[s]`` is convection by velocity
    basis vector ``s``; ``lift_adv``/``adv_lift`` hold convection by and
    of the boundary lift; ``smag_t[k]``/``smag_l[k]`` the eddy-viscosity
    diffusion of interpolation mode ``k`` against basis/lift.  The load
    splits into ``f_load`` (body force), ``f_visc`` (applied with
    ``-1/mu``) and ``f_conv`` (lift self-convection, applied with
    ``-1``).  ``grad_basis``/``grad_lift`` tabulate velocity gradients
    at the interpolation points; ``interp`` is the collocation matrix.
    """

    diffusion: np.ndarray       # (nv, nv)
    mass: np.ndarray            # (nv, nv)
    divergence: np.ndarray      # (np, nv)
    lift_adv: np.ndarray        # (nv, nv)
    adv_lift: np.ndarray        # (nv, nv)
    conv: np.ndarray            # (nv, nv, nv)
    smag_t: np.ndarray          # (m, nv, nv)
    smag_l: np.ndarray          # (m, nv)
    smag_ll: np.ndarray         # (m,)
    f_load: np.ndarray          # (nv,)
    f_visc: np.ndarray          # (nv,)
    f_conv: np.ndarray          # (nv,)
    grad_basis: np.ndarray      # (m, nv, 2, 2)
    grad_lift: np.ndarray       # (m, 2, 2)
    interp: np.ndarray          # (m, m) unit lower triangular

    @property
    def n_velocity_basis(self):
        return self.diffusion.shape[0]

    @property
    def n_pressure_basis(self):
        return self.divergence.shape[0]

    @property
    def n_interp(self):
        return self.smag_t.shape[0]

    def array_shapes(self):
        """Field-name to shape map (used to verify nothing mesh-sized)."""
        out = {}
        for field in dataclasses.fields(self):
            value = getattr(self, field.name)
            if isinstance(value, np.ndarray):
                out[field.name] = value.shape
        return out


@dataclasses.dataclass
class OnlineConfig:
    """Controls for the reduced semi-implicit iteration."""

    dt: float = 0.01
    eps: float = 1e-10
    max_steps: int = 20000

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.eps <= 0.0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.max_steps < 1:
            raise ValueError(f"max_steps must be >= 1, got {self.max_steps}")


@dataclasses.dataclass
class ReducedSolution:
    """Converged reduced coefficients for one parameter."""

    mu: float
    u: np.ndarray
    p: np.ndarray
    iterations: int
    final_relative_increment: float
    wall_time: float


def project_operators(space, rb, eim_basis, lift, c_s, f_vec=None):
    """Compress all truth operators onto the reduced bases.

    Every array of the result is sized by the basis and interpolation
    dimensions only; full-order matrices appear here and nowhere in the
    online path.
    """
    zv = rb.velocity
    zp = rb.pressure
    nv = zv.shape[1]
    a0 = asm.assemble_diffusion(space)
    mv = asm.assemble_velocity_mass(space)
    b_mat = asm.assemble_divergence(space)
    c_lift = asm.assemble_convection(space, lift)
    diffusion = zv.T @ (a0 @ zv)
    mass = zv.T @ (mv @ zv)
    divergence = zp.T @ (b_mat @ zv)
    lift_adv = zv.T @ (c_lift @ zv)
    adv_lift = zv.T @ (asm.assemble_convection_dual(space, lift) @ zv)
    conv = np.empty((nv, nv, nv))
    for s in range(nv):
        conv[s] = zv.T @ (asm.assemble_convection(space, zv[:, s]) @ zv)
    smag_t, smag_l, smag_ll = eim.smagorinsky_affine_tensors(
        space, eim_basis, zv, lift, c_s
    )
    f_full = np.zeros(space.n_velocity) if f_vec is None else f_vec
    f_load = zv.T @ f_full
    f_visc = zv.T @ (a0 @ lift)
    f_conv = zv.T @ (c_lift @ lift)
    tables = eim.magic_point_gradients(
        space, eim_basis, np.column_stack([zv, lift])
    )
    return ReducedOperators(
        diffusion=diffusion,
        mass=mass,
        divergence=divergence,
        lift_adv=lift_adv,
        adv_lift=adv_lift,
        conv=conv,
        smag_t=smag_t,
        smag_l=smag_l,
        smag_ll=smag_ll,
        f_load=f_load,
        f_visc=f_visc,
        f_conv=f_conv,
        grad_basis=tables[:, :nv],
        grad_lift=tables[:, nv],
        interp=eim_basis.interp.copy(),
    )


def viscosity_coefficients(ops, u):
    """Interpolation coefficients of the gradient magnitude of ``u``.

    Gradients at the interpolation points are exact linear combinations
    of the tabulated basis/lift gradients, so the coefficients match a
    full-order evaluation to rounding.
    """
    grads = np.einsum("mjab,j->mab", ops.grad_basis, u) + ops.grad_lift
    g = np.sqrt(np.einsum("mab,mab->m", grads, grads))
    return sla.solve_triangular(ops.interp, g, lower=True, unit_diagonal=True)


def _system_matrix(ops, mu, u_frozen, sigma):
    """Implicit momentum block with convection/viscosity frozen at ``u_frozen``."""
    k = (
        ops.diffusion / mu
        + ops.lift_adv
        + ops.adv_lift
        + np.einsum("s,sij->ij", u_frozen, ops.conv)
        + np.einsum("k,kij->ij", sigma, ops.smag_t)
    )
    return k


def load_vector(ops, mu):
    """Parameter-dependent reduced load ``F_N(mu)``."""
    return ops.f_load - ops.f_visc / mu - ops.f_conv


def solve_reduced(ops, mu, cfg=None, initial=None):
    """Semi-implicit march of the reduced saddle system at ``mu``.

    Stops when the velocity-coefficient increment drops below
    ``cfg.eps`` relative to the current iterate (the velocity basis is
    orthonormal in the energy product, so the coefficient 2-norm is the
    energy norm of the field).
    """
    if cfg is None:
        cfg = OnlineConfig()
    if mu <= 0.0:
        raise ValueError(f"parameter must be positive, got {mu}")
    start = time.perf_counter()
    nv = ops.n_velocity_basis
    npr = ops.n_pressure_basis
    n = nv + npr
    u = np.zeros(nv) if initial is None else np.asarray(initial, dtype=float).copy()
    f_mu = load_vector(ops, mu)
    system = np.zeros((n, n))
    system[nv:, :nv] = ops.divergence
    system[:nv, nv:] = ops.divergence.T
    rhs = np.zeros(n)
    last_increment = np.inf
    for step in range(1, cfg.max_steps + 1):
        sigma = viscosity_coefficients(ops, u)
        system[:nv, :nv] = _system_matrix(ops, mu, u, sigma) + ops.mass / cfg.dt
        rhs[:nv] = f_mu + (ops.mass @ u) / cfg.dt - sigma @ ops.smag_l
        rhs[nv:] = 0.0
        try:
            solution = np.linalg.solve(system, rhs)
        except np.linalg.LinAlgError as exc:
            raise SingularSystemError(
                f"reduced saddle system singular at mu={mu:g}, step {step}: {exc}"
            )
        if not np.all(np.isfinite(solution)):
            raise SingularSystemError(
                f"reduced iterate diverged at mu={mu:g}, step {step}"
            )
        u_new = solution[:nv]
        inc = float(np.linalg.norm(u_new - u))
        scale = float(np.linalg.norm(u_new))
        if inc == 0.0 and scale == 0.0:
            last_increment = 0.0
        elif scale == 0.0:
            last_increment = np.inf
        else:
            last_increment = inc / scale
        u = u_new
        if last_increment <= cfg.eps:
            return ReducedSolution(
                mu=float(mu),
                u=u,
                p=solution[nv:],
                iterations=step,
                final_relative_increment=last_increment,
                wall_time=time.perf_counter() - start,
            )
    raise NonConvergenceError(
        f"reduced solve at mu={mu:g} did not converge within "
        f"{cfg.max_steps} steps (last increment {last_increment:.3e})",
        iterations=cfg.max_steps,
        last_increment=last_increment,
    )


def reduced_residual(ops, mu, u, p):
    """Steady reduced residual, entirely from stored dense arrays.

    Returns ``(r_u, r_p)`` with the same convention as the truth
    residual: momentum tested against the velocity basis, continuity
    against the pressure basis.
    """
    sigma = viscosity_coefficients(ops, u)
    r_u = (
        _system_matrix(ops, mu, u, sigma) @ u
        + sigma @ ops.smag_l
        + ops.divergence.T @ p
        - load_vector(ops, mu)
    )
    r_p = ops.divergence @ u
    return r_u, r_p


def reconstruct(rb, solution):
    """Expand reduced coefficients to full homogeneous fields."""
    return rb.velocity @ solution.u, rb.pressure @ solution.p


def project_state(rb, vel_gram, pressure_mass, u_full, p_full):
    """Best-approximation coefficients of full fields in the bases."""
    u_coeff = rb.velocity.T @ (vel_gram @ u_full)
    p_coeff = rb.pressure.T @ (pressure_mass @ p_full)
    return u_coeff, p_coeff


def benchmark(model, rb, ops, mus, solver_cfg, online_cfg, state_gram):
    """Per-parameter truth-versus-reduced comparison.

    Each row records wall times of a cold truth solve and the reduced
    solve, their ratio, and relative errors in the velocity energy norm
    and pressure L2 norm.  Solver failures are recorded per row without
    aborting the sweep.
    """
    rows = []
    for mu in mus:
        row = {"mu": float(mu)}
        try:
            t0 = time.perf_counter()
            snap = model.solve(mu, solver_cfg)
            row["t_fe_s"] = time.perf_counter() - t0
            t0 = time.perf_counter()
            red = solve_reduced(ops, mu, online_cfg)
            row["t_online_s"] = time.perf_counter() - t0
            u_n, p_n = reconstruct(rb, red)
            du = snap.u - u_n
            dp = snap.p - p_n
            u_ref = state_gram.velocity_norm(snap.u)
            p_ref = state_gram.pressure_norm(snap.p)
            row["err_u_T"] = state_gram.velocity_norm(du) / u_ref
            row["err_p_L2"] = state_gram.pressure_norm(dp) / p_ref
            row["speedup"] = row["t_fe_s"] / max(row["t_online_s"], 1e-12)
        except SolverFailure as exc:
            log.warning("benchmark row mu=%g failed: %s", mu, exc)
            row.setdefault("t_fe_s", float("nan"))
            row.setdefault("t_online_s", float("nan"))
            row["speedup"] = float("nan")
            row["err_u_T"] = float("nan")
            row["err_p_L2"] = float("nan")
            row["error"] = str(exc)
        rows.append(row)
    return rows


def write_benchmark_csv(rows, path, extra_columns=()):
    """Write benchmark rows with the fixed column order."""
    columns = BENCHMARK_COLUMNS + tuple(extra_columns)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_format_cell(row.get(col)) for col in columns])


def _format_cell(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_benchmark_json(rows, path, meta=None):
    """Write benchmark rows plus run metadata as JSON."""
    payload = {"meta": dict(meta or {}), "rows": rows}
    with open(path, "w") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write("\n")


def save_operators(ops, path):
    """Write the reduced operators as a versioned ``.npz`` archive."""
    arrays = {
        field.name: getattr(ops, field.name)
        for field in dataclasses.fields(ops)
    }
    np.savez(path, version=np.array([OPERATORS_VERSION]), **arrays)


def load_operators(path):
    """Read a reduced-operator archive written by ``save_operators``."""
    try:
        with np.load(path) as data:
            payload = {key: data[key] for key in data.files}
    except (OSError, ValueError) as exc:
        raise ArchiveFormatError(f"{path}: unreadable operator archive: {exc}")
    version = payload.pop("version", None)
    if version is None or int(version[0]) != OPERATORS_VERSION:
        raise ArchiveFormatError(f"{path}: unsupported operator archive version")
    names = {field.name for field in dataclasses.fields(ReducedOperators)}
    missing = names - payload.keys()
    if missing:
        raise ArchiveFormatError(
            f"{path}: operator archive missing fields {sorted(missing)}"
        )
    return ReducedOperators(**{name: payload[name] for name in names})
