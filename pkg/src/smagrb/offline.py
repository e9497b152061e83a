"""Reduced-space construction: supremizers, POD warm start, greedy loop.

The velocity space is orthonormalized in the energy inner product, the
pressure space in L2.  Velocity vectors come in pairs: each pressure
mode contributes its supremizer (the velocity field realizing the
divergence coupling) so the reduced saddle problem stays inf-sup
stable.  The greedy loop ranks training parameters by the certified
error indicator evaluated on the reconstructed reduced solution and
enriches at the worst one.
"""

import dataclasses
import logging

import numpy as np
import scipy.sparse.linalg as spla

from . import assembly as asm
from . import certification as cert
from . import online as rbon
from .exceptions import (
    ArchiveFormatError,
    RankDeficiencyError,
    SingularSystemError,
    SolverFailure,
    StagnationError,
)

log = logging.getLogger(__name__)

ARCHIVE_VERSION = 1

#: drop a candidate basis vector when orthogonalization removes all but
#: this fraction of its norm
DROP_TOL = 1e-10


@dataclasses.dataclass
class RBSpace:
    """Reduced velocity/pressure bases with their provenance.

    ``velocity`` has one column per basis vector (snapshots and
    supremizers interleaved per stage after the seed block), ``pressure``
    one column per pressure mode.  ``parameters`` lists the
    greedy-selected parameter values in order; ``history`` records one
    dict per greedy iteration.
    """

    velocity: np.ndarray
    pressure: np.ndarray
    parameters: list
    history: list

    @property
    def n_velocity_basis(self):
        return self.velocity.shape[1]

    @property
    def n_pressure_basis(self):
        return self.pressure.shape[1]


class TEnergy:
    """Factorized energy Gram with helpers for products and supremizers."""

    def __init__(self, space, vel_gram, free_velocity):
        self.space = space
        self.gram = vel_gram
        self.free = free_velocity
        self._ff = vel_gram[free_velocity][:, free_velocity].tocsc()
        try:
            self._lu = spla.splu(self._ff)
        except RuntimeError as exc:
            raise SingularSystemError(f"energy Gram factorization failed: {exc}")

    def inner(self, a, b):
        return float(a @ (self.gram @ b))

    def norm(self, a):
        return float(np.sqrt(max(self.inner(a, a), 0.0)))

    def solve_free(self, rhs_full):
        """Solve ``T s = rhs`` on the free dofs, returning a full vector."""
        out = np.zeros(self.space.n_velocity)
        out[self.free] = self._lu.solve(rhs_full[self.free])
        return out


def supremizer(energy, divergence, p):
    """Velocity field realizing the divergence coupling of pressure ``p``.

    Solves ``(s, v)_T = b(v, p)`` over the free velocity space, i.e.
    ``T s = B^T p`` restricted to free dofs.
    """
    return energy.solve_free(divergence.T @ p)


def _mgs_append(columns, candidate, inner, drop_tol=DROP_TOL):
    """Orthonormalize ``candidate`` against ``columns`` (modified
    Gram-Schmidt with one re-orthogonalization pass).

    Returns the normalized vector, or ``None`` when the projection
    removes all but ``drop_tol`` of the original norm.
    """
    original = np.sqrt(max(inner(candidate, candidate), 0.0))
    if original == 0.0:
        return None
    v = candidate.copy()
    for _ in range(2):
        for col in columns:
            v -= inner(col, v) * col
    norm = np.sqrt(max(inner(v, v), 0.0))
    if norm <= drop_tol * original:
        return None
    return v / norm


def orthonormalize(vectors, inner, drop_tol=DROP_TOL):
    """Orthonormalize a list of vectors, dropping dependent ones (logged)."""
    kept = []
    for i, vec in enumerate(vectors):
        out = _mgs_append(kept, vec, inner, drop_tol)
        if out is None:
            log.info("orthonormalization dropped dependent vector %d", i)
            continue
        kept.append(out)
    return kept


def pod_modes(snapshot_columns, inner, n_modes, rank_tol=1e-13):
    """Method-of-snapshots proper orthogonal decomposition.

    ``snapshot_columns`` is a ``(dim, m)`` array; the correlation matrix
    uses the given inner product.  Returns ``(modes, eigenvalues)`` with
    unit-norm modes.  Raises ``RankDeficiencyError`` when ``n_modes``
    exceeds the numerical rank of the snapshot set.
    """
    snaps = np.atleast_2d(snapshot_columns)
    m = snaps.shape[1]
    if not 1 <= n_modes <= m:
        raise ValueError(f"n_modes must be in [1, {m}], got {n_modes}")
    corr = np.empty((m, m))
    for i in range(m):
        for j in range(i, m):
            corr[i, j] = corr[j, i] = inner(snaps[:, i], snaps[:, j])
    evals, evecs = np.linalg.eigh(corr)
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    evecs = evecs[:, order]
    rank = int(np.sum(evals > max(evals[0], 0.0) * rank_tol))
    if n_modes > rank:
        raise RankDeficiencyError(
            f"snapshot set has numerical rank {rank}, cannot extract "
            f"{n_modes} modes",
            rank=rank,
        )
    modes = snaps @ (evecs[:, :n_modes] / np.sqrt(evals[:n_modes]))
    return modes, evals


def pod_warm_start(snapshots, energy, pressure_mass, divergence, n_modes):
    """Seed reduced space from snapshots: POD modes plus supremizers.

    ``snapshots`` is a list of ``(u, p)`` pairs.  Velocity modes use the
    energy inner product, pressure modes L2; each pressure mode brings
    its supremizer into the velocity block.
    """
    u_cols = np.column_stack([u for u, _ in snapshots])
    p_cols = np.column_stack([p for _, p in snapshots])
    t_inner = energy.inner
    p_inner = lambda a, b: float(a @ (pressure_mass @ b))
    u_modes, _ = pod_modes(u_cols, t_inner, n_modes)
    p_modes, _ = pod_modes(p_cols, p_inner, n_modes)
    vel = orthonormalize(
        [u_modes[:, k] for k in range(n_modes)]
        + [supremizer(energy, divergence, p_modes[:, k]) for k in range(n_modes)],
        t_inner,
    )
    pr = orthonormalize([p_modes[:, k] for k in range(n_modes)], p_inner)
    return RBSpace(
        velocity=np.column_stack(vel),
        pressure=np.column_stack(pr),
        parameters=[],
        history=[],
    )


@dataclasses.dataclass
class GreedyConfig:
    """Greedy loop controls."""

    eps_rb: float = 1e-4
    n_max: int = 25


def _append_stage(rb, energy, pressure_mass, divergence, snapshot):
    """Append one snapshot stage: velocity, supremizer, pressure."""
    t_inner = energy.inner
    p_inner = lambda a, b: float(a @ (pressure_mass @ b))
    vel_cols = [rb.velocity[:, k] for k in range(rb.n_velocity_basis)]
    pr_cols = [rb.pressure[:, k] for k in range(rb.n_pressure_basis)]
    added = 0
    for cand in (snapshot.u, supremizer(energy, divergence, snapshot.p)):
        out = _mgs_append(vel_cols, cand, t_inner)
        if out is not None:
            vel_cols.append(out)
            added += 1
    p_out = _mgs_append(pr_cols, snapshot.p, p_inner)
    if p_out is not None:
        pr_cols.append(p_out)
        added += 1
    if added == 0:
        log.warning(
            "enrichment at mu=%g added no new directions", snapshot.mu
        )
    rb.velocity = np.column_stack(vel_cols)
    rb.pressure = np.column_stack(pr_cols)
    rb.parameters.append(snapshot.mu)
    return rb


def greedy(
    model,
    certification_state,
    eim_basis,
    train_mus,
    greedy_cfg,
    solver_cfg,
    online_cfg,
    energy,
    state_gram,
    warm_start=None,
    snapshot_solver=None,
):
    """Certified greedy construction of the reduced space.

    Each iteration solves the reduced problem at every training
    parameter, evaluates the error indicator (certified bound when
    available, proximity otherwise) on the reconstructed solution, and
    enriches the basis with the truth snapshot at the worst parameter.
    Stops when the worst indicator drops below ``eps_rb`` or the basis
    reaches ``n_max`` stages.  ``snapshot_solver`` overrides how truth
    snapshots are produced (used for caching); it gets ``(mu, initial)``
    and returns a ``Snapshot``.
    """
    train_mus = sorted(float(m) for m in train_mus)
    if snapshot_solver is None:
        snapshot_solver = lambda mu, initial: model.solve(
            mu, solver_cfg, initial=initial
        )
    pressure_mass = asm.assemble_pressure_mass(model.space)
    divergence = model.divergence
    rb = warm_start
    last_u = None
    if rb is None:
        mu_first = train_mus[0]
        snap = snapshot_solver(mu_first, None)
        last_u = snap.u
        rb = RBSpace(
            velocity=np.empty((model.space.n_velocity, 0)),
            pressure=np.empty((model.space.n_pressure, 0)),
            parameters=[],
            history=[],
        )
        _append_stage(rb, energy, pressure_mass, divergence, snap)
        log.info("greedy seeded with mu=%g", mu_first)
    ops = rbon.project_operators(
        model.space, rb, eim_basis, model.lift.coeffs, model.c_s, model.f_vec
    )
    prev_worst = None
    while True:
        indicators = {}
        for mu in train_mus:
            try:
                red = rbon.solve_reduced(ops, mu, online_cfg)
                u_full, p_full = rbon.reconstruct(rb, red)
                r_u, r_p = model.steady_residual(mu, u_full, p_full)
                eps = state_gram.dual_norm(r_u, r_p)
                est = cert.error_bound(
                    eps,
                    certification_state.stability(mu),
                    certification_state.rho,
                )
                indicators[mu] = est.indicator
            except SolverFailure as exc:
                log.warning("reduced solve failed at mu=%g (%s)", mu, exc)
                indicators[mu] = np.inf
        mu_star = max(indicators, key=indicators.get)
        worst = indicators[mu_star]
        rb.history.append(
            {
                "stage": len(rb.parameters),
                "mu": mu_star,
                "indicator": worst,
                "n_velocity": rb.n_velocity_basis,
                "n_pressure": rb.n_pressure_basis,
            }
        )
        log.info(
            "greedy stage %d: worst indicator %.3e at mu=%g",
            len(rb.parameters), worst, mu_star,
        )
        if worst <= greedy_cfg.eps_rb:
            log.info("greedy converged (indicator %.3e)", worst)
            break
        if len(rb.parameters) >= greedy_cfg.n_max:
            log.info("greedy reached stage budget %d", greedy_cfg.n_max)
            break
        if prev_worst is not None and worst > 2.0 * prev_worst:
            raise StagnationError(
                f"greedy indicator increased from {prev_worst:.3e} to "
                f"{worst:.3e}; enrichment is no longer improving the space"
            )
        prev_worst = worst
        if mu_star in rb.parameters:
            raise StagnationError(
                f"greedy re-selected mu={mu_star:g} whose snapshot is "
                f"already in the basis (indicator {worst:.3e}); the "
                "estimator cannot distinguish remaining candidates"
            )
        snap = snapshot_solver(mu_star, last_u)
        last_u = snap.u
        _append_stage(rb, energy, pressure_mass, divergence, snap)
        ops = rbon.project_operators(
            model.space, rb, eim_basis, model.lift.coeffs, model.c_s, model.f_vec
        )
    return rb, ops


def save_rb_space(rb, path):
    """Write the reduced space as a versioned ``.npz`` archive."""
    np.savez(
        path,
        version=np.array([ARCHIVE_VERSION]),
        velocity=rb.velocity,
        pressure=rb.pressure,
        parameters=np.array(rb.parameters, dtype=float),
        history_stage=np.array([h["stage"] for h in rb.history], dtype=np.int64),
        history_mu=np.array([h["mu"] for h in rb.history], dtype=float),
        history_indicator=np.array(
            [h["indicator"] for h in rb.history], dtype=float
        ),
    )


def load_rb_space(path, expected_velocity=None, expected_pressure=None):
    """Read a reduced-space archive, checking version and dimensions."""
    try:
        with np.load(path) as data:
            payload = {key: data[key] for key in data.files}
    except (OSError, ValueError) as exc:
        raise ArchiveFormatError(f"{path}: unreadable basis archive: {exc}")
    required = {"version", "velocity", "pressure", "parameters"}
    missing = required - payload.keys()
    if missing:
        raise ArchiveFormatError(
            f"{path}: basis archive missing fields {sorted(missing)}"
        )
    if int(payload["version"][0]) != ARCHIVE_VERSION:
        raise ArchiveFormatError(
            f"{path}: unsupported basis archive version "
            f"{int(payload['version'][0])}"
        )
    velocity = payload["velocity"]
    pressure = payload["pressure"]
    for what, found, expected in (
        ("velocity", velocity.shape[0], expected_velocity),
        ("pressure", pressure.shape[0], expected_pressure),
    ):
        if expected is not None and found != expected:
            raise ArchiveFormatError(
                f"{path}: {what} dimension mismatch: expected {expected}, "
                f"found {found}"
            )
    history = [
        {"stage": int(s), "mu": float(m), "indicator": float(i)}
        for s, m, i in zip(
            payload.get("history_stage", []),
            payload.get("history_mu", []),
            payload.get("history_indicator", []),
        )
    ]
    return RBSpace(
        velocity=velocity,
        pressure=pressure,
        parameters=[float(m) for m in payload["parameters"]],
        history=history,
    )
