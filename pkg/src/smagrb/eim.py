"""Greedy interpolation of the velocity-gradient magnitude field.

The eddy viscosity depends on the parameter only through the scalar
field ``g = |grad w|_F`` evaluated at quadrature points.  This module
builds an interpolation basis for that field by a greedy loop over
training snapshots: each iteration picks the worst-approximated
snapshot, places an interpolation point where its residual peaks, and
adds the normalized residual as the next basis function.  Coefficients
for a new field then come from one forward substitution with the unit
lower triangular collocation matrix.

Fields are flat arrays over all quadrature points in element-major
order (``flat_index = element * n_qp + local_point``).
"""

import dataclasses

import numpy as np
import scipy.linalg as sla

from . import assembly as asm
from .exceptions import ArchiveFormatError, DegenerateResidualError

ARCHIVE_VERSION = 1

#: residual floor signalling an exhausted training set
DEGENERATE_TOL = 1e-14


@dataclasses.dataclass
class EIMBasis:
    """Trained interpolation basis.

    ``basis`` holds the normalized residual fields row-wise, ``magic``
    the flat quadrature-point index of each interpolation point, and
    ``interp`` the unit lower triangular collocation matrix with
    ``interp[i, k] = basis[k][magic[i]]``.  ``history`` records the
    maximum relative training error before each enrichment and
    ``selected`` which training snapshot was chosen.
    """

    basis: np.ndarray
    magic: np.ndarray
    interp: np.ndarray
    history: np.ndarray
    selected: np.ndarray

    @property
    def size(self):
        return self.basis.shape[0]

    @property
    def n_points(self):
        return self.basis.shape[1]


def coefficients(basis, values_at_magic):
    """Interpolation coefficients from field values at the magic points."""
    values = np.asarray(values_at_magic, dtype=float)
    if values.shape[0] != basis.size:
        raise ValueError(
            f"expected {basis.size} magic-point values, got {values.shape[0]}"
        )
    return sla.solve_triangular(
        basis.interp, values, lower=True, unit_diagonal=True
    )


def interpolate(basis, sigma):
    """Field values of the interpolant with coefficients ``sigma``."""
    return np.asarray(sigma) @ basis.basis


def interpolation_error(basis, field):
    """Relative sup-norm error of interpolating ``field``."""
    scale = np.abs(field).max()
    if scale == 0.0:
        return 0.0
    approx = interpolate(basis, coefficients(basis, field[basis.magic]))
    return float(np.abs(field - approx).max() / scale)


def train_eim(samples, tol, m_max, sample_ids=None):
    """Greedy training of the interpolation basis.

    ``samples`` is a ``(n_samples, n_points)`` array of training fields.
    The loop stops once the worst relative sup-norm error over the
    training set drops to ``tol`` or the basis reaches ``m_max``;
    a residual below the degeneracy floor before that means the
    training set carries no more information and raises
    ``DegenerateResidualError``.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    n_samples, n_points = samples.shape
    if n_samples < 1:
        raise ValueError("need at least one training sample")
    if tol <= 0.0:
        raise ValueError("tolerance must be positive")
    m_max = min(m_max, n_samples)
    scales = np.abs(samples).max(axis=1)
    sample_ids = (
        np.arange(n_samples) if sample_ids is None else np.asarray(sample_ids)
    )

    basis_rows = []
    magic = []
    history = []
    selected = []
    interp = np.zeros((m_max, m_max))
    residuals = samples.copy()

    for m in range(m_max):
        with np.errstate(invalid="ignore", divide="ignore"):
            errors = np.abs(residuals).max(axis=1) / np.where(scales > 0, scales, 1.0)
        worst = int(np.argmax(errors))
        max_error = float(errors[worst])
        if max_error <= tol:
            break
        residual = residuals[worst]
        point = int(np.argmax(np.abs(residual)))
        peak = residual[point]
        if abs(peak) < DEGENERATE_TOL:
            raise DegenerateResidualError(
                f"training set exhausted after {m} basis functions "
                f"(residual peak {abs(peak):.3e} below {DEGENERATE_TOL:g} "
                f"with worst error {max_error:.3e} above tolerance {tol:g})"
            )
        history.append(max_error)
        selected.append(sample_ids[worst])
        q = residual / peak
        basis_rows.append(q)
        magic.append(point)
        interp[m, m] = 1.0
        for i in range(m):
            interp[m, i] = basis_rows[i][point]
        # deflate every residual by its interpolation update at the new point
        updates = residuals[:, point].copy()
        residuals -= updates[:, None] * q[None, :]

    m = len(basis_rows)
    if m == 0:
        # every sample is already below tolerance relative to itself;
        # keep the largest one so downstream code has a basis to work with
        worst = int(np.argmax(scales))
        residual = samples[worst]
        point = int(np.argmax(np.abs(residual)))
        if abs(residual[point]) < DEGENERATE_TOL:
            raise DegenerateResidualError("all training samples are zero fields")
        basis_rows = [residual / residual[point]]
        magic = [point]
        history = [1.0]
        selected = [sample_ids[worst]]
        m = 1
    lower = np.tril(interp[:m, :m])
    lower[np.diag_indices(m)] = 1.0
    return EIMBasis(
        basis=np.array(basis_rows),
        magic=np.array(magic, dtype=np.int64),
        interp=lower,
        history=np.array(history),
        selected=np.array(selected),
    )


def gradient_snapshot(space, w_coeffs):
    """Flat gradient-magnitude field of a lifted velocity field."""
    return asm.gradient_magnitude(space, w_coeffs).ravel()


def magic_point_gradients(space, basis, fields):
    """Gradient tensors of velocity fields at the magic points.

    ``fields`` has one full velocity vector per column; the result has
    shape ``(M, n_fields, 2, 2)``.
    """
    fields = np.atleast_2d(fields.T).T
    n_fields = fields.shape[1]
    elems, locs = np.divmod(basis.magic, space.detw.shape[1])
    out = np.empty((basis.size, n_fields, 2, 2))
    for j in range(n_fields):
        grads = asm.velocity_gradients(space, fields[:, j])
        out[:, j] = grads[elems, locs]
    return out


def smagorinsky_affine_tensors(space, basis, vel_basis, lift, c_s):
    """Project the eddy-viscosity diffusion of each basis mode.

    For every interpolation mode ``q_k`` this assembles the diffusion
    weighted by ``(c_s h_K)^2 q_k`` and returns its projections: the
    ``(M, n_b, n_b)`` tensor over velocity basis pairs, the ``(M, n_b)``
    couplings with the lift and the ``(M,)`` lift-lift scalars.
    """
    n_qp = space.detw.shape[1]
    n_b = vel_basis.shape[1]
    scale = (c_s * space.h[:, None]) ** 2
    tensors = np.empty((basis.size, n_b, n_b))
    lift_vec = np.empty((basis.size, n_b))
    lift_scalar = np.empty(basis.size)
    for k in range(basis.size):
        weight = scale * basis.basis[k].reshape(space.n_elements, n_qp)
        mat = asm.assemble_weighted_vector_stiffness(space, weight)
        projected = mat @ vel_basis
        tensors[k] = vel_basis.T @ projected
        s_lift = mat @ lift
        lift_vec[k] = vel_basis.T @ s_lift
        lift_scalar[k] = float(lift @ s_lift)
    return tensors, lift_vec, lift_scalar


def eim_model_error(space, basis, w_truth, w_reduced, c_s, state_gram):
    """Dual-norm gap between the true and interpolated eddy-viscosity terms.

    Compares the momentum functionals ``v -> (nu_T(w_h) grad w_h, grad v)``
    and its reduced counterpart with the interpolated viscosity at
    ``w_reduced``, both measured in the dual of the energy norm over the
    free velocity space.  Returns ``(gap, magnitude)`` where
    ``magnitude`` is the dual norm of the true term.
    """
    free = state_gram.free_velocity
    true_term = asm.assemble_smagorinsky(space, w_truth, c_s) @ w_truth
    g_reduced = gradient_snapshot(space, w_reduced)
    sigma = coefficients(basis, g_reduced[basis.magic])
    n_qp = space.detw.shape[1]
    nu_hat = (c_s * space.h[:, None]) ** 2 * interpolate(basis, sigma).reshape(
        space.n_elements, n_qp
    )
    reduced_term = asm.assemble_weighted_vector_stiffness(space, nu_hat) @ w_reduced
    diff = (true_term - reduced_term)[free]
    ref = true_term[free]
    gap = float(np.sqrt(max(diff @ state_gram.riesz_velocity(diff), 0.0)))
    magnitude = float(np.sqrt(max(ref @ state_gram.riesz_velocity(ref), 0.0)))
    return gap, magnitude


def save_eim(basis, path):
    """Write the basis as a versioned ``.npz`` archive."""
    np.savez(
        path,
        version=np.array([ARCHIVE_VERSION]),
        basis=basis.basis,
        magic=basis.magic,
        interp=basis.interp,
        history=basis.history,
        selected=basis.selected,
    )


def load_eim(path, expected_points=None):
    """Read an interpolation archive, checking version and field size."""
    try:
        with np.load(path) as data:
            payload = {key: data[key] for key in data.files}
    except (OSError, ValueError) as exc:
        raise ArchiveFormatError(f"{path}: unreadable interpolation archive: {exc}")
    required = {"version", "basis", "magic", "interp", "history", "selected"}
    missing = required - payload.keys()
    if missing:
        raise ArchiveFormatError(
            f"{path}: interpolation archive missing fields {sorted(missing)}"
        )
    version = int(payload["version"][0])
    if version != ARCHIVE_VERSION:
        raise ArchiveFormatError(
            f"{path}: unsupported interpolation archive version {version}"
        )
    basis = EIMBasis(
        basis=payload["basis"],
        magic=payload["magic"],
        interp=payload["interp"],
        history=payload["history"],
        selected=payload["selected"],
    )
    if expected_points is not None and basis.n_points != expected_points:
        raise ArchiveFormatError(
            f"{path}: quadrature-point count mismatch: expected "
            f"{expected_points}, found {basis.n_points}"
        )
    return basis
