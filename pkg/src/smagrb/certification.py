"""Stability constants and the certified a posteriori error bound.

The error bound machinery needs four ingredients, all computed here:

* the inf-sup factor of the Jacobian (generalized eigenproblem, with a
  radial-basis-function surrogate over the parameter range so the greedy
  loop does not pay one eigensolve per query),
* the Sobolev constant linking the L4 norm to the energy norm (fixed
  point iteration with a Monte-Carlo guard),
* the inverse-inequality constant (numerical maximization with a safety
  factor),
* the Lipschitz constant of the operator derivative combining the two.

From a residual norm, a stability factor and the Lipschitz constant the
bound follows as the smaller root of a quadratic; when the proximity
indicator exceeds one the bound does not exist and the indicator itself
is reported instead.
"""

import dataclasses
import json
import logging

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sparse
import scipy.sparse.linalg as spla
from scipy.interpolate import RBFInterpolator

from . import assembly as asm
from .exceptions import (
    ArchiveFormatError,
    BoundViolationError,
    EigenSolveError,
    NonpositiveBetaError,
)

log = logging.getLogger(__name__)

ARCHIVE_VERSION = 1


# ---------------------------------------------------------------------------
# reference parameter and energy weight


def reference_parameter(space, fields, c_s):
    """Pick the parameter whose eddy viscosity is smallest, and its weight.

    ``fields`` maps parameter values to lifted velocity fields.  Each
    candidate is scored by the sum over elements of ``(c_s h_K)^2``
    times the smallest gradient magnitude seen in the element; the
    minimizer becomes the reference parameter.  Returns ``(mu_bar,
    weight)`` where ``weight = 1/mu_bar + nu_T(w(mu_bar))`` at all
    quadrature points is the energy inner-product density.
    """
    if not fields:
        raise ValueError("need at least one candidate field")
    scale = (c_s * space.h) ** 2
    best = None
    for mu, w in sorted(fields.items()):
        gmag = asm.gradient_magnitude(space, w)
        score = float((scale * gmag.min(axis=1)).sum())
        if best is None or score < best[0]:
            best = (score, float(mu), w)
    _, mu_bar, w_bar = best
    weight = 1.0 / mu_bar + asm.eddy_viscosity(space, w_bar, c_s)
    return mu_bar, weight


# ---------------------------------------------------------------------------
# inf-sup factor and continuity constant


def saddle_jacobian(model, mu, u):
    """Free-dof saddle Jacobian of the steady operator at velocity ``u``."""
    ctx = model.context(mu)
    jvv = asm.assemble_jacobian(model.space, ctx, u)
    fv = model.free_velocity
    jvv_ff = jvv[fv][:, fv]
    return sparse.bmat(
        [[jvv_ff, model.b_fp.T], [model.b_fp, None]], format="csc"
    )


def saddle_gram(model, vel_gram):
    """Block-diagonal state Gram on the free saddle dofs."""
    fv = model.free_velocity
    t_ff = vel_gram[fv][:, fv]
    mp = asm.assemble_pressure_mass(model.space)
    mp_ff = mp[model.free_pressure][:, model.free_pressure]
    return sparse.block_diag((t_ff, mp_ff), format="csc")


def _beta_dense(jac, gram):
    gd = np.asarray(gram.todense())
    jd = np.asarray(jac.todense())
    evals, evecs = sla.eigh(gd)
    if evals.min() <= 0.0:
        raise EigenSolveError("state Gram is not positive definite")
    inv_sqrt = (evecs * (1.0 / np.sqrt(evals))) @ evecs.T
    return sla.svdvals(inv_sqrt @ jd @ inv_sqrt)


def compute_beta(jac, gram, method="auto", dense_limit=1200):
    """Inf-sup factor: smallest singular value of the Gram-whitened Jacobian.

    Equivalently the square root of the smallest eigenvalue of
    ``J^T X^{-1} J z = lambda X z``.  The sparse path uses shift-invert
    Lanczos with factorizations of ``J`` and ``X``; the dense path
    whitens with the matrix square root and takes singular values.
    """
    n = jac.shape[0]
    if method == "auto":
        method = "dense" if n <= dense_limit else "sparse"
    if method == "dense":
        beta = float(_beta_dense(jac, gram).min())
    elif method == "sparse":
        try:
            lu_j = spla.splu(jac.tocsc())
            lu_x = spla.splu(gram.tocsc())
        except RuntimeError as exc:
            raise EigenSolveError(f"factorization for inf-sup solve failed: {exc}")

        def apply_a(x):
            return jac.T @ lu_x.solve(jac @ x)

        def apply_ainv(x):
            return lu_j.solve(gram @ lu_j.solve(x, trans="T"))

        a_op = spla.LinearOperator((n, n), matvec=apply_a)
        ainv_op = spla.LinearOperator((n, n), matvec=apply_ainv)
        try:
            vals = spla.eigsh(
                a_op, k=1, M=gram, sigma=0.0, mode="normal",
                OPinv=ainv_op, which="LM", return_eigenvectors=False,
                maxiter=2000,
            )
        except (spla.ArpackError, spla.ArpackNoConvergence) as exc:
            raise EigenSolveError(f"inf-sup eigensolve did not converge: {exc}")
        lam = float(vals[0])
        if lam <= 0.0:
            raise NonpositiveBetaError(
                f"inf-sup eigenvalue is {lam:.3e}; stability lost"
            )
        beta = float(np.sqrt(lam))
    else:
        raise ValueError(f"unknown method {method!r}")
    if beta <= 0.0:
        raise NonpositiveBetaError(f"inf-sup factor is {beta:.3e}")
    return beta


def estimate_continuity(jac, gram, tol=1e-6, max_iter=5000, seed=0):
    """Continuity constant: largest generalized singular value of ``jac``.

    Power iteration on the pencil ``(J^T X^{-1} J, X)`` with the given
    relative tolerance on the Rayleigh quotient.
    """
    rng = np.random.default_rng(seed)
    n = jac.shape[0]
    try:
        lu_x = spla.splu(gram.tocsc())
    except RuntimeError as exc:
        raise EigenSolveError(f"gram factorization failed: {exc}")
    x = rng.standard_normal(n)
    lam_prev = 0.0
    for _ in range(max_iter):
        ax = jac.T @ lu_x.solve(jac @ x)
        y = lu_x.solve(ax)
        lam = float(x @ ax) / float(x @ (gram @ x))
        norm = float(np.sqrt(y @ (gram @ y)))
        if norm == 0.0:
            raise EigenSolveError("power iteration collapsed to zero")
        x = y / norm
        if lam_prev > 0.0 and abs(lam - lam_prev) <= tol * lam:
            return float(np.sqrt(lam))
        lam_prev = lam
    raise EigenSolveError(
        f"continuity power iteration did not converge in {max_iter} steps"
    )


def equivalence_extremes(vel_gram, stiffness, free, tol=1e-8, seed=0):
    """Largest and smallest eigenvalues of the energy-vs-H1 pencil.

    Diagnostic only: the square roots bound the norm equivalence between
    the energy norm and the plain gradient seminorm on the free space.
    Uses Lanczos rather than power iteration: near-constant weights make
    the pencil spectrum cluster, where power iteration stalls.
    """
    t_ff = vel_gram[free][:, free].tocsc()
    a_ff = stiffness[free][:, free].tocsc()
    n = t_ff.shape[0]
    try:
        lu_a = spla.splu(a_ff)
        lu_t = spla.splu(t_ff)
    except RuntimeError as exc:
        raise EigenSolveError(f"equivalence factorization failed: {exc}")
    v0 = np.random.default_rng(seed).standard_normal(n)

    def extreme(shift_invert):
        kwargs = dict(
            k=1, M=a_ff, which="LM", v0=v0, tol=tol, maxiter=5000,
            return_eigenvectors=False,
        )
        if shift_invert:
            kwargs.update(
                sigma=0.0,
                OPinv=spla.LinearOperator((n, n), matvec=lu_t.solve),
            )
        else:
            kwargs["Minv"] = spla.LinearOperator((n, n), matvec=lu_a.solve)
        try:
            vals = spla.eigsh(t_ff, **kwargs)
        except (spla.ArpackError, spla.ArpackNoConvergence) as exc:
            raise EigenSolveError(
                f"equivalence eigensolve did not converge: {exc}"
            )
        lam = float(vals[0])
        if lam <= 0.0:
            raise EigenSolveError(
                f"equivalence pencil produced nonpositive eigenvalue {lam:.3e}"
            )
        return lam

    return float(np.sqrt(extreme(False))), float(np.sqrt(extreme(True)))


# ---------------------------------------------------------------------------
# Sobolev constant (L4 vs energy norm)


@dataclasses.dataclass
class SobolevResult:
    """Outcome of the fixed-point maximization of ``||v||_L4 / ||v||_T``."""

    constant: float
    maximizer: np.ndarray
    converged: bool
    iterations: int
    restarts: int
    probe_violations: int


def _largest_generalized(lu_t, w_mat, x0, tol=1e-10, max_iter=400):
    """Largest eigenpair of ``W z = lambda T z`` by power iteration."""
    x = x0
    lam_prev = 0.0
    lam = 0.0
    for _ in range(max_iter):
        wx = w_mat @ x
        lam = float(x @ wx)
        y = lu_t.solve(wx)
        # T y = W x, so y's T-norm is sqrt(y . W x)
        t_norm = float(np.sqrt(max(y @ wx, 0.0)))
        if t_norm == 0.0:
            return lam, x
        x = y / t_norm
        if lam_prev > 0.0 and abs(lam - lam_prev) <= tol * lam:
            break
        lam_prev = lam
    return lam, x


def compute_sobolev_constant(
    space,
    vel_gram,
    free,
    seed=0,
    tol=1e-8,
    max_outer=60,
    probes=1000,
    max_restarts=6,
):
    """Sobolev constant by fixed-point maximization with a random guard.

    Starting from a seeded random velocity field, each outer step
    assembles the vector mass weighted by the squared pointwise speed of
    the current iterate, takes the principal eigenvector of that matrix
    against the energy Gram, and re-normalizes.  At the fixed point the
    fourth root of the eigenvalue equals the ratio ``||v||_L4 /
    ||v||_T``.  After convergence, random probe fields check that no
    direction beats the maximizer; a violating probe restarts the fixed
    point from that direction.
    """
    rng = np.random.default_rng(seed)
    t_ff = vel_gram[free][:, free].tocsc()
    lu_t = spla.splu(t_ff)
    n_free = free.size

    def full(v_free):
        out = np.zeros(space.n_velocity)
        out[free] = v_free
        return out

    def t_norm(v_free):
        return float(np.sqrt(max(v_free @ (t_ff @ v_free), 0.0)))

    def ratio(v_free):
        return asm.velocity_l4_norm(space, full(v_free)) / t_norm(v_free)

    def run_fixed_point(v_free):
        v = v_free / t_norm(v_free)
        c_prev = ratio(v)
        for it in range(1, max_outer + 1):
            vals = asm.velocity_values(space, full(v))
            density = vals[..., 0] ** 2 + vals[..., 1] ** 2
            w_mat = asm.assemble_weighted_vector_mass(space, density)
            w_ff = w_mat[free][:, free]
            _, z = _largest_generalized(lu_t, w_ff, v)
            v = z / t_norm(z)
            c = ratio(v)
            if abs(c - c_prev) <= tol * max(c, 1e-300):
                return c, v, True, it
            c_prev = c
        return c_prev, v, False, max_outer

    start = rng.standard_normal(n_free)
    constant, maximizer, converged, iterations = run_fixed_point(start)
    restarts = 0
    violations = 0
    while True:
        worst = None
        for _ in range(probes):
            probe = rng.standard_normal(n_free)
            r = ratio(probe)
            if r > constant * (1.0 + 1e-9) and (worst is None or r > worst[0]):
                worst = (r, probe)
        if worst is None:
            break
        violations += 1
        restarts += 1
        if restarts > max_restarts:
            log.warning(
                "Sobolev probe still above fixed point after %d restarts; "
                "keeping the larger probe value", max_restarts,
            )
            constant = worst[0]
            break
        c, v, conv, it = run_fixed_point(worst[1])
        if c > constant:
            constant, maximizer, converged, iterations = c, v, conv, it
    return SobolevResult(
        constant=float(constant),
        maximizer=full(maximizer),
        converged=converged,
        iterations=iterations,
        restarts=restarts,
        probe_violations=violations,
    )


# ---------------------------------------------------------------------------
# inverse inequality constant


def compute_inverse_constant(space, n_samples=200, seed=0, safety=1.2):
    """Inverse-inequality constant for gradients, estimated numerically.

    Maximizes ``||grad v||_L3(K) / (h_K^{-1/3} ||grad v||_L2(K))`` per
    element over every single-basis-function field and ``n_samples``
    seeded random fields, then applies the safety factor.  Norms use the
    fixed quadrature rule.
    """
    rng = np.random.default_rng(seed)
    detw = space.detw
    h = space.h

    def element_ratio(gmag):
        l3 = np.maximum((detw * gmag**3).sum(axis=1), 0.0) ** (1.0 / 3.0)
        l2 = np.sqrt(np.maximum((detw * gmag**2).sum(axis=1), 0.0))
        ok = l2 > 0.0
        if not np.any(ok):
            return 0.0
        return float((l3[ok] * h[ok] ** (1.0 / 3.0) / l2[ok]).max())

    best = 0.0
    # single local basis functions, one component at a time
    for j in range(space.vgrad.shape[2]):
        gmag = np.sqrt((space.vgrad[:, :, j, :] ** 2).sum(axis=2))
        best = max(best, element_ratio(gmag))
    # random global fields
    for _ in range(n_samples):
        coeffs = rng.standard_normal(space.n_velocity)
        gmag = asm.gradient_magnitude(space, coeffs)
        best = max(best, element_ratio(gmag))
    return safety * best


def compute_rho(c_t, c_s, h, c_inv, dim=2, cs_squared=True):
    """Lipschitz constant of the operator derivative.

    ``2 c_t + 4 c_s^2 h^(2 - dim/2) c_inv`` by default; with
    ``cs_squared=False`` the Smagorinsky constant enters linearly
    instead (the two published forms of the constant; the squared
    variant follows the derivation step by step).
    """
    for name, value in (("c_t", c_t), ("c_s", c_s), ("h", h), ("c_inv", c_inv)):
        if value < 0.0:
            raise ValueError(f"{name} must be nonnegative, got {value}")
    factor = c_s**2 if cs_squared else c_s
    return 2.0 * c_t + 4.0 * factor * h ** (2.0 - dim / 2.0) * c_inv


# ---------------------------------------------------------------------------
# error bound


@dataclasses.dataclass
class EstimatorValue:
    """Certified bound (when the proximity test passes) or raw indicator.

    ``proximity`` is ``4 eps rho / beta^2``; the bound exists only when
    it is at most one and is then the smaller root of
    ``rho a^2 - beta a + eps = 0``.
    """

    residual_norm: float
    stability: float
    lipschitz: float
    proximity: float
    bound: float | None

    @property
    def certified(self):
        return self.bound is not None

    @property
    def indicator(self):
        """Greedy ranking value: the bound when certified, else proximity."""
        return self.bound if self.certified else self.proximity


def error_bound(residual_norm, stability, lipschitz):
    """Evaluate the a posteriori bound from its three ingredients."""
    if stability <= 0.0:
        raise NonpositiveBetaError(
            f"stability factor must be positive, got {stability:.3e}"
        )
    if residual_norm < 0.0 or lipschitz <= 0.0:
        raise ValueError("residual norm must be >= 0 and lipschitz > 0")
    tau = 4.0 * residual_norm * lipschitz / stability**2
    if tau <= 1.0:
        bound = (stability / (2.0 * lipschitz)) * (1.0 - np.sqrt(1.0 - tau))
    else:
        bound = None
    return EstimatorValue(
        residual_norm=float(residual_norm),
        stability=float(stability),
        lipschitz=float(lipschitz),
        proximity=float(tau),
        bound=None if bound is None else float(bound),
    )


def effectivity_report(rows, slack=1e-12):
    """Check bound validity and summarize effectivities.

    ``rows`` is a list of ``(mu, error, EstimatorValue)``.  Raises
    ``BoundViolationError`` naming every certified row whose bound falls
    below the measured error; otherwise returns a summary dict with the
    per-row table and effectivity statistics.
    """
    table = []
    violations = []
    effectivities = []
    for mu, err, est in rows:
        eff = None
        if est.certified:
            if err > est.bound * (1.0 + slack):
                violations.append((mu, err, est.bound))
            eff = est.bound / err if err > 0.0 else np.inf
            effectivities.append(eff)
        table.append(
            {
                "mu": float(mu),
                "error": float(err),
                "bound": est.bound,
                "proximity": est.proximity,
                "certified": est.certified,
                "effectivity": None if eff is None else float(eff),
            }
        )
    if violations:
        listing = ", ".join(
            f"mu={mu:g} (error {e:.3e} > bound {b:.3e})" for mu, e, b in violations
        )
        raise BoundViolationError(f"error bound violated at: {listing}")
    finite = [e for e in effectivities if np.isfinite(e)]
    summary = {
        "rows": table,
        "certified_fraction": (
            sum(1 for r in table if r["certified"]) / len(table) if table else 0.0
        ),
        "max_effectivity": max(finite) if finite else None,
        "median_effectivity": float(np.median(finite)) if finite else None,
    }
    return summary


# ---------------------------------------------------------------------------
# stability-factor surrogate


class StabilityInterpolant:
    """One-dimensional interpolant of the inf-sup factor samples.

    Prefers a thin-plate-spline radial basis interpolant; if the kernel
    system is ill-conditioned (checked by replaying the interpolation
    condition at the samples) it falls back to piecewise-linear
    interpolation with a logged warning.
    """

    def __init__(self, mus, values, kind="rbf"):
        order = np.argsort(mus)
        self.mus = np.asarray(mus, dtype=float)[order]
        self.values = np.asarray(values, dtype=float)[order]
        if self.mus.size < 2:
            raise ValueError("need at least two samples")
        if np.any(np.diff(self.mus) == 0.0):
            raise ValueError("duplicate sample parameters")
        self.kind = kind
        self._rbf = None
        if kind == "rbf":
            try:
                self._rbf = RBFInterpolator(
                    self.mus[:, None], self.values, kernel="thin_plate_spline"
                )
                replay = self._rbf(self.mus[:, None])
                scale = np.abs(self.values).max()
                if not np.all(
                    np.abs(replay - self.values) <= 1e-10 * max(scale, 1e-300)
                ):
                    raise ValueError("interpolation condition violated")
            except (ValueError, np.linalg.LinAlgError) as exc:
                log.warning(
                    "radial-basis surrogate ill-conditioned (%s); "
                    "falling back to piecewise-linear", exc,
                )
                self.kind = "linear"
                self._rbf = None

    def __call__(self, mu):
        mu_arr = np.atleast_1d(np.asarray(mu, dtype=float))
        if self.kind == "rbf":
            out = self._rbf(mu_arr[:, None])
        else:
            out = np.interp(mu_arr, self.mus, self.values)
        return float(out[0]) if np.isscalar(mu) or np.ndim(mu) == 0 else out


def fit_beta_surrogate(
    solver,
    mu_min,
    mu_max,
    n_init=20,
    budget=40,
    rel_tol=1e-2,
    n_candidates=200,
):
    """Adaptive sampling of the inf-sup factor over a parameter interval.

    ``solver`` maps a parameter to the true factor (one eigensolve).
    After seeding with a uniform grid, each round inserts the candidate
    where the radial-basis and piecewise-linear views of the current
    samples disagree most, verifies the surrogate against the true value
    there, and stops once the verified relative disagreement drops to
    ``rel_tol`` or the budget is spent.
    """
    if not mu_min < mu_max:
        raise ValueError("need mu_min < mu_max")
    n_init = max(2, min(n_init, budget))
    mus = list(np.linspace(mu_min, mu_max, n_init))
    values = [float(solver(mu)) for mu in mus]
    checks = []
    while len(mus) < budget:
        surrogate = StabilityInterpolant(mus, values, kind="rbf")
        linear = StabilityInterpolant(mus, values, kind="linear")
        candidates = np.linspace(mu_min, mu_max, n_candidates)
        spacing = (mu_max - mu_min) / (4 * n_candidates)
        fresh = np.array(
            [c for c in candidates if np.abs(np.asarray(mus) - c).min() > spacing]
        )
        if fresh.size == 0:
            break
        disagreement = np.abs(surrogate(fresh) - linear(fresh)) / np.maximum(
            np.abs(linear(fresh)), 1e-300
        )
        pick = float(fresh[int(np.argmax(disagreement))])
        truth_value = float(solver(pick))
        predicted = surrogate(pick)
        verified = abs(predicted - truth_value) / abs(truth_value)
        checks.append((pick, verified))
        mus.append(pick)
        values.append(truth_value)
        log.info(
            "stability surrogate: inserted mu=%g (verified rel err %.2e, "
            "%d samples)", pick, verified, len(mus),
        )
        if verified <= rel_tol:
            break
    surrogate = StabilityInterpolant(mus, values, kind="rbf")
    return surrogate, checks


# ---------------------------------------------------------------------------
# archive


@dataclasses.dataclass
class CertificationState:
    """Everything the greedy loop and the validators need, frozen offline."""

    mu_bar: float
    energy_weight: np.ndarray
    c_t: float
    c_inv: float
    rho: float
    cs_squared: bool
    gamma: float
    surrogate: StabilityInterpolant
    equivalence: tuple
    sobolev_converged: bool = True

    def stability(self, mu):
        return float(self.surrogate(mu))


def save_certification(state, path):
    payload = {
        "version": ARCHIVE_VERSION,
        "mu_bar": state.mu_bar,
        "c_t": state.c_t,
        "c_inv": state.c_inv,
        "rho": state.rho,
        "cs_squared": state.cs_squared,
        "gamma": state.gamma,
        "equivalence": list(state.equivalence),
        "sobolev_converged": state.sobolev_converged,
        "surrogate_kind": state.surrogate.kind,
        "beta_mus": state.surrogate.mus.tolist(),
        "beta_values": state.surrogate.values.tolist(),
        "energy_weight_shape": list(state.energy_weight.shape),
        "energy_weight": state.energy_weight.ravel().tolist(),
    }
    with open(path, "w", encoding="ascii") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_certification(path):
    try:
        with open(path, encoding="ascii") as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ArchiveFormatError(f"{path}: unreadable certification archive: {exc}")
    if payload.get("version") != ARCHIVE_VERSION:
        raise ArchiveFormatError(
            f"{path}: unsupported certification archive version "
            f"{payload.get('version')!r}"
        )
    try:
        surrogate = StabilityInterpolant(
            np.array(payload["beta_mus"]),
            np.array(payload["beta_values"]),
            kind=payload["surrogate_kind"],
        )
        weight = np.array(payload["energy_weight"]).reshape(
            payload["energy_weight_shape"]
        )
        return CertificationState(
            mu_bar=float(payload["mu_bar"]),
            energy_weight=weight,
            c_t=float(payload["c_t"]),
            c_inv=float(payload["c_inv"]),
            rho=float(payload["rho"]),
            cs_squared=bool(payload["cs_squared"]),
            gamma=float(payload["gamma"]),
            surrogate=surrogate,
            equivalence=tuple(payload["equivalence"]),
            sobolev_converged=bool(payload["sobolev_converged"]),
        )
    except (KeyError, ValueError) as exc:
        raise ArchiveFormatError(f"{path}: malformed certification archive: {exc}")
