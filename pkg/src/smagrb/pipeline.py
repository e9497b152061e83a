"""Staged drivers tying the solvers together into disk-backed runs.

``run_offline`` executes the build stages in order — mesh, truth sweep,
interpolation training, certification, reduction, operator projection —
persisting each stage's artifact in the output directory so an
interrupted run resumes from the last completed stage.  ``run_online``
answers parameter queries from a finished artifact directory without
ever assembling a full-order operator; ``run_validate`` measures true
errors against the certified bounds on a verification grid.
"""

import concurrent.futures
import csv
import dataclasses
import json
import logging
import os
import time

import numpy as np

from . import assembly as asm
from . import certification as cert
from . import config as cfgmod
from . import eim, meshing, offline, online, truth
from ._kernels import BACKEND
from .exceptions import InvalidInputError, SmagrbError

log = logging.getLogger(__name__)

SUMMARY_VERSION = 1


@dataclasses.dataclass
class Workspace:
    """Artifact layout inside one run directory."""

    root: str

    @property
    def config_path(self):
        return os.path.join(self.root, "config.ini")

    @property
    def mesh_path(self):
        return os.path.join(self.root, "mesh.txt")

    @property
    def snapshot_dir(self):
        return os.path.join(self.root, "snapshots")

    @property
    def eim_path(self):
        return os.path.join(self.root, "eim.npz")

    @property
    def certification_path(self):
        return os.path.join(self.root, "certification.json")

    @property
    def basis_path(self):
        return os.path.join(self.root, "rb_basis.npz")

    @property
    def operators_path(self):
        return os.path.join(self.root, "operators.npz")

    @property
    def summary_path(self):
        return os.path.join(self.root, "offline.json")


def effective_benchmark(cfg):
    """Lift/boundary style: custom meshes pick it via the inflow key."""
    if cfg.problem.benchmark != "custom":
        return cfg.problem.benchmark
    return "cavity" if cfg.problem.inflow == "lid" else "step"


def build_model(cfg, mesh=None):
    """Construct the truth model a configuration describes."""
    if mesh is None and cfg.problem.benchmark == "custom":
        mesh = meshing.read_mesh(cfg.problem.mesh_path)
    return truth.build_benchmark_model(
        effective_benchmark(cfg),
        cfg.problem.resolution,
        cfg.problem.smagorinsky_constant,
        amplitude=cfg.problem.amplitude,
        mesh=mesh,
    )


def truth_settings(cfg):
    return truth.SolverConfig(
        dt=cfg.truth.dt, eps_fe=cfg.truth.eps, max_steps=cfg.truth.max_steps
    )


def online_settings(cfg):
    dt, eps, max_steps = cfg.online_solver_settings()
    return online.OnlineConfig(dt=dt, eps=eps, max_steps=max_steps)


def _sweep_chunk(config_path, mus):
    """Worker entry: solve a contiguous parameter chunk into the cache."""
    cfg = cfgmod.load_config(config_path)
    ws = Workspace(os.path.dirname(config_path))
    model = build_model(cfg, mesh=meshing.read_mesh(ws.mesh_path))
    truth.solve_sweep(model, mus, truth_settings(cfg), cache_dir=ws.snapshot_dir)
    return len(mus)


def _parallel_sweep(ws, cfg, mus):
    """Split a sweep into contiguous chunks across worker processes.

    Workers rebuild the model from the persisted config and write into
    the shared snapshot cache; the caller re-reads from the cache, so
    results are identical to a serial sweep up to warm-start choices at
    chunk boundaries.
    """
    jobs = min(cfg.run.jobs, len(mus))
    chunks = [list(chunk) for chunk in np.array_split(sorted(mus), jobs)]
    with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(_sweep_chunk, ws.config_path, c) for c in chunks]
        for future in futures:
            future.result()


def run_offline(cfg, resume=True):
    """Execute all offline stages, returning the summary dict.

    With ``resume`` (the default) stages whose artifacts already exist
    are loaded instead of recomputed, so a rerun after an interrupt
    picks up where the previous run stopped.
    """
    ws = Workspace(cfg.run.output)
    os.makedirs(ws.root, exist_ok=True)
    cfgmod.save_config(cfg, ws.config_path)
    timings = {}
    stage = "mesh"
    try:
        t0 = time.perf_counter()
        if resume and os.path.exists(ws.mesh_path):
            mesh = meshing.read_mesh(ws.mesh_path)
        else:
            mesh = _generate_mesh(cfg)
            meshing.write_mesh(mesh, ws.mesh_path)
        model = build_model(cfg, mesh=mesh)
        space = model.space
        timings[stage] = time.perf_counter() - t0
        log.info(
            "mesh: %d triangles, %d velocity + %d pressure dofs",
            space.n_elements, space.n_velocity, space.n_pressure,
        )

        stage = "snapshots"
        t0 = time.perf_counter()
        eim_mus = cfgmod.eim_grid(cfg)
        solver_cfg = truth_settings(cfg)
        if cfg.run.jobs > 1:
            _parallel_sweep(ws, cfg, eim_mus)
        snaps = truth.solve_sweep(
            model, eim_mus, solver_cfg, cache_dir=ws.snapshot_dir
        )
        timings[stage] = time.perf_counter() - t0
        truth_seconds = sum(s.wall_time for s in snaps.values()) / len(snaps)

        stage = "eim"
        t0 = time.perf_counter()
        if resume and os.path.exists(ws.eim_path):
            basis = eim.load_eim(
                ws.eim_path, expected_points=space.detw.size
            )
        else:
            fields = [snaps[mu].u + model.lift.coeffs for mu in eim_mus]
            samples = np.array(
                [eim.gradient_snapshot(space, w) for w in fields]
            )
            basis = eim.train_eim(
                samples, cfg.eim.tol, cfg.eim.max_modes, sample_ids=eim_mus
            )
            eim.save_eim(basis, ws.eim_path)
        timings[stage] = time.perf_counter() - t0
        log.info("interpolation basis: %d modes", basis.size)

        stage = "certification"
        t0 = time.perf_counter()
        if resume and os.path.exists(ws.certification_path):
            cstate = cert.load_certification(ws.certification_path)
        else:
            cstate = _certify(cfg, ws, model, snaps, solver_cfg)
            cert.save_certification(cstate, ws.certification_path)
        vel_gram = asm.assemble_energy_gram(space, cstate.energy_weight)
        state_gram = asm.StateGram(
            space, vel_gram, model.free_velocity, model.free_pressure
        )
        timings[stage] = time.perf_counter() - t0

        stage = "reduce"
        t0 = time.perf_counter()
        energy = offline.TEnergy(space, vel_gram, model.free_velocity)
        if resume and os.path.exists(ws.basis_path):
            rb = offline.load_rb_space(
                ws.basis_path, space.n_velocity, space.n_pressure
            )
            ops = None
        else:
            rb, ops = _reduce(
                cfg, ws, model, snaps, basis, cstate, energy, state_gram,
                solver_cfg,
            )
            offline.save_rb_space(rb, ws.basis_path)
        timings[stage] = time.perf_counter() - t0

        stage = "operators"
        t0 = time.perf_counter()
        if ops is None:
            if resume and os.path.exists(ws.operators_path):
                ops = online.load_operators(ws.operators_path)
            else:
                ops = online.project_operators(
                    space, rb, basis, model.lift.coeffs, model.c_s, model.f_vec
                )
        online.save_operators(ops, ws.operators_path)
        timings[stage] = time.perf_counter() - t0
    except Exception:
        log.error("offline stage %r failed; completed artifacts remain in %s",
                  stage, ws.root)
        raise
    summary = {
        "version": SUMMARY_VERSION,
        "backend": BACKEND,
        "mesh": {
            "triangles": space.n_elements,
            "velocity_dofs": space.n_velocity,
            "pressure_dofs": space.n_pressure,
        },
        "eim_modes": basis.size,
        "velocity_basis": rb.n_velocity_basis,
        "pressure_basis": rb.n_pressure_basis,
        "selected_parameters": rb.parameters,
        "greedy_history": rb.history,
        "constants": {
            "mu_bar": cstate.mu_bar,
            "c_t": cstate.c_t,
            "c_inv": cstate.c_inv,
            "rho": cstate.rho,
            "gamma": cstate.gamma,
            "beta_min": float(min(cstate.surrogate.values)),
            "beta_max": float(max(cstate.surrogate.values)),
        },
        "truth_seconds_per_solve": truth_seconds,
        "stage_seconds": timings,
    }
    with open(ws.summary_path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


def _generate_mesh(cfg):
    if cfg.problem.benchmark == "cavity":
        return meshing.generate_cavity_mesh(cfg.problem.resolution)
    if cfg.problem.benchmark == "step":
        return meshing.generate_step_mesh(cfg.problem.resolution)
    return meshing.read_mesh(cfg.problem.mesh_path)


def _certify(cfg, ws, model, snaps, solver_cfg):
    """Compute all certification ingredients for the trained model."""
    space = model.space
    c = cfg.certification
    fields = {mu: snap.u + model.lift.coeffs for mu, snap in snaps.items()}
    mu_bar, weight = cert.reference_parameter(
        space, fields, cfg.problem.smagorinsky_constant
    )
    vel_gram = asm.assemble_energy_gram(space, weight)
    gram_saddle = cert.saddle_gram(model, vel_gram)
    state = {"initial": None}

    def beta_solver(mu):
        snap = truth.cached_solve(
            model, mu, solver_cfg,
            cache_dir=ws.snapshot_dir, initial=state["initial"],
        )
        state["initial"] = snap.u
        jac = cert.saddle_jacobian(model, mu, snap.u)
        return cert.compute_beta(jac, gram_saddle)

    surrogate, checks = cert.fit_beta_surrogate(
        beta_solver,
        cfg.parameters.mu_min,
        cfg.parameters.mu_max,
        n_init=c.beta_init,
        budget=c.beta_budget,
        rel_tol=c.beta_tol,
    )
    ref_snap = snaps.get(mu_bar)
    if ref_snap is None:
        ref_snap = truth.cached_solve(
            model, mu_bar, solver_cfg, cache_dir=ws.snapshot_dir
        )
    gamma = cert.estimate_continuity(
        cert.saddle_jacobian(model, mu_bar, ref_snap.u), gram_saddle,
        seed=cfg.run.seed,
    )
    sob = cert.compute_sobolev_constant(
        space, vel_gram, model.free_velocity,
        seed=cfg.run.seed, probes=c.sobolev_probes,
    )
    c_inv = cert.compute_inverse_constant(
        space, n_samples=c.inverse_samples, seed=cfg.run.seed
    )
    rho = cert.compute_rho(
        sob.constant,
        cfg.problem.smagorinsky_constant,
        float(space.h.max()),
        c_inv,
        cs_squared=c.cs_squared,
    )
    equivalence = cert.equivalence_extremes(
        vel_gram, asm.assemble_diffusion(space), model.free_velocity,
        seed=cfg.run.seed,
    )
    log.info(
        "certification: mu_bar=%g C_T=%.4g C_inv=%.4g rho=%.4g gamma=%.4g "
        "beta in [%.4g, %.4g] (%d surrogate checks)",
        mu_bar, sob.constant, c_inv, rho, gamma,
        min(surrogate.values), max(surrogate.values), len(checks),
    )
    return cert.CertificationState(
        mu_bar=mu_bar,
        energy_weight=weight,
        c_t=sob.constant,
        c_inv=c_inv,
        rho=rho,
        cs_squared=c.cs_squared,
        gamma=gamma,
        surrogate=surrogate,
        equivalence=equivalence,
        sobolev_converged=sob.converged,
    )


def _reduce(cfg, ws, model, snaps, basis, cstate, energy, state_gram,
            solver_cfg):
    """POD seed (when configured) followed by the certified greedy loop."""
    space = model.space
    warm = None
    if cfg.rb.pod_modes > 0:
        n_modes = min(cfg.rb.pod_modes, len(snaps))
        if n_modes < cfg.rb.pod_modes:
            log.info(
                "pod seed clamped to %d modes (snapshot count)", n_modes
            )
        pairs = [(snap.u, snap.p) for _, snap in sorted(snaps.items())]
        warm = offline.pod_warm_start(
            pairs, energy, asm.assemble_pressure_mass(space),
            model.divergence, n_modes,
        )
        log.info(
            "pod seed: %d velocity + %d pressure vectors",
            warm.n_velocity_basis, warm.n_pressure_basis,
        )
    state = {"initial": None}

    def snapshot_solver(mu, initial):
        snap = truth.cached_solve(
            model, mu, solver_cfg,
            cache_dir=ws.snapshot_dir,
            initial=initial if initial is not None else state["initial"],
        )
        state["initial"] = snap.u
        return snap

    return offline.greedy(
        model,
        cstate,
        basis,
        cfgmod.train_grid(cfg),
        offline.GreedyConfig(eps_rb=cfg.rb.tol, n_max=cfg.rb.max_stages),
        solver_cfg,
        online_settings(cfg),
        energy,
        state_gram,
        warm_start=warm,
        snapshot_solver=snapshot_solver,
    )


# ---------------------------------------------------------------------------
# loading a finished artifact directory


@dataclasses.dataclass
class Artifacts:
    """Everything a query or validation run needs, loaded from disk."""

    cfg: object
    workspace: Workspace
    rb: offline.RBSpace
    ops: online.ReducedOperators
    cstate: cert.CertificationState
    summary: dict


def load_artifacts(root, need_dimensions=None):
    """Load the reduced model from an artifact directory.

    ``need_dimensions`` optionally passes ``(n_velocity, n_pressure)``
    to cross-check the basis arrays against a rebuilt space.
    """
    ws = Workspace(root)
    for path, hint in (
        (ws.config_path, "run the offline command first"),
        (ws.basis_path, "offline run incomplete: reduction stage missing"),
        (ws.operators_path, "offline run incomplete: operator stage missing"),
        (ws.certification_path, "offline run incomplete: certification missing"),
    ):
        if not os.path.exists(path):
            raise InvalidInputError(f"{path} not found ({hint})")
    cfg = cfgmod.load_config(ws.config_path)
    expected = need_dimensions or (None, None)
    rb = offline.load_rb_space(ws.basis_path, *expected)
    ops = online.load_operators(ws.operators_path)
    cstate = cert.load_certification(ws.certification_path)
    summary = {}
    if os.path.exists(ws.summary_path):
        with open(ws.summary_path) as fh:
            summary = json.load(fh)
    return Artifacts(
        cfg=cfg, workspace=ws, rb=rb, ops=ops, cstate=cstate, summary=summary
    )


ONLINE_COLUMNS = (
    "mu", "t_online_s", "iterations", "increment",
    "u_norm_T", "p_norm_L2", "out_of_range",
)


def run_online(root, mus, out_prefix=None, dump=False):
    """Answer parameter queries from a finished artifact directory.

    Writes ``<prefix>.csv`` / ``<prefix>.json`` (default
    ``online_report`` inside the artifact directory).  Queries outside
    the configured parameter interval are answered but flagged.  With
    ``dump``, full velocity/pressure fields are reconstructed and stored
    per query; this is the only code path that touches full-order
    arrays, and only through the stored basis.
    """
    art = load_artifacts(root)
    cfg = art.cfg
    ocfg = online_settings(cfg)
    lo, hi = cfg.parameters.mu_min, cfg.parameters.mu_max
    rows = []
    dump_paths = []
    lift_model = None
    total = 0.0
    for mu in mus:
        mu = float(mu)
        out_of_range = not lo <= mu <= hi
        if out_of_range:
            log.warning(
                "query mu=%g outside configured range [%g, %g]", mu, lo, hi
            )
        red = online.solve_reduced(art.ops, mu, ocfg)
        total += red.wall_time
        u_norm = float(np.linalg.norm(red.u))
        p_norm = float(np.linalg.norm(red.p))
        rows.append(
            {
                "mu": mu,
                "t_online_s": red.wall_time,
                "iterations": red.iterations,
                "increment": red.final_relative_increment,
                "u_norm_T": u_norm,
                "p_norm_L2": p_norm,
                "out_of_range": out_of_range,
            }
        )
        if dump:
            if lift_model is None:
                lift_model = build_model(
                    cfg, mesh=meshing.read_mesh(art.workspace.mesh_path)
                )
            u_full, p_full = online.reconstruct(art.rb, red)
            path = os.path.join(
                art.workspace.root, f"fields_mu{mu!r}.npz"
            )
            np.savez(
                path,
                mu=np.array([mu]),
                velocity=u_full + lift_model.lift.coeffs,
                pressure=p_full,
            )
            dump_paths.append(path)
    prefix = out_prefix or os.path.join(art.workspace.root, "online_report")
    _write_rows(rows, ONLINE_COLUMNS, prefix + ".csv")
    meta = {
        "artifact_dir": root,
        "total_online_s": total,
        "truth_reference_s": art.summary.get("truth_seconds_per_solve"),
        "dumped_fields": dump_paths,
    }
    online.write_benchmark_json(rows, prefix + ".json", meta=meta)
    return rows


VALIDATE_COLUMNS = (
    "mu", "err_u_T", "err_p_L2", "err_X", "residual_dual",
    "tau", "delta", "certified", "effectivity",
)


def run_validate(root, mus=None, out_prefix=None):
    """Measure true errors against the certified bounds on a grid.

    Runs a truth solve per verification point (cached), evaluates the
    reduced solution, the residual dual norm, the proximity indicator
    and the bound, and summarizes effectivities.  Bound violations
    raise; per-row solver failures are recorded and skipped.
    """
    art = load_artifacts(root)
    cfg = art.cfg
    ws = art.workspace
    model = build_model(cfg, mesh=meshing.read_mesh(ws.mesh_path))
    space = model.space
    if art.rb.velocity.shape[0] != space.n_velocity:
        raise InvalidInputError(
            f"{ws.basis_path}: basis does not match mesh "
            f"({art.rb.velocity.shape[0]} vs {space.n_velocity} dofs)"
        )
    vel_gram = asm.assemble_energy_gram(space, art.cstate.energy_weight)
    state_gram = asm.StateGram(
        space, vel_gram, model.free_velocity, model.free_pressure
    )
    solver_cfg = truth_settings(cfg)
    ocfg = online_settings(cfg)
    grid = [float(m) for m in (mus if mus is not None else cfgmod.validation_grid(cfg))]
    rows = []
    report_rows = []
    initial = None
    for mu in grid:
        row = {"mu": mu}
        try:
            snap = truth.cached_solve(
                model, mu, solver_cfg, cache_dir=ws.snapshot_dir,
                initial=initial,
            )
            initial = snap.u
            red = online.solve_reduced(art.ops, mu, ocfg)
            u_n, p_n = online.reconstruct(art.rb, red)
            err_u = state_gram.velocity_norm(snap.u - u_n)
            err_p = state_gram.pressure_norm(snap.p - p_n)
            err_x = float(np.hypot(err_u, err_p))
            r_u, r_p = model.steady_residual(mu, u_n, p_n)
            eps = state_gram.dual_norm(r_u, r_p)
            est = cert.error_bound(
                eps, art.cstate.stability(mu), art.cstate.rho
            )
            row.update(
                err_u_T=err_u / max(state_gram.velocity_norm(snap.u), 1e-300),
                err_p_L2=err_p / max(state_gram.pressure_norm(snap.p), 1e-300),
                err_X=err_x,
                residual_dual=eps,
                tau=est.proximity,
                delta=est.bound,
                certified=est.certified,
                effectivity=(
                    est.bound / err_x if est.certified and err_x > 0.0 else None
                ),
            )
            report_rows.append((mu, err_x, est))
        except SmagrbError as exc:
            log.warning("validation row mu=%g failed: %s", mu, exc)
            row["error"] = str(exc)
        rows.append(row)
    summary = cert.effectivity_report(report_rows)
    prefix = out_prefix or os.path.join(ws.root, "validate")
    _write_rows(rows, VALIDATE_COLUMNS, prefix + ".csv")
    payload = {
        "certified_fraction": summary["certified_fraction"],
        "max_effectivity": summary["max_effectivity"],
        "median_effectivity": summary["median_effectivity"],
        "rows": rows,
    }
    with open(prefix + ".json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return payload


def _write_rows(rows, columns, path):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row.get(col)) for col in columns])


def _cell(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def run_benchmark(root, mus, out_prefix=None):
    """Truth-versus-reduced timing and error comparison at given parameters."""
    art = load_artifacts(root)
    cfg = art.cfg
    ws = art.workspace
    model = build_model(cfg, mesh=meshing.read_mesh(ws.mesh_path))
    vel_gram = asm.assemble_energy_gram(model.space, art.cstate.energy_weight)
    state_gram = asm.StateGram(
        model.space, vel_gram, model.free_velocity, model.free_pressure
    )
    rows = online.benchmark(
        model, art.rb, art.ops, [float(m) for m in mus],
        truth_settings(cfg), online_settings(cfg), state_gram,
    )
    prefix = out_prefix or os.path.join(ws.root, "benchmark")
    online.write_benchmark_csv(rows, prefix + ".csv")
    online.write_benchmark_json(
        rows, prefix + ".json", meta={"artifact_dir": root}
    )
    return rows
