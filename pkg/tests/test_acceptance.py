"""End-to-end acceptance checks for the certified reduced solver.

Each test covers one shipped guarantee and prints a single summary line
(``[n] PASS/FAIL <name>: <details>``), so running this file with ``-s``
reads as a checklist.  The heavyweight campaign artifacts (criteria 4-6)
are built through the same pipeline entry points the command-line driver
uses; nothing here touches private state.
"""

import os
import time
import types

import numpy as np
import pytest

from smagrb import assembly as asm
from smagrb import certification as cert
from smagrb import config as cfgmod
from smagrb import eim, offline, online, pipeline, truth

RNG_SEED = 20260823


def _report(num, name, ok, detail):
    status = {True: "PASS", False: "FAIL", None: "SKIP"}[ok]
    print(f"\n[{num}] {status} {name}: {detail}")


def _solver_settings():
    return truth.SolverConfig(dt=100.0, eps_fe=1e-10, max_steps=400)


def _empty_rb(space):
    return offline.RBSpace(
        velocity=np.empty((space.n_velocity, 0)),
        pressure=np.empty((space.n_pressure, 0)),
        parameters=[],
        history=[],
    )


# ---------------------------------------------------------------------------
# 1. tensorized reduced residual == projected full-order residual


def test_1_affine_consistency():
    t0 = time.perf_counter()
    model = truth.build_benchmark_model("cavity", 8, 0.1)
    space = model.space
    lift = model.lift.coeffs
    scfg = _solver_settings()
    snaps = truth.solve_sweep(model, np.linspace(1000.0, 3000.0, 5), scfg)
    fields = np.array(
        [eim.gradient_snapshot(space, s.u + lift) for _, s in sorted(snaps.items())]
    )
    basis = eim.train_eim(fields, 1e-30, 5)
    assert basis.size == 5

    weight = 1e-3 + 0.0 * space.detw
    energy = offline.TEnergy(
        space, asm.assemble_energy_gram(space, weight), model.free_velocity
    )
    p_mass = asm.assemble_pressure_mass(space)
    rb = _empty_rb(space)
    for mu in (1000.0, 2000.0, 3000.0):
        offline._append_stage(rb, energy, p_mass, model.divergence, snaps[mu])
    assert len(rb.parameters) == 3
    ops = online.project_operators(space, rb, basis, lift, model.c_s, model.f_vec)
    f_vec = np.zeros(space.n_velocity) if model.f_vec is None else model.f_vec

    a0 = asm.assemble_diffusion(space)
    b_mat = asm.assemble_divergence(space)
    scale = (model.c_s * space.h[:, None]) ** 2
    n_qp = space.detw.shape[1]
    rng = np.random.default_rng(RNG_SEED)
    worst = 0.0
    for _ in range(20):
        a = rng.standard_normal(rb.n_velocity_basis)
        b = rng.standard_normal(rb.n_pressure_basis)
        mu = rng.uniform(1000.0, 3000.0)
        r_u, r_p = online.reduced_residual(ops, mu, a, b)

        u_full = rb.velocity @ a
        p_full = rb.pressure @ b
        w = u_full + lift
        g = eim.gradient_snapshot(space, w)
        sigma = eim.coefficients(basis, g[basis.magic])
        nu_hat = scale * eim.interpolate(basis, sigma).reshape(
            space.n_elements, n_qp
        )
        r_u_full = (a0 @ w) / mu
        r_u_full += asm.assemble_convection(space, w) @ w
        r_u_full += asm.assemble_weighted_vector_stiffness(space, nu_hat) @ w
        r_u_full += b_mat.T @ p_full - f_vec
        direct_u = rb.velocity.T @ r_u_full
        direct_p = rb.pressure.T @ (b_mat @ u_full)

        dev = np.hypot(
            np.linalg.norm(r_u - direct_u), np.linalg.norm(r_p - direct_p)
        )
        ref = np.hypot(np.linalg.norm(direct_u), np.linalg.norm(direct_p))
        worst = max(worst, dev / ref)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-11 and elapsed < 10.0
    _report(
        1, "affine consistency", ok,
        f"max rel deviation {worst:.3e} over 20 random states "
        f"(limit 1e-11), {elapsed:.1f}s (limit 10s)",
    )
    assert ok


# ---------------------------------------------------------------------------
# 2. assembled Jacobian == central finite differences


def test_2_jacobian_vs_finite_differences():
    t0 = time.perf_counter()
    model = truth.build_benchmark_model("cavity", 4, 0.1)
    space = model.space
    delta = 1e-6
    rng = np.random.default_rng(RNG_SEED + 1)
    p0 = np.zeros(space.n_pressure)
    worst = 0.0
    for _ in range(10):
        u = rng.standard_normal(space.n_velocity)
        v = rng.standard_normal(space.n_velocity)
        v /= np.linalg.norm(v)
        ctx = model.context(rng.uniform(1000.0, 3000.0))
        jac = asm.assemble_jacobian(space, ctx, u)
        r_plus, _ = asm.apply_operator(space, ctx, u + delta * v, p0)
        r_minus, _ = asm.apply_operator(space, ctx, u - delta * v, p0)
        fd = (r_plus - r_minus) / (2.0 * delta)
        rel = np.linalg.norm(jac @ v - fd) / np.linalg.norm(fd)
        worst = max(worst, rel)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and elapsed < 10.0
    _report(
        2, "jacobian vs central differences", ok,
        f"max rel error {worst:.3e} over 10 random states "
        f"(delta 1e-6, limit 1e-6), {elapsed:.1f}s (limit 10s)",
    )
    assert ok


# ---------------------------------------------------------------------------
# 3. interpolation-basis structure on a physical snapshot family


def test_3_interpolation_properties():
    t0 = time.perf_counter()
    model = truth.build_benchmark_model("cavity", 8, 0.1)
    space = model.space
    lift = model.lift.coeffs
    snaps = truth.solve_sweep(
        model, np.linspace(1000.0, 3000.0, 12), _solver_settings()
    )
    fields = np.array(
        [eim.gradient_snapshot(space, s.u + lift) for _, s in sorted(snaps.items())]
    )
    basis = eim.train_eim(fields, 1e-10, 12)

    lower_ok = (
        np.allclose(np.diag(basis.interp), 1.0)
        and np.allclose(np.triu(basis.interp, 1), 0.0)
        and np.abs(basis.interp).max() <= 1.0 + 1e-14
    )
    magic_worst = 0.0
    for field in fields:
        sigma = eim.coefficients(basis, field[basis.magic])
        approx = eim.interpolate(basis, sigma)
        magic_worst = max(
            magic_worst,
            np.abs(approx[basis.magic] - field[basis.magic]).max()
            / np.abs(field).max(),
        )
    monotone = bool(np.all(np.diff(basis.history) <= 0.0))

    rng = np.random.default_rng(RNG_SEED + 2)
    rank_one = np.outer(rng.uniform(1.0, 2.0, size=6), fields[0])
    single = eim.train_eim(rank_one, 1e-8, 6)

    elapsed = time.perf_counter() - t0
    ok = (
        lower_ok and magic_worst <= 1e-13 and monotone
        and single.size == 1 and elapsed < 5.0
    )
    _report(
        3, "interpolation properties", ok,
        f"unit-lower={lower_ok}, magic-point error {magic_worst:.2e} "
        f"(limit 1e-13), non-increasing={monotone} over {basis.size} modes, "
        f"rank-one M={single.size}, {elapsed:.1f}s (limit 5s)",
    )
    assert ok


# ---------------------------------------------------------------------------
# 4+5. certified campaign: bound validity, effectivity, reproduction


@pytest.fixture(scope="module")
def campaign(tmp_path_factory):
    """One complete offline/validate campaign shared by criteria 4 and 5."""
    out = types.SimpleNamespace(error=None)
    t0 = time.perf_counter()
    try:
        cfg = cfgmod.default_config()
        cfg.problem.benchmark = "cavity"
        cfg.problem.resolution = 16
        cfg.parameters.mu_min = 1000.0
        cfg.parameters.mu_max = 3000.0
        cfg.parameters.train_points = 30
        cfg.parameters.validate_points = 30
        cfg.truth.dt = 100.0
        cfg.truth.eps = 1e-10
        cfg.truth.max_steps = 400
        cfg.eim.tol = 1e-8
        cfg.eim.max_modes = 40
        cfg.rb.tol = 1e-4
        cfg.rb.max_stages = 25
        cfg.rb.pod_modes = 0
        cfg.rb.online_eps = 1e-10
        cfg.certification.beta_init = 5
        cfg.certification.beta_budget = 10
        cfg.certification.beta_tol = 1e-3
        cfg.certification.sobolev_probes = 200
        cfg.certification.inverse_samples = 200
        cfg.run.output = str(tmp_path_factory.mktemp("acceptance") / "campaign")
        cfg.run.seed = 0
        out.cfg = cfg
        out.summary = pipeline.run_offline(cfg)
        out.payload = pipeline.run_validate(cfg.run.output)
    except Exception as exc:  # reported per criterion, not as a setup error
        out.error = exc
    out.elapsed = time.perf_counter() - t0
    return out


def test_4_error_bound_validity(campaign):
    if campaign.error is not None:
        _report(4, "error bound validity", False, f"campaign failed: {campaign.error}")
        raise campaign.error
    rows = campaign.payload["rows"]
    certified = [r for r in rows if r.get("certified")]
    violations = sum(
        1 for r in certified if r["err_X"] > r["delta"] * (1.0 + 1e-12)
    )
    max_eff = campaign.payload["max_effectivity"]
    med_eff = campaign.payload["median_effectivity"]
    stats_known = max_eff is not None and med_eff is not None
    ok = (
        len(rows) == 30
        and not any("error" in r for r in rows)
        and violations == 0
        and len(certified) > 0
        and stats_known
        and max_eff <= 100.0
        and med_eff <= 30.0
        and campaign.elapsed < 7200.0
    )
    eff_text = (
        f"max effectivity {max_eff:.1f} (limit 100), median {med_eff:.1f} "
        f"(limit 30)" if stats_known else "effectivity stats unavailable"
    )
    _report(
        4, "error bound validity", ok,
        f"{len(certified)}/{len(rows)} points certified, 0 bound violations "
        f"required (got {violations}), {eff_text}, "
        f"campaign {campaign.elapsed:.0f}s (limit 7200s)",
    )
    assert ok


def test_5_reproduction_of_selected_parameters(campaign):
    if campaign.error is not None:
        _report(5, "reproduction at selected parameters", False,
                f"campaign failed: {campaign.error}")
        raise campaign.error
    from smagrb import meshing

    cfg = campaign.cfg
    art = pipeline.load_artifacts(cfg.run.output)
    model = pipeline.build_model(
        cfg, mesh=meshing.read_mesh(art.workspace.mesh_path)
    )
    vel_gram = asm.assemble_energy_gram(model.space, art.cstate.energy_weight)
    gram = asm.StateGram(
        model.space, vel_gram, model.free_velocity, model.free_pressure
    )
    scfg = pipeline.truth_settings(cfg)
    ocfg = pipeline.online_settings(cfg)
    worst = 0.0
    for mu in art.rb.parameters:
        snap = truth.cached_solve(
            model, mu, scfg, cache_dir=art.workspace.snapshot_dir
        )
        red = online.solve_reduced(art.ops, mu, ocfg)
        u_n, _ = online.reconstruct(art.rb, red)
        worst = max(
            worst,
            gram.velocity_norm(snap.u - u_n) / gram.velocity_norm(snap.u),
        )
    ok = worst <= 1e-8 and len(art.rb.parameters) > 0
    _report(
        5, "reproduction at selected parameters", ok,
        f"max rel velocity error {worst:.3e} over "
        f"{len(art.rb.parameters)} selected parameters (limit 1e-8)",
    )
    assert ok


# ---------------------------------------------------------------------------
# 6. online speedup against cold truth solves


def _speedup_run(tmp_root, resolution, n_train, floor):
    cfg = cfgmod.default_config()
    cfg.problem.benchmark = "cavity"
    cfg.problem.resolution = resolution
    cfg.parameters.mu_min = 1000.0
    cfg.parameters.mu_max = 2000.0
    cfg.parameters.train_points = n_train
    cfg.truth.dt = 100.0
    cfg.truth.eps = 1e-10
    cfg.truth.max_steps = 400
    cfg.eim.tol = 1e-6
    cfg.eim.max_modes = 25
    cfg.rb.tol = 1e-3
    cfg.rb.max_stages = 8
    cfg.rb.pod_modes = 0
    cfg.certification.beta_init = 2
    cfg.certification.beta_budget = 2
    cfg.certification.sobolev_probes = 20
    cfg.certification.inverse_samples = 50
    cfg.run.output = str(tmp_root / f"speed{resolution}")
    cfg.run.seed = 0
    pipeline.run_offline(cfg)
    mus = np.linspace(1050.0, 1950.0, 5)
    rows = pipeline.run_benchmark(cfg.run.output, mus)
    speedups = [r["speedup"] for r in rows]
    failed = [r["mu"] for r in rows if "error" in r]
    return speedups, failed, min(speedups) >= floor and not failed


def test_6_online_speedup(tmp_path):
    t0 = time.perf_counter()
    sp32, failed32, ok32 = _speedup_run(tmp_path, 32, 6, 20.0)
    sp50, failed50, ok50 = _speedup_run(tmp_path, 50, 3, 200.0)
    elapsed = time.perf_counter() - t0
    ok = ok32 and ok50
    _report(
        6, "online speedup", ok,
        f"n=32 min speedup {min(sp32):.0f}x over 5 parameters (floor 20x), "
        f"n=50 min {min(sp50):.0f}x (floor 200x), "
        f"failures {failed32 + failed50}, {elapsed:.0f}s",
    )
    assert ok


# ---------------------------------------------------------------------------
# 7. full-scale regression (hours-long; opt-in via environment variable)


def test_7_full_scale_regression(tmp_path):
    if not os.environ.get("SMAGRB_PAPER_SCALE"):
        _report(
            7, "full-scale regression", None,
            "set SMAGRB_PAPER_SCALE=1 to run the hours-long campaign "
            "(n=50, range [1000, 5100], interpolation tol 5e-4, "
            "reduction tol 5e-5)",
        )
        pytest.skip("long-running; enable with SMAGRB_PAPER_SCALE=1")
    t0 = time.perf_counter()
    cfg = cfgmod.default_config()
    cfg.problem.benchmark = "cavity"
    cfg.problem.resolution = 50
    cfg.parameters.mu_min = 1000.0
    cfg.parameters.mu_max = 5100.0
    cfg.parameters.train_points = 42
    cfg.truth.dt = 100.0
    # The contraction rate of the pseudo-time iteration degrades near the top
    # of the viscosity range; 1e-9 keeps the steady states ~4 orders tighter
    # than the 1e-5 error level asserted below while converging reliably.
    cfg.truth.eps = 1e-9
    cfg.truth.max_steps = 1200
    cfg.eim.tol = 5e-4
    cfg.eim.max_modes = 40
    cfg.rb.tol = 5e-5
    cfg.rb.max_stages = 25
    cfg.rb.pod_modes = 0
    cfg.rb.online_eps = 1e-10
    cfg.certification.beta_init = 5
    cfg.certification.beta_budget = 12
    cfg.certification.sobolev_probes = 100
    cfg.certification.inverse_samples = 100
    cfg.run.output = str(tmp_path / "full_scale")
    cfg.run.seed = 0
    summary = pipeline.run_offline(cfg)
    m_modes = summary["eim_modes"]
    n_stages = len(summary["selected_parameters"])
    probes = np.linspace(1300.0, 4800.0, 5)
    rows = pipeline.run_benchmark(cfg.run.output, probes)
    errs = [r["err_u_T"] for r in rows]
    elapsed = time.perf_counter() - t0
    ok = (
        15 <= m_modes <= 35
        and 8 <= n_stages <= 20
        and max(errs) <= 1e-5
        and not any("error" in r for r in rows)
    )
    _report(
        7, "full-scale regression", ok,
        f"M={m_modes} (expected 15-35), stages={n_stages} (expected 8-20), "
        f"max velocity error {max(errs):.2e} at 5 probes (limit 1e-5), "
        f"{elapsed:.0f}s",
    )
    assert ok


# ---------------------------------------------------------------------------
# 8. embedding/stability constants: self-consistency and oracle agreement


def test_8_constant_sanity():
    t0 = time.perf_counter()
    model8 = truth.build_benchmark_model("cavity", 8, 0.1)
    space8 = model8.space
    weight = 1e-3 + 0.0 * space8.detw
    gram8 = asm.assemble_energy_gram(space8, weight)
    res = cert.compute_sobolev_constant(
        space8, gram8, model8.free_velocity, seed=RNG_SEED, probes=1000
    )
    v = res.maximizer
    ratio = asm.velocity_l4_norm(space8, v) / np.sqrt(v @ (gram8 @ v))
    self_consistent = abs(ratio - res.constant) <= 1e-8 * res.constant

    model2 = truth.build_benchmark_model("cavity", 2, 0.1)
    snap = model2.solve(1500.0, _solver_settings())
    jac = cert.saddle_jacobian(model2, 1500.0, snap.u)
    weight2 = 1e-3 + 0.0 * model2.space.detw
    gram2 = cert.saddle_gram(
        model2, asm.assemble_energy_gram(model2.space, weight2)
    )
    n_saddle = model2.free_velocity.size + model2.free_pressure.size
    beta_sparse = cert.compute_beta(jac, gram2, method="sparse")
    beta_dense = cert.compute_beta(jac, gram2, method="dense")
    agree = abs(beta_sparse - beta_dense) <= 1e-10 * beta_dense

    elapsed = time.perf_counter() - t0
    ok = (
        res.converged and self_consistent and res.probe_violations == 0
        and n_saddle <= 40 and agree and elapsed < 300.0
    )
    _report(
        8, "constant sanity", ok,
        f"embedding constant {res.constant:.4f} self-consistent to "
        f"{abs(ratio - res.constant) / res.constant:.1e} (limit 1e-8), "
        f"0 violations over 1000 probes required "
        f"(got {res.probe_violations}), saddle dim {n_saddle} (limit 40), "
        f"|beta_sparse - beta_dense| = {abs(beta_sparse - beta_dense):.2e} "
        f"(limit {1e-10 * beta_dense:.2e}), {elapsed:.0f}s (limit 300s)",
    )
    assert ok
