"""Shared fixtures: small trained reduced models reused across test files.

The ``trained_stack`` fixture runs the whole construction once per
session on a coarse cavity so online/offline tests don't each pay for
truth sweeps.
"""

import dataclasses

import numpy as np
import pytest

from smagrb import assembly as asm
from smagrb import certification as cert
from smagrb import eim, offline, online, truth


@dataclasses.dataclass
class Stack:
    """One fully trained reduced model plus its building blocks."""

    model: object
    space: object
    cfg: truth.SolverConfig
    online_cfg: online.OnlineConfig
    snapshots: dict
    train: list
    basis: object
    vel_gram: object
    state_gram: object
    energy: object
    cstate: object
    rb: object
    ops: object


def build_stack(resolution, mu_lo, mu_hi, n_train, eim_tol=1e-10,
                eps_rb=1e-4, dt=5.0, c_s=0.1, pod_modes=0, n_max=10):
    model = truth.build_benchmark_model("cavity", resolution, c_s)
    space = model.space
    cfg = truth.SolverConfig(dt=dt, eps_fe=1e-10, max_steps=20000)
    train = [float(m) for m in np.linspace(mu_lo, mu_hi, n_train)]
    snaps = truth.solve_sweep(model, train, cfg)
    fields = {mu: snaps[mu].u + model.lift.coeffs for mu in train}
    samples = np.array([eim.gradient_snapshot(space, w) for w in fields.values()])
    basis = eim.train_eim(samples, tol=eim_tol, m_max=40, sample_ids=train)
    mu_bar, weight = cert.reference_parameter(space, fields, c_s)
    vel_gram = asm.assemble_energy_gram(space, weight)
    state_gram = asm.StateGram(
        space, vel_gram, model.free_velocity, model.free_pressure
    )
    energy = offline.TEnergy(space, vel_gram, model.free_velocity)
    gram_saddle = cert.saddle_gram(model, vel_gram)
    warm = {"u": None}

    def beta_solver(mu):
        snap = snaps.get(mu)
        if snap is None:
            snap = model.solve(mu, cfg, initial=warm["u"])
        warm["u"] = snap.u
        return cert.compute_beta(
            cert.saddle_jacobian(model, mu, snap.u), gram_saddle
        )

    surrogate, _ = cert.fit_beta_surrogate(
        beta_solver, mu_lo, mu_hi, n_init=5, budget=8
    )
    gamma = cert.estimate_continuity(
        cert.saddle_jacobian(model, mu_bar, snaps[mu_bar].u), gram_saddle
    )
    sob = cert.compute_sobolev_constant(space, vel_gram, model.free_velocity)
    c_inv = cert.compute_inverse_constant(space)
    rho = cert.compute_rho(sob.constant, c_s, float(space.h.max()), c_inv)
    cstate = cert.CertificationState(
        mu_bar=mu_bar,
        energy_weight=weight,
        c_t=sob.constant,
        c_inv=c_inv,
        rho=rho,
        cs_squared=True,
        gamma=gamma,
        surrogate=surrogate,
        equivalence=cert.equivalence_extremes(
            vel_gram, asm.assemble_diffusion(space), model.free_velocity
        ),
        sobolev_converged=sob.converged,
    )
    warm_start = None
    if pod_modes > 0:
        pairs = [(snaps[mu].u, snaps[mu].p) for mu in train]
        warm_start = offline.pod_warm_start(
            pairs, energy, asm.assemble_pressure_mass(space),
            model.divergence, pod_modes,
        )
    online_cfg = online.OnlineConfig(dt=dt, eps=1e-10)

    def snapshot_solver(mu, initial):
        if mu in snaps:
            return snaps[mu]
        snap = model.solve(mu, cfg, initial=initial)
        snaps[mu] = snap
        return snap

    rb, ops = offline.greedy(
        model, cstate, basis, train,
        offline.GreedyConfig(eps_rb=eps_rb, n_max=n_max),
        cfg, online_cfg, energy, state_gram,
        warm_start=warm_start, snapshot_solver=snapshot_solver,
    )
    return Stack(
        model=model, space=space, cfg=cfg, online_cfg=online_cfg,
        snapshots=snaps, train=train, basis=basis, vel_gram=vel_gram,
        state_gram=state_gram, energy=energy, cstate=cstate, rb=rb, ops=ops,
    )


@pytest.fixture(scope="session")
def trained_stack():
    """Trained reduced model on an 8x8 cavity, 10 training parameters."""
    return build_stack(8, 1000.0, 3000.0, 10)


@pytest.fixture(scope="session")
def tiny_stack():
    """Smallest useful trained model (4x4 cavity, 5 parameters)."""
    return build_stack(4, 1000.0, 2000.0, 5, eim_tol=1e-8, n_max=6)
