"""Stability constants, the a posteriori bound, and the certification archive."""

import numpy as np
import pytest
import scipy.linalg as sla
import scipy.sparse as sp

from smagrb import assembly, certification as cert, meshing, spaces, truth
from smagrb.exceptions import (
    ArchiveFormatError,
    BoundViolationError,
    NonpositiveBetaError,
)


def random_saddle(n, seed):
    """A well-conditioned sparse test matrix and an SPD gram of size n."""
    rng = np.random.default_rng(seed)
    jac = rng.standard_normal((n, n)) + 3.0 * np.eye(n)
    g = rng.standard_normal((n, n))
    gram = g @ g.T + n * np.eye(n)
    return sp.csc_matrix(jac), sp.csc_matrix(gram)


def whitened_singular_values(jac, gram):
    gd = gram.toarray()
    evals, evecs = np.linalg.eigh(gd)
    inv_sqrt = (evecs * (1.0 / np.sqrt(evals))) @ evecs.T
    return sla.svdvals(inv_sqrt @ jac.toarray() @ inv_sqrt)


class TestInfSup:
    def test_diagonal_oracle(self):
        d = np.array([4.0, -2.5, 1.25, 7.0, 3.0])
        jac = sp.diags(d).tocsc()
        gram = sp.identity(5, format="csc")
        assert cert.compute_beta(jac, gram, method="dense") == pytest.approx(
            1.25, abs=1e-14
        )

    def test_sparse_matches_dense(self):
        jac, gram = random_saddle(30, seed=4)
        dense = cert.compute_beta(jac, gram, method="dense")
        sparse = cert.compute_beta(jac, gram, method="sparse")
        assert abs(sparse - dense) <= 1e-10 * dense

    def test_auto_dispatches_on_size(self):
        jac, gram = random_saddle(20, seed=5)
        auto = cert.compute_beta(jac, gram, method="auto", dense_limit=1200)
        forced = cert.compute_beta(jac, gram, method="auto", dense_limit=5)
        assert abs(auto - forced) <= 1e-9 * auto

    def test_unknown_method_rejected(self):
        jac, gram = random_saddle(8, seed=6)
        with pytest.raises(ValueError, match="method"):
            cert.compute_beta(jac, gram, method="qr")

    def test_continuity_matches_oracle(self):
        jac, gram = random_saddle(25, seed=7)
        gamma = cert.estimate_continuity(jac, gram, tol=1e-10)
        oracle = whitened_singular_values(jac, gram).max()
        assert gamma == pytest.approx(oracle, rel=1e-7)

    def test_model_saddle_jacobian_sparse_equals_dense(self):
        # the unit-level version of the solver's stability computation:
        # both eigenvalue paths must agree on a small saddle system
        model = truth.build_benchmark_model("cavity", 2, c_s=0.1)
        snap = model.solve(1000.0, truth.SolverConfig(dt=5.0, eps_fe=1e-10))
        jac = cert.saddle_jacobian(model, 1000.0, snap.u)
        gram = cert.saddle_gram(model, assembly.assemble_diffusion(model.space))
        dense = cert.compute_beta(jac, gram, method="dense")
        sparse = cert.compute_beta(jac, gram, method="sparse")
        assert dense > 0.0
        assert abs(sparse - dense) <= 1e-10 * dense


class TestEquivalence:
    def test_scaled_gram_gives_flat_pencil(self):
        space = spaces.build_taylor_hood(meshing.generate_cavity_mesh(3))
        a0 = assembly.assemble_diffusion(space)
        weight = 2.0 + 0.0 * space.detw
        t_mat = assembly.assemble_energy_gram(space, weight)
        hi, lo = cert.equivalence_extremes(t_mat, a0, space.free_velocity)
        assert hi == pytest.approx(np.sqrt(2.0), rel=1e-6)
        assert lo == pytest.approx(np.sqrt(2.0), rel=1e-6)


@pytest.fixture(scope="module")
def sobolev_result():
    space = spaces.build_taylor_hood(meshing.generate_cavity_mesh(4))
    gram = assembly.assemble_energy_gram(space, 1e-3 + 0.0 * space.detw)
    res = cert.compute_sobolev_constant(
        space, gram, space.free_velocity, seed=0, probes=500
    )
    return space, gram, res


class TestSobolevConstant:
    def test_converged_and_consistent(self, sobolev_result):
        space, gram, res = sobolev_result
        assert res.converged
        v = res.maximizer
        t_norm = np.sqrt(v @ (gram @ v))
        ratio = assembly.velocity_l4_norm(space, v) / t_norm
        assert ratio == pytest.approx(res.constant, rel=1e-8)

    def test_probes_do_not_beat_maximizer(self, sobolev_result):
        _, _, res = sobolev_result
        assert res.probe_violations == 0
        assert res.restarts == 0


class TestInverseConstant:
    def test_safety_factor_scales_linearly(self):
        space = spaces.build_taylor_hood(meshing.generate_cavity_mesh(2))
        raw = cert.compute_inverse_constant(space, n_samples=50, seed=1, safety=1.0)
        padded = cert.compute_inverse_constant(space, n_samples=50, seed=1, safety=1.2)
        assert raw > 0.0
        assert padded == pytest.approx(1.2 * raw, rel=1e-14)


class TestLipschitzConstant:
    def test_formula(self):
        assert cert.compute_rho(1.0, 0.1, 0.1, 1.0) == pytest.approx(
            2.0 + 4.0 * 0.01 * 0.1, abs=1e-15
        )
        assert cert.compute_rho(1.0, 0.1, 0.1, 1.0, cs_squared=False) == pytest.approx(
            2.0 + 4.0 * 0.1 * 0.1, abs=1e-15
        )
        # three space dimensions change the mesh-size exponent to 1/2
        assert cert.compute_rho(0.0, 1.0, 4.0, 1.0, dim=3) == pytest.approx(
            4.0 * 2.0, abs=1e-14
        )

    def test_rejects_negative_inputs(self):
        with pytest.raises(ValueError, match="c_t"):
            cert.compute_rho(-1.0, 0.1, 0.1, 1.0)


class TestErrorBound:
    def test_bound_solves_quadratic(self):
        est = cert.error_bound(1e-4, stability=0.5, lipschitz=10.0)
        assert est.certified
        a = est.bound
        assert 10.0 * a * a - 0.5 * a + 1e-4 == pytest.approx(0.0, abs=1e-15)
        # the certified branch returns the smaller quadratic root
        assert a <= 0.5 / (2.0 * 10.0)

    def test_proximity_definition(self):
        est = cert.error_bound(2e-3, stability=0.4, lipschitz=5.0)
        assert est.proximity == pytest.approx(4.0 * 2e-3 * 5.0 / 0.16, rel=1e-14)

    def test_uncertified_when_residual_large(self):
        est = cert.error_bound(1.0, stability=0.1, lipschitz=10.0)
        assert not est.certified
        assert est.bound is None
        assert est.indicator == est.proximity
        assert est.proximity > 1.0

    def test_bound_increases_with_residual(self):
        bounds = [
            cert.error_bound(r, 0.5, 10.0).bound for r in (1e-6, 1e-5, 1e-4)
        ]
        assert bounds[0] < bounds[1] < bounds[2]

    def test_small_residual_limit(self):
        # for tau << 1 the bound approaches residual / stability
        est = cert.error_bound(1e-10, stability=0.5, lipschitz=10.0)
        assert est.bound == pytest.approx(1e-10 / 0.5, rel=1e-6)

    def test_input_validation(self):
        with pytest.raises(NonpositiveBetaError):
            cert.error_bound(1e-4, stability=0.0, lipschitz=1.0)
        with pytest.raises(ValueError):
            cert.error_bound(-1e-4, stability=1.0, lipschitz=1.0)


class TestEffectivityReport:
    def test_summary_statistics(self):
        rows = [
            (1000.0, 1e-5, cert.error_bound(1e-5, 0.5, 10.0)),
            (2000.0, 2e-6, cert.error_bound(1e-5, 0.5, 10.0)),
            (3000.0, 1.0, cert.error_bound(1.0, 0.1, 10.0)),  # uncertified
        ]
        report = cert.effectivity_report(rows)
        assert report["certified_fraction"] == pytest.approx(2.0 / 3.0)
        effs = [r["effectivity"] for r in report["rows"] if r["certified"]]
        assert report["max_effectivity"] == pytest.approx(max(effs))
        assert report["median_effectivity"] == pytest.approx(float(np.median(effs)))
        assert report["rows"][2]["effectivity"] is None

    def test_violation_names_parameter(self):
        est = cert.error_bound(1e-6, 0.5, 10.0)
        rows = [(1234.0, 10.0 * est.bound, est)]
        with pytest.raises(BoundViolationError, match="mu=1234"):
            cert.effectivity_report(rows)

    def test_slack_tolerates_roundoff(self):
        est = cert.error_bound(1e-6, 0.5, 10.0)
        rows = [(1.0, est.bound * (1.0 + 1e-14), est)]
        report = cert.effectivity_report(rows, slack=1e-12)
        assert report["max_effectivity"] == pytest.approx(1.0, abs=1e-9)


class TestReferenceParameter:
    def test_picks_smallest_viscosity_candidate(self):
        space = spaces.build_taylor_hood(meshing.generate_cavity_mesh(3))
        small = spaces.interpolate_velocity(space, lambda x, y: (0.1 * y, 0.0 * x))
        large = spaces.interpolate_velocity(space, lambda x, y: (5.0 * y, 0.0 * x))
        mu_bar, weight = cert.reference_parameter(
            space, {1000.0: large, 2000.0: small}, c_s=0.1
        )
        assert mu_bar == 2000.0
        expected = 1.0 / 2000.0 + assembly.eddy_viscosity(space, small, 0.1)
        assert np.allclose(weight, expected, atol=1e-15)
        assert weight.min() > 0.0

    def test_empty_candidates_rejected(self):
        space = spaces.build_taylor_hood(meshing.generate_cavity_mesh(2))
        with pytest.raises(ValueError):
            cert.reference_parameter(space, {}, c_s=0.1)


class TestStabilitySurrogate:
    def test_interpolates_samples_exactly(self):
        mus = np.linspace(1000.0, 3000.0, 7)
        vals = 0.3 + 100.0 / mus
        surr = cert.StabilityInterpolant(mus, vals)
        assert surr.kind == "rbf"
        for mu, v in zip(mus, vals):
            assert surr(mu) == pytest.approx(v, rel=1e-9)
        assert isinstance(surr(1500.0), float)

    def test_linear_kind(self):
        surr = cert.StabilityInterpolant([0.0, 1.0], [1.0, 3.0], kind="linear")
        assert surr(0.5) == pytest.approx(2.0, abs=1e-14)

    def test_rejects_degenerate_samples(self):
        with pytest.raises(ValueError):
            cert.StabilityInterpolant([1.0], [2.0])
        with pytest.raises(ValueError):
            cert.StabilityInterpolant([1.0, 1.0], [2.0, 3.0])

    def test_adaptive_fit_tracks_smooth_target(self):
        target = lambda mu: 0.3 + 100.0 / mu
        surrogate, checks = cert.fit_beta_surrogate(
            target, 1000.0, 3000.0, n_init=5, budget=12, rel_tol=1e-8
        )
        assert len(checks) >= 1
        assert surrogate.mus.size <= 12
        probe = np.array([1111.0, 1777.0, 2345.0, 2901.0])
        for mu in probe:
            assert surrogate(mu) == pytest.approx(target(mu), rel=5e-3)

    def test_fit_requires_ordered_interval(self):
        with pytest.raises(ValueError):
            cert.fit_beta_surrogate(lambda mu: 1.0, 2.0, 2.0)


class TestCertificationArchive:
    def _state(self):
        mus = np.linspace(1000.0, 3000.0, 5)
        surr = cert.StabilityInterpolant(mus, 0.3 + 100.0 / mus)
        return cert.CertificationState(
            mu_bar=1000.0,
            energy_weight=np.arange(12.0).reshape(3, 4) + 1.0,
            c_t=7.2,
            c_inv=1.77,
            rho=14.4,
            cs_squared=True,
            gamma=43.4,
            surrogate=surr,
            equivalence=(2.5, 0.5),
        )

    def test_round_trip_replays_stability(self, tmp_path):
        state = self._state()
        path = tmp_path / "certification.json"
        cert.save_certification(state, path)
        back = cert.load_certification(path)
        assert back.mu_bar == state.mu_bar
        assert back.c_t == state.c_t
        assert back.rho == state.rho
        assert back.equivalence == state.equivalence
        assert np.array_equal(back.energy_weight, state.energy_weight)
        for mu in (1000.0, 1234.5, 2999.0):
            assert back.stability(mu) == pytest.approx(
                state.stability(mu), rel=1e-12
            )

    def test_rejects_unknown_version(self, tmp_path):
        path = tmp_path / "certification.json"
        cert.save_certification(self._state(), path)
        text = path.read_text().replace('"version": 1', '"version": 9')
        path.write_text(text)
        with pytest.raises(ArchiveFormatError, match="version"):
            cert.load_certification(path)

    def test_rejects_invalid_json(self, tmp_path):
        path = tmp_path / "certification.json"
        path.write_text("{not json")
        with pytest.raises(ArchiveFormatError, match="unreadable"):
            cert.load_certification(path)
