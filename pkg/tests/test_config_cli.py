"""Configuration parsing/validation and the command-line driver."""

import subprocess
import sys

import numpy as np
import pytest

from smagrb import cli, config as cfgmod
from smagrb.exceptions import ConfigError

BASE_SECTIONS = {
    "problem": {"benchmark": "cavity", "resolution": "4"},
    "parameters": {
        "mu_min": "1000",
        "mu_max": "2000",
        "train_points": "4",
        "validate_points": "3",
    },
    "truth": {"dt": "5.0"},
    "eim": {"tol": "1e-6", "max_modes": "10"},
    "rb": {"tol": "1e-3", "max_stages": "6"},
    "certification": {
        "beta_init": "2",
        "beta_budget": "3",
        "sobolev_probes": "50",
        "inverse_samples": "20",
    },
    "run": {"seed": "0"},
}


def write_config(path, out_dir, updates=None):
    sections = {name: dict(values) for name, values in BASE_SECTIONS.items()}
    sections["run"]["output"] = str(out_dir)
    for section, values in (updates or {}).items():
        sections.setdefault(section, {}).update(values)
    lines = []
    for section, values in sections.items():
        lines.append(f"[{section}]")
        lines.extend(f"{key} = {value}" for key, value in values.items())
        lines.append("")
    path.write_text("\n".join(lines))
    return path


class TestConfigParsing:
    def test_defaults_are_valid(self):
        cfgmod.validate_config(cfgmod.default_config())

    def test_load_applies_overrides(self, tmp_path):
        path = write_config(tmp_path / "run.ini", tmp_path / "out")
        cfg = cfgmod.load_config(path)
        assert cfg.problem.resolution == 4
        assert cfg.parameters.train_points == 4
        assert cfg.truth.dt == 5.0
        assert cfg.rb.tol == 1e-3
        # untouched keys keep their defaults
        assert cfg.eim.max_modes == 10
        assert cfg.truth.max_steps == 20000

    def test_inline_comments_stripped(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text("[truth]\ndt = 2.5  # pseudo-time step\n")
        assert cfgmod.load_config(path).truth.dt == 2.5

    def test_boolean_spellings(self, tmp_path):
        for raw, expected in (("yes", True), ("off", False), ("1", True)):
            path = tmp_path / "run.ini"
            path.write_text(f"[certification]\ncs_squared = {raw}\n")
            assert cfgmod.load_config(path).certification.cs_squared is expected

    def test_unknown_section_rejected(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text("[solver]\ndt = 1\n")
        with pytest.raises(ConfigError, match="unknown section"):
            cfgmod.load_config(path)

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text("[truth]\ntimestep = 1\n")
        with pytest.raises(ConfigError, match="unknown key"):
            cfgmod.load_config(path)

    def test_bad_type_reports_location(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text("[truth]\ndt = fast\n")
        with pytest.raises(ConfigError, match=r"\[truth\] dt"):
            cfgmod.load_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            cfgmod.load_config(tmp_path / "nope.ini")

    def test_save_load_round_trip(self, tmp_path):
        original = cfgmod.load_config(
            write_config(tmp_path / "run.ini", tmp_path / "out")
        )
        saved = tmp_path / "saved.ini"
        cfgmod.save_config(original, saved)
        back = cfgmod.load_config(saved)
        assert back == original


class TestConfigValidation:
    def _check(self, tmp_path, updates, pattern):
        path = write_config(tmp_path / "run.ini", tmp_path / "out", updates)
        with pytest.raises(ConfigError, match=pattern):
            cfgmod.load_config(path)

    def test_parameter_interval(self, tmp_path):
        self._check(
            tmp_path, {"parameters": {"mu_min": "3000"}}, "mu_min < mu_max"
        )

    def test_resolution_floor(self, tmp_path):
        self._check(tmp_path, {"problem": {"resolution": "1"}}, "resolution")

    def test_custom_needs_mesh(self, tmp_path):
        self._check(
            tmp_path, {"problem": {"benchmark": "custom"}}, "mesh_path"
        )

    def test_unknown_benchmark(self, tmp_path):
        self._check(tmp_path, {"problem": {"benchmark": "pipe"}}, "benchmark")

    def test_nonpositive_tolerance(self, tmp_path):
        self._check(tmp_path, {"eim": {"tol": "0"}}, "eim tol")

    def test_beta_budget_ordering(self, tmp_path):
        self._check(
            tmp_path,
            {"certification": {"beta_init": "9", "beta_budget": "4"}},
            "beta_init",
        )


class TestGrids:
    def test_train_grid_endpoints(self, tmp_path):
        cfg = cfgmod.load_config(
            write_config(tmp_path / "run.ini", tmp_path / "out")
        )
        grid = cfgmod.train_grid(cfg)
        assert len(grid) == 4
        assert grid[0] == 1000.0
        assert grid[-1] == 2000.0

    def test_single_point_grid_is_midpoint(self, tmp_path):
        cfg = cfgmod.load_config(
            write_config(
                tmp_path / "run.ini", tmp_path / "out",
                {"parameters": {"train_points": "1"}},
            )
        )
        assert cfgmod.train_grid(cfg) == [1500.0]

    def test_eim_grid_defaults_to_training(self, tmp_path):
        cfg = cfgmod.load_config(
            write_config(tmp_path / "run.ini", tmp_path / "out")
        )
        assert cfgmod.eim_grid(cfg) == cfgmod.train_grid(cfg)
        cfg.parameters.eim_points = 7
        assert len(cfgmod.eim_grid(cfg)) == 7

    def test_validation_grid_avoids_training_points(self, tmp_path):
        cfg = cfgmod.load_config(
            write_config(tmp_path / "run.ini", tmp_path / "out")
        )
        val = cfgmod.validation_grid(cfg)
        assert len(val) == 3
        assert not set(val) & set(cfgmod.train_grid(cfg))
        assert all(1000.0 < m < 2000.0 for m in val)


@pytest.fixture(scope="module")
def artifacts(tmp_path_factory):
    """One complete offline run shared by the command tests."""
    root = tmp_path_factory.mktemp("cli")
    out = root / "model"
    cfg_path = write_config(root / "run.ini", out)
    code = cli.main(["offline", "--config", str(cfg_path)])
    assert code == cli.EXIT_OK
    return cfg_path, out


class TestOfflineCommand:
    def test_artifacts_written(self, artifacts):
        _, out = artifacts
        for name in (
            "config.ini", "mesh.txt", "eim.npz", "certification.json",
            "rb_basis.npz", "operators.npz", "offline.json",
        ):
            assert (out / name).exists(), name

    def test_resume_skips_and_matches(self, artifacts, capsys):
        cfg_path, out = artifacts
        basis_before = (out / "rb_basis.npz").read_bytes()
        code = cli.main(["offline", "--config", str(cfg_path)])
        assert code == cli.EXIT_OK
        assert (out / "rb_basis.npz").read_bytes() == basis_before
        assert "offline complete" in capsys.readouterr().out

    def test_bad_config_exits_2(self, tmp_path):
        path = tmp_path / "broken.ini"
        path.write_text("[truth]\ndt = -1\n")
        assert cli.main(["offline", "--config", str(path)]) == cli.EXIT_CONFIG

    def test_nonconvergence_exits_3(self, tmp_path):
        cfg_path = write_config(
            tmp_path / "run.ini", tmp_path / "out",
            {"truth": {"max_steps": "1"}},
        )
        assert cli.main(["offline", "--config", str(cfg_path)]) == cli.EXIT_NUMERICAL


class TestOnlineCommand:
    def test_query_inside_range(self, artifacts, capsys):
        _, out = artifacts
        code = cli.main(["online", str(out), "--mu", "1200,1700"])
        assert code == cli.EXIT_OK
        printed = capsys.readouterr().out
        assert "mu=1200" in printed
        assert "outside configured range" not in printed

    def test_out_of_range_flagged(self, artifacts, capsys):
        _, out = artifacts
        assert cli.main(["online", str(out), "--mu", "5000"]) == cli.EXIT_OK
        assert "outside configured range" in capsys.readouterr().out

    def test_bad_mu_exits_2(self, artifacts):
        _, out = artifacts
        assert cli.main(["online", str(out), "--mu", "abc"]) == cli.EXIT_CONFIG

    def test_missing_artifacts_exit_2(self, tmp_path):
        assert (
            cli.main(["online", str(tmp_path / "void"), "--mu", "1500"])
            == cli.EXIT_CONFIG
        )

    def test_dump_writes_fields(self, artifacts, tmp_path):
        _, out = artifacts
        code = cli.main(
            ["online", str(out), "--mu", "1500", "--dump",
             "--out", str(tmp_path / "query")]
        )
        assert code == cli.EXIT_OK
        assert (tmp_path / "query.csv").exists()
        dumps = list(out.glob("fields_mu*.npz"))
        assert len(dumps) == 1
        with np.load(dumps[0]) as data:
            assert "velocity" in data.files
            assert "pressure" in data.files

    def test_benchmark_mode(self, artifacts, capsys):
        _, out = artifacts
        code = cli.main(["online", str(out), "--mu", "1500", "--benchmark"])
        assert code == cli.EXIT_OK
        assert "speedup" in capsys.readouterr().out
        assert (out / "benchmark.csv").exists()


class TestValidateCommand:
    def test_default_grid(self, artifacts, capsys):
        _, out = artifacts
        assert cli.main(["validate", str(out)]) == cli.EXIT_OK
        assert "certified" in capsys.readouterr().out
        assert (out / "validate.csv").exists()
        header = (out / "validate.csv").read_text().splitlines()[0]
        assert header.split(",")[:3] == ["mu", "err_u_T", "err_p_L2"]


class TestMeshCommand:
    def test_generate_and_inspect(self, tmp_path, capsys):
        path = tmp_path / "mesh.txt"
        code = cli.main(
            ["mesh", "generate", "--benchmark", "step",
             "--resolution", "2", "--out", str(path)]
        )
        assert code == cli.EXIT_OK
        assert path.exists()
        assert cli.main(["mesh", "inspect", str(path)]) == cli.EXIT_OK
        printed = capsys.readouterr().out
        assert "triangles" in printed
        assert "area" in printed

    def test_inspect_missing_file_exits_2(self, tmp_path):
        code = cli.main(["mesh", "inspect", str(tmp_path / "no.txt")])
        assert code == cli.EXIT_CONFIG


class TestDeterminism:
    def test_identical_configs_reproduce_reports(self, tmp_path):
        outputs = []
        for tag in ("a", "b"):
            out = tmp_path / tag
            cfg_path = write_config(tmp_path / f"{tag}.ini", out)
            assert cli.main(["offline", "--config", str(cfg_path)]) == cli.EXIT_OK
            assert cli.main(["validate", str(out)]) == cli.EXIT_OK
            assert cli.main(["online", str(out), "--mu", "1300"]) == cli.EXIT_OK
            outputs.append(out)
        a, b = outputs
        with np.load(a / "rb_basis.npz") as da, np.load(b / "rb_basis.npz") as db:
            assert set(da.files) == set(db.files)
            for name in da.files:
                assert np.array_equal(da[name], db[name]), name
        # the validation report carries no timings and must match bytewise
        assert (a / "validate.csv").read_bytes() == (b / "validate.csv").read_bytes()
        # the online report matches except for the wall-clock column
        rows_a = (a / "online_report.csv").read_text().splitlines()
        rows_b = (b / "online_report.csv").read_text().splitlines()
        assert len(rows_a) == len(rows_b)
        for ra, rb_row in zip(rows_a, rows_b):
            ca, cb = ra.split(","), rb_row.split(",")
            del ca[1], cb[1]
            assert ca == cb


def test_console_entry_point_runs():
    out = subprocess.run(
        [sys.executable, "-m", "smagrb.cli", "--help"],
        capture_output=True, text=True,
    )
    assert out.returncode == 0
    assert "offline" in out.stdout
