"""Run configuration: sectioned ``key = value`` files with full validation.

Every tunable of the pipeline lives here with its default; unknown
sections or keys are rejected so typos fail loudly instead of silently
running with defaults.
"""

import configparser
import dataclasses
import os

import numpy as np

from .exceptions import ConfigError

BENCHMARKS = ("cavity", "step", "custom")
INFLOWS = ("lid", "parabolic")


@dataclasses.dataclass
class ProblemConfig:
    benchmark: str = "cavity"
    resolution: int = 16
    mesh_path: str = ""
    inflow: str = "lid"
    smagorinsky_constant: float = 0.1
    amplitude: float = 1.0


@dataclasses.dataclass
class ParameterConfig:
    mu_min: float = 1000.0
    mu_max: float = 3000.0
    train_points: int = 100
    eim_points: int = 0          # 0 reuses the training grid
    validate_points: int = 20


@dataclasses.dataclass
class TruthConfig:
    dt: float = 0.01
    eps: float = 1e-10
    max_steps: int = 20000


@dataclasses.dataclass
class EIMConfig:
    tol: float = 1e-4
    max_modes: int = 40


@dataclasses.dataclass
class ReductionConfig:
    tol: float = 1e-4
    max_stages: int = 25
    pod_modes: int = 0           # 0 seeds the greedy from min(mu) instead
    online_dt: float = 0.0       # 0 shares the truth dt
    online_eps: float = 1e-10
    online_max_steps: int = 20000


@dataclasses.dataclass
class CertificationConfig:
    beta_init: int = 10
    beta_budget: int = 20
    beta_tol: float = 1e-2
    cs_squared: bool = True
    sobolev_probes: int = 1000
    inverse_samples: int = 200


@dataclasses.dataclass
class RunSettings:
    output: str = "runs/out"
    seed: int = 0
    jobs: int = 1


@dataclasses.dataclass
class RunConfig:
    problem: ProblemConfig
    parameters: ParameterConfig
    truth: TruthConfig
    eim: EIMConfig
    rb: ReductionConfig
    certification: CertificationConfig
    run: RunSettings

    def online_solver_settings(self):
        """Online (dt, eps, max_steps), falling back to the truth dt."""
        dt = self.rb.online_dt if self.rb.online_dt > 0.0 else self.truth.dt
        return dt, self.rb.online_eps, self.rb.online_max_steps


_SECTIONS = {
    "problem": ProblemConfig,
    "parameters": ParameterConfig,
    "truth": TruthConfig,
    "eim": EIMConfig,
    "rb": ReductionConfig,
    "certification": CertificationConfig,
    "run": RunSettings,
}


def default_config():
    return RunConfig(**{name: cls() for name, cls in _SECTIONS.items()})


def _convert(section, key, raw, target_type, path):
    where = f"{path}: [{section}] {key}"
    raw = raw.strip()
    try:
        if target_type is bool:
            lowered = raw.lower()
            if lowered in ("true", "yes", "on", "1"):
                return True
            if lowered in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(
            f"{where}: cannot parse {raw!r} as {target_type.__name__}"
        )


def load_config(path):
    """Parse and validate a configuration file."""
    parser = configparser.ConfigParser(
        inline_comment_prefixes=("#", ";"), interpolation=None
    )
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc}")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: malformed config: {exc}")
    cfg = default_config()
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(
                f"{path}: unknown section [{section}] "
                f"(expected one of {', '.join(_SECTIONS)})"
            )
        target = getattr(cfg, section)
        fields = {f.name: f.type for f in dataclasses.fields(target)}
        for key, raw in parser.items(section):
            if key not in fields:
                raise ConfigError(
                    f"{path}: unknown key {key!r} in [{section}] "
                    f"(expected one of {', '.join(fields)})"
                )
            current = getattr(target, key)
            setattr(target, key, _convert(section, key, raw, type(current), path))
    validate_config(cfg, path)
    return cfg


def validate_config(cfg, path="<config>"):
    """Check cross-field constraints, raising ``ConfigError`` on violation."""

    def bad(message):
        raise ConfigError(f"{path}: {message}")

    p = cfg.problem
    if p.benchmark not in BENCHMARKS:
        bad(f"benchmark must be one of {BENCHMARKS}, got {p.benchmark!r}")
    if p.benchmark == "custom":
        if not p.mesh_path:
            bad("benchmark 'custom' requires mesh_path")
        if not os.path.exists(p.mesh_path):
            bad(f"mesh_path {p.mesh_path!r} does not exist")
    if p.inflow not in INFLOWS:
        bad(f"inflow must be one of {INFLOWS}, got {p.inflow!r}")
    if p.resolution < 2:
        bad(f"resolution must be >= 2, got {p.resolution}")
    if p.smagorinsky_constant <= 0.0:
        bad(f"smagorinsky_constant must be positive, got {p.smagorinsky_constant}")
    if p.amplitude == 0.0:
        bad("amplitude must be nonzero")
    d = cfg.parameters
    if not d.mu_min < d.mu_max:
        bad(f"need mu_min < mu_max, got [{d.mu_min}, {d.mu_max}]")
    if d.mu_min <= 0.0:
        bad(f"mu_min must be positive, got {d.mu_min}")
    if d.train_points < 1:
        bad(f"train_points must be >= 1, got {d.train_points}")
    if d.eim_points < 0:
        bad(f"eim_points must be >= 0, got {d.eim_points}")
    if d.validate_points < 1:
        bad(f"validate_points must be >= 1, got {d.validate_points}")
    for label, value in (
        ("truth dt", cfg.truth.dt),
        ("truth eps", cfg.truth.eps),
        ("eim tol", cfg.eim.tol),
        ("rb tol", cfg.rb.tol),
        ("rb online_eps", cfg.rb.online_eps),
        ("certification beta_tol", cfg.certification.beta_tol),
    ):
        if value <= 0.0:
            bad(f"{label} must be positive, got {value}")
    if cfg.rb.online_dt < 0.0:
        bad(f"rb online_dt must be >= 0, got {cfg.rb.online_dt}")
    for label, value, floor in (
        ("truth max_steps", cfg.truth.max_steps, 1),
        ("eim max_modes", cfg.eim.max_modes, 1),
        ("rb max_stages", cfg.rb.max_stages, 1),
        ("rb pod_modes", cfg.rb.pod_modes, 0),
        ("rb online_max_steps", cfg.rb.online_max_steps, 1),
        ("certification beta_init", cfg.certification.beta_init, 2),
        ("certification beta_budget", cfg.certification.beta_budget, 2),
        ("certification sobolev_probes", cfg.certification.sobolev_probes, 0),
        ("certification inverse_samples", cfg.certification.inverse_samples, 1),
        ("run jobs", cfg.run.jobs, 1),
    ):
        if value < floor:
            bad(f"{label} must be >= {floor}, got {value}")
    if cfg.certification.beta_init > cfg.certification.beta_budget:
        bad(
            "certification beta_init must not exceed beta_budget, got "
            f"{cfg.certification.beta_init} > {cfg.certification.beta_budget}"
        )
    if not cfg.run.output:
        bad("run output directory must be set")
    return cfg


def train_grid(cfg):
    """Uniform training grid over the parameter interval."""
    d = cfg.parameters
    if d.train_points == 1:
        return [0.5 * (d.mu_min + d.mu_max)]
    return [float(m) for m in np.linspace(d.mu_min, d.mu_max, d.train_points)]


def eim_grid(cfg):
    """Interpolation-training grid (defaults to the training grid)."""
    if cfg.parameters.eim_points == 0:
        return train_grid(cfg)
    d = cfg.parameters
    if d.eim_points == 1:
        return [0.5 * (d.mu_min + d.mu_max)]
    return [float(m) for m in np.linspace(d.mu_min, d.mu_max, d.eim_points)]


def validation_grid(cfg):
    """Cell midpoints of a uniform partition, avoiding the training grid."""
    d = cfg.parameters
    edges = np.linspace(d.mu_min, d.mu_max, d.validate_points + 1)
    return [float(m) for m in 0.5 * (edges[:-1] + edges[1:])]


def save_config(cfg, path):
    """Write the configuration in the same sectioned format it is read from."""
    parser = configparser.ConfigParser(interpolation=None)
    for section in _SECTIONS:
        target = getattr(cfg, section)
        parser[section] = {
            f.name: str(getattr(target, f.name))
            for f in dataclasses.fields(target)
        }
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)
