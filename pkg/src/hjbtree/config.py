"""Run configuration: INI-style files with JSON-coerced values plus
``section.key=value`` command-line overrides.

A configuration fully determines a run.  The offline section drives the
coarse full-order phase (time step, two-control set, snapshot and
truncation tolerances, the mandatory per-mode rank cap); the online
section drives the reduced phase (finer step, wider control set, pruning
rule).  The online grid must contain the offline controls and the online
step must not exceed the offline one.
"""

import configparser
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

__all__ = ["OfflineConfig", "OnlineConfig", "AnalysisConfig", "RunConfig",
           "load_config", "parse_overrides"]

_PRUNINGS_OFFLINE = ("none", "geometric", "bilinear")
_PRUNINGS_ONLINE = ("none", "geometric", "statistical", "monotone", "bilinear")


@dataclass
class OfflineConfig:
    max_rank: int
    dt: float | None = None
    controls: object = "extremes"
    snapshot_tol: float = 1e-4
    trunc_tol: float = 1e-4
    pruning: str = "none"
    eps_scale: float = 1.0
    node_cap: int | None = None

    def __post_init__(self):
        if self.max_rank is None or int(self.max_rank) < 1:
            raise ConfigError("offline.max_rank is required and must be >= 1")
        self.max_rank = int(self.max_rank)
        if self.pruning not in _PRUNINGS_OFFLINE:
            raise ConfigError(f"offline.pruning must be one of {_PRUNINGS_OFFLINE}")
        for key in ("snapshot_tol", "trunc_tol"):
            v = getattr(self, key)
            if not 0 < v < 1:
                raise ConfigError(f"offline.{key} must lie in (0, 1)")


@dataclass
class OnlineConfig:
    dt: float | None = None
    n_controls: int = 2
    pruning: str = "none"
    eps_scale: float = 1.0
    rho: float = 0.2
    n_start: int = 3
    tol: float = 1e-4
    k_max: int = 6
    m0: int = 2
    node_cap: int | None = None
    compare_full_order: bool = False

    def __post_init__(self):
        if self.pruning not in _PRUNINGS_ONLINE:
            raise ConfigError(f"online.pruning must be one of {_PRUNINGS_ONLINE}")
        if self.n_controls < 2:
            raise ConfigError("online.n_controls must be >= 2")
        if not 0 < self.rho <= 1:
            raise ConfigError("online.rho must lie in (0, 1]")
        if self.n_start < 1:
            raise ConfigError("online.n_start must be >= 1")


@dataclass
class AnalysisConfig:
    verify: bool = False
    dense_cap: int = 10**4
    f_lip: float | None = None


@dataclass
class RunConfig:
    preset: str
    problem_params: dict = field(default_factory=dict)
    offline: OfflineConfig = None
    online: OnlineConfig = field(default_factory=OnlineConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    out_dir: str = "out"
    seed: int = 0
    study: dict = field(default_factory=dict)

    def validate_phases(self, problem):
        """Cross-phase invariants given the instantiated problem."""
        dt_off = self.offline.dt if self.offline and self.offline.dt else problem.dt
        dt_on = self.online.dt or dt_off
        if dt_on > dt_off + 1e-12:
            raise ConfigError(
                f"online dt = {dt_on} must not exceed offline dt = {dt_off}"
            )
        lo, hi = problem.control_box
        offline_controls = self.offline_controls(problem) if self.offline else []
        online = np.linspace(lo, hi, self.online.n_controls)
        for u in offline_controls:
            if not np.isclose(online, u, atol=1e-12).any():
                raise ConfigError(
                    "online control grid must contain the offline controls; "
                    f"{u} is missing from {online}"
                )
        return dt_off, dt_on

    def offline_controls(self, problem):
        spec = self.offline.controls
        lo, hi = problem.control_box
        if isinstance(spec, str):
            if spec != "extremes":
                raise ConfigError("offline.controls must be 'extremes' or a list")
            return [float(lo), float(hi)]
        vals = [float(v) for v in spec]
        if any(v < lo - 1e-12 or v > hi + 1e-12 for v in vals):
            raise ConfigError("offline controls fall outside the control box")
        return vals


def _coerce(value):
    try:
        return json.loads(value)
    except (json.JSONDecodeError, TypeError):
        return value


def _section(parser, name):
    if not parser.has_section(name):
        return {}
    return {k: _coerce(v) for k, v in parser.items(name)}


def _build(sections):
    problem = dict(sections.get("problem", {}))
    preset = problem.pop("preset", None)
    if not preset:
        raise ConfigError("config needs [problem] preset = <name>")
    try:
        offline = None
        if "offline" in sections:
            offline = OfflineConfig(**sections["offline"])
        online = OnlineConfig(**sections.get("online", {}))
        analysis = AnalysisConfig(**sections.get("analysis", {}))
    except TypeError as exc:
        raise ConfigError(f"unknown configuration key: {exc}") from exc
    output = sections.get("output", {})
    run = sections.get("run", {})
    return RunConfig(
        preset=preset,
        problem_params=problem,
        offline=offline,
        online=online,
        analysis=analysis,
        out_dir=str(output.get("dir", "out")),
        seed=int(run.get("seed", 0)),
        study=dict(sections.get("study", {})),
    )


def parse_overrides(pairs):
    """Parse repeated ``section.key=value`` strings into nested dicts."""
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not of the form section.key=value")
        key, value = pair.split("=", 1)
        if "." not in key:
            raise ConfigError(f"override key {key!r} needs a section prefix")
        section, name = key.split(".", 1)
        out.setdefault(section.strip(), {})[name.strip()] = _coerce(value.strip())
    return out


def load_config(path=None, overrides=None, require_offline=True):
    """Read an INI config file and apply overrides.

    ``overrides`` is a list of ``section.key=value`` strings taking
    precedence over file values.  With ``path=None`` the configuration is
    built from overrides alone.
    """
    parser = configparser.ConfigParser()
    if path is not None:
        read = parser.read(path)
        if not read:
            raise ConfigError(f"cannot read config file {path}")
    sections = {name: _section(parser, name) for name in parser.sections()}
    for section, values in parse_overrides(overrides).items():
        sections.setdefault(section, {}).update(values)
    cfg = _build(sections)
    if require_offline and cfg.offline is None:
        raise ConfigError("config needs an [offline] section (max_rank at minimum)")
    return cfg
