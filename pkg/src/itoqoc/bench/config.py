"""Experiment configuration: dataclasses, YAML I/O, presets and hashing."""
from dataclasses import asdict, dataclass, field, fields
import copy
import hashlib
import json
from importlib import resources

import yaml

from ..propagators import Guess, ItoConfig, PwcConfig

__all__ = [
    "EXPERIMENTS",
    "PRESETS",
    "PropagatorSettings",
    "OptimizerSettings",
    "ExperimentConfig",
    "load_presets",
    "resolve_config",
    "config_hash",
]

EXPERIMENTS = ("ito-bench", "compare", "dynamics", "pop-map", "gate-map", "optimize", "qsl-map")
PRESETS = ("desk", "paper")


@dataclass
class PropagatorSettings:
    """Time grid and method of a propagation.

    ``method`` is ``"ito"`` or ``"pwc"``; the ITO fields are ignored for PWC.
    """

    method: str = "ito"
    n_steps: int = 1000
    m_order: int = 8
    tol_iter: float = 1e-12
    max_iter: int = 20
    guess: str = "extrapolate"
    kernel: str = "chebyshev"
    pwc_backend: str = "chebyshev"

    def __post_init__(self):
        if self.method not in ("ito", "pwc"):
            raise ValueError(f"propagator method must be 'ito' or 'pwc', got {self.method!r}")
        if self.n_steps < 1:
            raise ValueError("n_steps must be positive")
        Guess(self.guess)

    def build(self, **overrides):
        """The :class:`ItoConfig` or :class:`PwcConfig` these settings describe."""
        s = PropagatorSettings(**{**asdict(self), **overrides})
        if s.method == "pwc":
            return PwcConfig(s.pwc_backend)
        return ItoConfig(m_order=s.m_order, tol_iter=s.tol_iter, max_iter=s.max_iter,
                         guess=Guess(s.guess), kernel=s.kernel)


@dataclass
class OptimizerSettings:
    """Krotov settings; ``problem`` is ``ho_freq``, ``qudit_state`` or ``qudit_gate``."""

    problem: str = "ho_freq"
    method: str = "pwc"
    lambda_a: float = 1.0
    max_iter: int = 100
    stop_tol: float = 0.0
    shape: str = "sin2"
    rise: float = 0.1
    one_shot_field: bool = False
    target: str = "CNOT"

    def __post_init__(self):
        if self.problem not in ("ho_freq", "qudit_state", "qudit_gate"):
            raise ValueError(f"unknown problem {self.problem!r}")
        if self.method not in ("ito", "pwc"):
            raise ValueError(f"optimizer method must be 'ito' or 'pwc', got {self.method!r}")
        if not self.lambda_a > 0:
            raise ValueError("lambda_a must be positive")


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one experiment run.

    ``model`` holds model parameters (free-form, validated by the experiment),
    ``sweep`` the axis lists, ``options`` experiment-specific scalars.
    """

    experiment: str
    model: dict = field(default_factory=dict)
    propagator: PropagatorSettings = field(default_factory=PropagatorSettings)
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    sweep: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)
    seed: int = 0
    output: str = "out"
    threads: int = 1

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}")
        if isinstance(self.propagator, dict):
            self.propagator = PropagatorSettings(**self.propagator)
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerSettings(**self.optimizer)
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        if self.threads < 1:
            raise ValueError("threads must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**copy.deepcopy(data))

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_yaml(cls, text):
        return cls.from_dict(yaml.safe_load(text))

    def hash(self):
        return config_hash(self)


def config_hash(cfg):
    """SHA-256 of the canonical JSON form (sorted keys, no whitespace).

    ``output`` and ``threads`` do not influence results and are excluded.
    """
    data = cfg.to_dict() if isinstance(cfg, ExperimentConfig) else dict(cfg)
    data = {k: v for k, v in data.items() if k not in ("output", "threads")}
    text = json.dumps(data, sort_keys=True, separators=(",", ":"), allow_nan=True)
    return hashlib.sha256(text.encode()).hexdigest()


def load_presets():
    text = resources.files("itoqoc.data").joinpath("presets.yaml").read_text()
    return yaml.safe_load(text)


def _merge(base, extra):
    out = copy.deepcopy(base)
    for key, value in (extra or {}).items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve_config(experiment, preset="desk", user=None, **overrides):
    """Preset defaults, then the user mapping, then non-``None`` overrides."""
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {PRESETS}")
    table = load_presets()
    if experiment not in table:
        raise ValueError(f"unknown experiment {experiment!r}")
    data = _merge(table[experiment].get("desk", {}), {})
    if preset != "desk":
        data = _merge(data, table[experiment].get(preset, {}))
    user = dict(user or {})
    if user.get("experiment", experiment) != experiment:
        raise ValueError(f"config file is for {user['experiment']!r}, not {experiment!r}")
    data = _merge(data, user)
    data.update({k: v for k, v in overrides.items() if v is not None})
    data["experiment"] = experiment
    return ExperimentConfig.from_dict(data)
