"""Experiment configuration: flat `key = value` files with dotted sections.

Sections: model.* (architecture), data.* (synthetic stream), optim.*
(optimizer), nondet.* (which nondeterminism sources are on), run.* (seeds,
repetitions, splits), sweep.* (activation grid), landscape.* (loss surface
scans), ensemble.* (budget-matched ensembles). Unknown keys are errors;
every value has a typed default so an empty file is a valid config.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace

from . import activations as act
from .data import SynthConfig
from .net import ModelConfig
from .optim import OPT_KINDS


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    queries: int = 250_000
    items_per_query: int = 4
    informative: int = 5
    positive_rate: float = 0.3
    drift: float = 0.0
    main_scale: float = 1.0
    latent_dim: int = 4
    interaction_scale: float = 1.0


@dataclass(frozen=True)
class OptimConfig:
    kind: str = "adagrad_embed"
    lr_embed: float = 0.05
    lr_dense: float = 0.01
    lr_activation: float = 0.005

    def __post_init__(self):
        if self.kind not in OPT_KINDS:
            raise ConfigError(f"optim.kind must be one of {OPT_KINDS}, got {self.kind!r}")


@dataclass(frozen=True)
class NondetConfig:
    shuffle_window: int = 100_000
    distinct_shuffle_seeds: bool = True
    shared_init: bool = True
    interleave_window: int = 1
    shared_prefix: int = 0

    def __post_init__(self):
        if self.shuffle_window < 1 or self.interleave_window < 1:
            raise ConfigError("windows must be >= 1 (1 disables the shuffle)")
        if self.shared_prefix < 0:
            raise ConfigError("nondet.shared_prefix must be >= 0")


@dataclass(frozen=True)
class RunConfig:
    base_seed: int = 0
    reps: int = 10
    holdout_fraction: float = 0.1

    def __post_init__(self):
        if self.reps < 1:
            raise ConfigError("run.reps must be >= 1")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ConfigError("run.holdout_fraction must be in (0,1)")


@dataclass(frozen=True)
class SweepConfig:
    family: str = "smelu"
    betas: tuple = (0.1, 0.25, 0.5, 1.0, 2.0, 4.0)
    include_relu: bool = True

    def __post_init__(self):
        if self.family not in ("smelu", "softplus", "swish", "gelu", "gsmelu"):
            raise ConfigError(f"sweep.family {self.family!r} is not sweepable")
        if not self.betas:
            raise ConfigError("sweep.betas must be non-empty")


@dataclass(frozen=True)
class LandscapeConfig:
    preset: str = "wn"
    points: int = 2001
    seeds: int = 50
    hidden: tuple = (256, 128, 64, 32, 16)

    def __post_init__(self):
        if self.preset not in ("wn", "ln", "reg2d"):
            raise ConfigError(f"landscape.preset must be wn, ln, or reg2d, got {self.preset!r}")
        if self.points < 3 or self.seeds < 1:
            raise ConfigError("landscape.points must be >= 3 and seeds >= 1")


@dataclass(frozen=True)
class EnsembleConfig:
    components: int = 3
    budget_tolerance: float = 0.02

    def __post_init__(self):
        if self.components < 2:
            raise ConfigError("ensemble.components must be >= 2")


@dataclass(frozen=True)
class ExperimentConfig:
    # benchmark default: the activation also gates the embedding concat.
    # A kinked unit there can zero a coordinate's gradient for good, so which
    # coordinates survive depends on update order; that irreversible choice
    # is the divergence channel the duplicate-training comparison measures.
    model: ModelConfig = field(
        default_factory=lambda: ModelConfig(identity_input_activation=False))
    data: DataConfig = field(default_factory=DataConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    nondet: NondetConfig = field(default_factory=NondetConfig)
    run: RunConfig = field(default_factory=RunConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    landscape: LandscapeConfig = field(default_factory=LandscapeConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)

    def synth_config(self, seed: int) -> SynthConfig:
        d = self.data
        return SynthConfig(
            tables=self.model.tables, vocab=self.model.vocab,
            informative=d.informative, queries=d.queries,
            items_per_query=d.items_per_query, positive_rate=d.positive_rate,
            drift=d.drift, main_scale=d.main_scale, latent_dim=d.latent_dim,
            interaction_scale=d.interaction_scale, seed=int(seed),
        )

    def to_text(self) -> str:
        """Canonical `key = value` rendering; parsing it back round-trips."""
        lines = []
        for key in sorted(_KEYS):
            section, name, _ = _KEYS[key]
            obj = getattr(self, section)
            lines.append(f"{key} = {_render(getattr(obj, name))}")
        return "\n".join(lines) + "\n"

    def sha256(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


# ---------------------------------------------------------------------------
# key table and value coercion
# ---------------------------------------------------------------------------


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _parse_int_tuple(s: str) -> tuple:
    try:
        return tuple(int(p.strip()) for p in s.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {s!r}") from None


def _parse_float_tuple(s: str) -> tuple:
    try:
        return tuple(float(p.strip()) for p in s.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {s!r}") from None


def _parse_activation_value(s: str):
    try:
        return act.parse_activation(s.strip())
    except act.ActivationError as exc:
        raise ConfigError(str(exc)) from None


def _coerce_int(s: str) -> int:
    try:
        return int(s)
    except ValueError:
        raise ConfigError(f"expected an integer, got {s!r}") from None


def _coerce_float(s: str) -> float:
    try:
        return float(s)
    except ValueError:
        raise ConfigError(f"expected a number, got {s!r}") from None


def _coerce_str(s: str) -> str:
    return s.strip()


# key -> (section attribute, field name, parser)
_KEYS = {
    "model.tables": ("model", "tables", _coerce_int),
    "model.vocab": ("model", "vocab", _coerce_int),
    "model.embed_dim": ("model", "embed_dim", _coerce_int),
    "model.hidden": ("model", "hidden", _parse_int_tuple),
    "model.activation": ("model", "activation", _parse_activation_value),
    "model.norm": ("model", "norm", _coerce_str),
    "model.act_clip": ("model", "act_clip", _coerce_float),
    "model.logit_clip": ("model", "logit_clip", _coerce_float),
    "model.identity_input_activation": ("model", "identity_input_activation", _parse_bool),
    "data.queries": ("data", "queries", _coerce_int),
    "data.items_per_query": ("data", "items_per_query", _coerce_int),
    "data.informative": ("data", "informative", _coerce_int),
    "data.positive_rate": ("data", "positive_rate", _coerce_float),
    "data.drift": ("data", "drift", _coerce_float),
    "data.main_scale": ("data", "main_scale", _coerce_float),
    "data.latent_dim": ("data", "latent_dim", _coerce_int),
    "data.interaction_scale": ("data", "interaction_scale", _coerce_float),
    "optim.kind": ("optim", "kind", _coerce_str),
    "optim.lr_embed": ("optim", "lr_embed", _coerce_float),
    "optim.lr_dense": ("optim", "lr_dense", _coerce_float),
    "optim.lr_activation": ("optim", "lr_activation", _coerce_float),
    "nondet.shuffle_window": ("nondet", "shuffle_window", _coerce_int),
    "nondet.distinct_shuffle_seeds": ("nondet", "distinct_shuffle_seeds", _parse_bool),
    "nondet.shared_init": ("nondet", "shared_init", _parse_bool),
    "nondet.interleave_window": ("nondet", "interleave_window", _coerce_int),
    "nondet.shared_prefix": ("nondet", "shared_prefix", _coerce_int),
    "run.base_seed": ("run", "base_seed", _coerce_int),
    "run.reps": ("run", "reps", _coerce_int),
    "run.holdout_fraction": ("run", "holdout_fraction", _coerce_float),
    "sweep.family": ("sweep", "family", _coerce_str),
    "sweep.betas": ("sweep", "betas", _parse_float_tuple),
    "sweep.include_relu": ("sweep", "include_relu", _parse_bool),
    "landscape.preset": ("landscape", "preset", _coerce_str),
    "landscape.points": ("landscape", "points", _coerce_int),
    "landscape.seeds": ("landscape", "seeds", _coerce_int),
    "landscape.hidden": ("landscape", "hidden", _parse_int_tuple),
    "ensemble.components": ("ensemble", "components", _coerce_int),
    "ensemble.budget_tolerance": ("ensemble", "budget_tolerance", _coerce_float),
}


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_render(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, act.ActivationSpec):
        return act.format_activation(value)
    return str(value)


def parse_config_text(text: str, source: str = "<config>") -> "ExperimentConfig":
    overrides = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected `key = value`, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in overrides:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        section, name, parser = _KEYS[key]
        try:
            overrides[key] = (section, name, parser(value))
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {key}: {exc}") from None
    return build_config(overrides)


def build_config(overrides: dict) -> ExperimentConfig:
    per_section = {}
    for section, name, value in overrides.values():
        per_section.setdefault(section, {})[name] = value
    cfg = ExperimentConfig()
    try:
        parts = {}
        for f in fields(ExperimentConfig):
            base = getattr(cfg, f.name)
            if f.name in per_section:
                base = replace(base, **per_section[f.name])
            parts[f.name] = base
        out = ExperimentConfig(**parts)
        out.synth_config(0)  # validates the data block eagerly
        return out
    except (ConfigError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, source=str(path))
