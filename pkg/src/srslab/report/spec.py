"""Experiment specification files (JSON).

Schema (every block except ``variants`` and ``seeds`` is optional)::

    {
      "name": "fig1",
      "env": {<EnvConfig fields>},
      "agent": {<AgentConfig fields>},
      "estimator": {<EstimatorConfig fields>},
      "protocol": {"episodes": 3000, "eval_period": 10, "eval_episodes": 100,
                   "threshold_fraction": 0.6, "k": 5, "final_window": 10},
      "variants": [{"name": "dqn-srs", "reward_source": "estimated",
                    "embedding_mode": "separate", "reward_mode": "stochastic",
                    "agent": {<AgentConfig overrides>}}],
      "seeds": [0, 1, 2],
      "output_dir": "results/fig1",
      "emit": ["csv", "json", "svg", "png"]
    }

Unknown keys are rejected everywhere.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any

from ..agents import AgentConfig
from ..envsim import EnvConfig, RewardMode
from ..harness import RunConfig
from ..numkit import ConfigurationError
from ..stabilize import EmbeddingMode, EstimatorConfig, RewardSource

EMIT_FORMATS = ("csv", "json", "svg", "png")
_SEED_LIMIT = 2**64


class SpecError(ValueError):
    """Invalid experiment specification. ``field`` names the offending key."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None,
                 column: int | None = None):
        super().__init__(message)
        self.field = field
        self.line = line
        self.column = column


@dataclass(frozen=True)
class Protocol:
    episodes: int = 3000
    eval_period: int = 10
    eval_episodes: int = 100
    threshold_fraction: float = 0.6
    k: int = 5
    final_window: int = 10


@dataclass(frozen=True)
class Variant:
    name: str
    reward_source: str = RewardSource.OBSERVED.value
    embedding_mode: str = EmbeddingMode.SEPARATE.value
    reward_mode: str = RewardMode.STOCHASTIC.value
    agent: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    env: EnvConfig
    agent: AgentConfig
    estimator: EstimatorConfig
    protocol: Protocol
    variants: tuple[Variant, ...]
    seeds: tuple[int, ...]
    output_dir: str = "results"
    emit: tuple[str, ...] = EMIT_FORMATS

    def run_configs(self, seed_offset: int = 0) -> list[tuple[str, RunConfig]]:
        out = []
        for v in self.variants:
            out.append((v.name, RunConfig(
                env=self.env,
                agent=replace(self.agent, **v.agent),
                estimator=self.estimator,
                reward_source=RewardSource(v.reward_source),
                embedding_mode=EmbeddingMode(v.embedding_mode),
                reward_mode=RewardMode(v.reward_mode),
                episodes=self.protocol.episodes,
                eval_period=self.protocol.eval_period,
                eval_episodes=self.protocol.eval_episodes,
            )))
        return out

    def shifted_seeds(self, offset: int = 0) -> list[int]:
        return [(s + offset) % _SEED_LIMIT for s in self.seeds]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        d["emit"] = list(self.emit)
        d["variants"] = [asdict(v) for v in self.variants]
        for block in ("agent", "estimator"):
            for k, v in d[block].items():
                if isinstance(v, tuple):
                    d[block][k] = list(v)
        return d


def _block(raw: Any, cls, where: str) -> dict:
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise SpecError(f"{where} must be an object", where)
    allowed = {f.name for f in fields(cls)}
    for key in raw:
        if key not in allowed:
            raise SpecError(f"unknown key {key!r} in {where}", f"{where}.{key}")
    return dict(raw)


def _typed(cls, values: dict, where: str):
    """Instantiate a config dataclass, checking JSON value types against defaults."""
    defaults = cls()
    for key, value in values.items():
        ref = getattr(defaults, key)
        ok = True
        if isinstance(ref, bool):
            ok = isinstance(value, bool)
        elif isinstance(ref, int):
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif isinstance(ref, float):
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        elif isinstance(ref, str):
            ok = isinstance(value, str)
        elif isinstance(ref, tuple):
            ok = isinstance(value, list) and all(isinstance(x, int) and not isinstance(x, bool) for x in value)
        elif ref is None:
            ok = value is None or (isinstance(value, int) and not isinstance(value, bool))
        if not ok:
            raise SpecError(f"{where}.{key} has the wrong type ({type(value).__name__})", key)
        if isinstance(ref, float):
            values[key] = float(value)
        if isinstance(ref, tuple):
            values[key] = tuple(value)
    return cls(**values)


def _validated(obj, where: str):
    try:
        return obj.validate()
    except ConfigurationError as exc:
        msg = str(exc)
        name = msg.split("'")[1] if "'" in msg else None
        raise SpecError(f"{where}: {msg}", name) from None


def parse_spec(text: str) -> ExperimentSpec:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecError(f"JSON syntax error at line {exc.lineno}, column {exc.colno}: {exc.msg}",
                        line=exc.lineno, column=exc.colno) from None
    if not isinstance(raw, dict):
        raise SpecError("spec must be a JSON object")
    top = {"name", "env", "agent", "estimator", "protocol", "variants", "seeds", "output_dir", "emit"}
    for key in raw:
        if key not in top:
            raise SpecError(f"unknown top-level key {key!r}", key)

    env = _validated(_typed(EnvConfig, _block(raw.get("env"), EnvConfig, "env"), "env"), "env")
    agent = _validated(_typed(AgentConfig, _block(raw.get("agent"), AgentConfig, "agent"), "agent"), "agent")
    estimator = _validated(
        _typed(EstimatorConfig, _block(raw.get("estimator"), EstimatorConfig, "estimator"), "estimator"),
        "estimator")
    protocol = _typed(Protocol, _block(raw.get("protocol"), Protocol, "protocol"), "protocol")
    for key, ok in {
        "episodes": protocol.episodes >= protocol.eval_period,
        "eval_period": protocol.eval_period >= 1,
        "eval_episodes": protocol.eval_episodes >= 1,
        "threshold_fraction": protocol.threshold_fraction > 0,
        "k": protocol.k >= 1,
        "final_window": protocol.final_window >= 1,
    }.items():
        if not ok:
            raise SpecError(f"protocol.{key} is invalid ({getattr(protocol, key)!r})", key)

    name = raw.get("name", "experiment")
    if not isinstance(name, str) or not name:
        raise SpecError("name must be a non-empty string", "name")

    variants_raw = raw.get("variants")
    if not isinstance(variants_raw, list) or not variants_raw:
        raise SpecError("variants must be a non-empty list", "variants")
    variants = []
    for i, v in enumerate(variants_raw):
        vd = _block(v, Variant, f"variants[{i}]")
        if not isinstance(vd.get("name"), str) or not vd["name"]:
            raise SpecError(f"variants[{i}] needs a name", "name")
        for key, enum_cls in (("reward_source", RewardSource), ("embedding_mode", EmbeddingMode),
                              ("reward_mode", RewardMode)):
            if key in vd:
                try:
                    enum_cls(vd[key])
                except ValueError:
                    allowed = ", ".join(e.value for e in enum_cls)
                    raise SpecError(f"variants[{i}].{key} must be one of: {allowed}", key) from None
        overrides = _block(vd.get("agent"), AgentConfig, f"variants[{i}].agent")
        merged = {**{k: getattr(agent, k) for k in AgentConfig.field_names()}, **overrides}
        merged = {k: list(x) if isinstance(x, tuple) else x for k, x in merged.items()}
        _validated(_typed(AgentConfig, merged, f"variants[{i}].agent"), f"variants[{i}].agent")
        vd["agent"] = {k: tuple(x) if isinstance(x, list) else x for k, x in overrides.items()}
        variants.append(Variant(**vd))
    names = [v.name for v in variants]
    if len(set(names)) != len(names):
        raise SpecError("variant names must be unique", "variants")

    seeds = raw.get("seeds")
    if (not isinstance(seeds, list) or not seeds
            or not all(isinstance(s, int) and not isinstance(s, bool) and 0 <= s < _SEED_LIMIT for s in seeds)):
        raise SpecError("seeds must be a non-empty list of unsigned 64-bit integers", "seeds")

    output_dir = raw.get("output_dir", "results")
    if not isinstance(output_dir, str) or not output_dir:
        raise SpecError("output_dir must be a non-empty string", "output_dir")
    emit = raw.get("emit", list(EMIT_FORMATS))
    if not isinstance(emit, list) or any(e not in EMIT_FORMATS for e in emit):
        raise SpecError(f"emit entries must be among {EMIT_FORMATS}", "emit")

    return ExperimentSpec(name, env, agent, estimator, protocol, tuple(variants), tuple(seeds), output_dir,
                          tuple(emit))


def serialize_spec(spec: ExperimentSpec) -> str:
    """Canonical JSON with every default materialized."""
    return json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n"
