"""Training loop, evaluation protocol and multi-seed aggregation."""
from __future__ import annotations

import functools
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats

from .agents import (
    AgentConfig,
    DDPGAgent,
    DQNAgent,
    Episode,
    ReinforceAgent,
    ReplayBuffer,
    Transition,
    linear_schedule,
    replay_sample,
)
from .envsim import Env, EnvConfig, RewardMode, oracle_greedy_return
from .numkit import ConfigurationError, NonFiniteError
from .stabilize import (
    EmbeddingMode,
    EstimatorConfig,
    RewardEstimator,
    RewardSource,
    SharedEmbedder,
    estimator_update,
    stabilize_batch,
)

log = logging.getLogger(__name__)

ORACLE_EPISODES = 1000
ORACLE_SEED = 20_240_901


@dataclass(frozen=True)
class RunConfig:
    env: EnvConfig = EnvConfig()
    agent: AgentConfig = AgentConfig()
    estimator: EstimatorConfig = EstimatorConfig()
    reward_source: RewardSource = RewardSource.OBSERVED
    embedding_mode: EmbeddingMode = EmbeddingMode.SEPARATE
    reward_mode: RewardMode = RewardMode.STOCHASTIC
    episodes: int = 3000
    eval_period: int = 10
    eval_episodes: int = 100
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "reward_source", RewardSource(self.reward_source))
        object.__setattr__(self, "embedding_mode", EmbeddingMode(self.embedding_mode))
        object.__setattr__(self, "reward_mode", RewardMode(self.reward_mode))

    def validate(self) -> RunConfig:
        self.env.validate()
        self.agent.validate()
        self.estimator.validate()
        if self.eval_period < 1:
            raise ConfigurationError("eval_period must be >= 1")
        if self.episodes < self.eval_period:
            raise ConfigurationError("episodes must be >= eval_period")
        if self.eval_episodes < 1:
            raise ConfigurationError("eval_episodes must be >= 1")
        return self

    @property
    def uses_estimator(self) -> bool:
        return (self.reward_source is RewardSource.ESTIMATED
                or self.embedding_mode is EmbeddingMode.SHARED_SUPERVISED)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("reward_source", "embedding_mode", "reward_mode"):
            d[key] = d[key].value
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class MetricsTimeline:
    episodes: list[int] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)
    seed: int = 0
    digest: str = ""
    diverged: bool = False
    error: Optional[str] = None
    diagnostics: dict = field(default_factory=dict)

    def append(self, episode: int, score: float) -> None:
        if self.episodes and episode <= self.episodes[-1]:
            raise ValueError("timeline episode indices must increase")
        self.episodes.append(int(episode))
        self.scores.append(float(score))

    @property
    def failed(self) -> bool:
        return self.diverged or self.error is not None

    def final_score(self, window: int = 10) -> float:
        if not self.scores:
            return math.nan
        return float(np.mean(self.scores[-window:]))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> MetricsTimeline:
        return cls(**d)


@dataclass(frozen=True)
class EfficiencyResult:
    episodes: Optional[int]
    threshold: float
    k: int

    @property
    def attained(self) -> bool:
        return self.episodes is not None


@dataclass(frozen=True)
class AggregateResult:
    mean: float
    half_width: float
    attain_count: int
    n: int

    @property
    def excluded(self) -> int:
        return self.n - self.attain_count


# ---------------------------------------------------------------------------
# evaluation


def evaluate(policy: Callable, env: Env, n_episodes: int, seed) -> float:
    """Average observed return of ``policy`` over stochastic-mode episodes."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    return float(env.rollout_batch(policy, n_episodes, seed, RewardMode.STOCHASTIC).mean())


@functools.lru_cache(maxsize=64)
def oracle_reference(env_config: EnvConfig) -> float:
    return oracle_greedy_return(Env(env_config), ORACLE_EPISODES, ORACLE_SEED)


def default_threshold(env_config: EnvConfig, fraction: float = 0.6) -> float:
    return fraction * oracle_reference(env_config)


def sample_efficiency(timeline: MetricsTimeline, threshold: float, k: int = 5) -> EfficiencyResult:
    """Episode index at which the score reaches ``threshold`` for the k-th time."""
    if k < 1:
        raise ValueError("k must be >= 1")
    hits = 0
    for ep, score in zip(timeline.episodes, timeline.scores):
        if score >= threshold:
            hits += 1
            if hits == k:
                return EfficiencyResult(ep, threshold, k)
    return EfficiencyResult(None, threshold, k)


def aggregate(values: Sequence[Optional[float]], confidence: float = 0.95) -> AggregateResult:
    """Mean and t-interval half-width; ``None``/NaN entries count as never attained."""
    n = len(values)
    if n < 2:
        raise ValueError("aggregate needs at least two runs")
    kept = np.array([v for v in values if v is not None and not math.isnan(v)], dtype=float)
    m = len(kept)
    mean = float(kept.mean()) if m else math.nan
    if m >= 2:
        t = stats.t.ppf(0.5 + confidence / 2, m - 1)
        half = float(t * kept.std(ddof=1) / math.sqrt(m))
    else:
        half = math.nan
    return AggregateResult(mean, half, m, n)


# ---------------------------------------------------------------------------
# training


@dataclass
class _Streams:
    env: np.random.Generator
    explore: np.random.Generator
    replay: np.random.Generator
    estimator: np.random.Generator
    init_agent: np.random.Generator
    init_estimator: np.random.Generator
    eval_seed: int

    @classmethod
    def from_seed(cls, seed: int) -> _Streams:
        kids = np.random.SeedSequence(seed).spawn(7)
        gens = [np.random.default_rng(k) for k in kids[:6]]
        return cls(*gens, eval_seed=int(kids[6].generate_state(1, np.uint64)[0]))


def build_agent(config: RunConfig, env: Env, rng: np.random.Generator, encoder=None, input_dim=None):
    a = config.agent
    input_dim = input_dim or env.feature_dim
    if a.family == "dqn":
        return DQNAgent(a, input_dim, env.n_items, rng, encoder)
    if a.family == "reinforce":
        return ReinforceAgent(a, input_dim, env.n_items, rng, encoder)
    return DDPGAgent(a, input_dim, env.catalog, rng, encoder)


def build_estimator(config: RunConfig, env: Env, rng: np.random.Generator) -> RewardEstimator:
    ec = config.estimator
    embedder = None
    if config.embedding_mode is EmbeddingMode.SHARED_SUPERVISED:
        embedder = SharedEmbedder(env.feature_dim, env.config.dim, ec.embed_dim, rng, ec.user_hidden, ec.lr)
    return RewardEstimator(env.feature_dim, env.catalog, rng, ec, embedder)


def train(config: RunConfig, *, estimator=None, recorder: Callable | None = None) -> MetricsTimeline:
    """Run one training run and return its evaluation timeline.

    ``estimator`` overrides the co-trained reward model (tests wire in
    :class:`~srslab.stabilize.OracleEstimator`). ``recorder(kind, payload)``
    sees every environment step as ``("step", (features, outcome))`` and every
    input handed to an RL update (after stabilization) as ``(family, batch)``.
    """
    config = config.validate()
    env = Env(config.env)
    rng = _Streams.from_seed(config.seed)
    timeline = MetricsTimeline(seed=config.seed, digest=config.digest())
    ac = config.agent

    if estimator is None and config.uses_estimator:
        estimator = build_estimator(config, env, rng.init_estimator)
    encoder, input_dim = None, None
    if config.embedding_mode is EmbeddingMode.SHARED_SUPERVISED:
        embedder = estimator.embedder
        encoder, input_dim = embedder.embed_states, embedder.embed_dim
    agent = build_agent(config, env, rng.init_agent, encoder, input_dim)

    family = ac.family
    buffer = ReplayBuffer(ac.buffer_capacity, env.feature_dim, env.config.dim if family == "ddpg" else None)
    decay = ac.eps_decay_episodes if ac.eps_decay_episodes is not None else int(0.3 * config.episodes)
    estimated = config.reward_source is RewardSource.ESTIMATED
    trainable = estimator is not None and estimator.trainable
    est_bs = config.estimator.batch_size

    def stabilizing() -> bool:
        return estimated and (not trainable or buffer.total_added >= config.estimator.warmup)

    try:
        for ep in range(1, config.episodes + 1):
            state = env.reset(int(rng.env.integers(2**63)))
            eps = linear_schedule(ac.eps_start, ac.eps_end, decay, ep - 1)
            noise = linear_schedule(ac.noise_start, ac.noise_end, decay, ep - 1)
            ep_states, ep_items, ep_rewards = [], [], []
            while not state.done:
                x = env.features(state)
                if family == "ddpg":
                    _, item = agent.act(x, noise, rng.explore)
                    action = env.catalog[item]
                elif family == "dqn":
                    item = action = agent.act(x, eps, rng.explore)
                else:
                    item = action = agent.act(x, rng.explore)
                out = env.step(state, item, config.reward_mode)
                if recorder is not None:
                    recorder("step", (x, out))
                x_next = env.features(out.next_state)
                buffer.add(Transition(x, action, out.reward, x_next, out.done, item))
                if trainable and buffer.ready(est_bs):
                    estimator_update(estimator, replay_sample(buffer, est_bs, rng.estimator))
                if family == "reinforce":
                    ep_states.append(x)
                    ep_items.append(item)
                    ep_rewards.append(out.reward)
                elif buffer.ready(ac.batch_size):
                    batch = replay_sample(buffer, ac.batch_size, rng.replay)
                    if stabilizing():
                        batch = stabilize_batch(batch, estimator)
                    if recorder is not None:
                        recorder(family, batch)
                    agent.update(batch)
                state = out.next_state
            if family == "reinforce":
                states = np.array(ep_states)
                rewards = np.array(ep_rewards)
                if stabilizing():
                    rewards = np.asarray(estimator.predict(states, np.array(ep_items)), dtype=float)
                episode = Episode(states, ep_items, rewards, True)
                if recorder is not None:
                    recorder(family, episode)
                agent.update(episode)
            if ep % config.eval_period == 0:
                timeline.append(ep, evaluate(agent.policy(), env, config.eval_episodes, rng.eval_seed))
    except NonFiniteError as exc:
        log.warning("run %s seed %d diverged: %s", timeline.digest, config.seed, exc)
        timeline.diverged = True
        timeline.error = str(exc)
    if family == "reinforce":
        timeline.diagnostics.update(agent.diagnostics)
    if trainable:
        timeline.diagnostics["estimator_updates"] = estimator.updates
    return timeline


# ---------------------------------------------------------------------------
# suites


@dataclass
class RunRecord:
    name: str
    seed: int
    timeline: MetricsTimeline
    efficiency: EfficiencyResult
    final_score: float


@dataclass
class SuiteResult:
    runs: list[RunRecord]
    aggregates: dict[str, dict[str, AggregateResult]]
    thresholds: dict[str, float]

    @property
    def failures(self) -> list[RunRecord]:
        return [r for r in self.runs if r.timeline.failed]

    def timelines(self, name: str) -> list[MetricsTimeline]:
        return [r.timeline for r in self.runs if r.name == name]


def _run_job(config: RunConfig) -> MetricsTimeline:
    try:
        return train(config)
    except Exception as exc:  # recorded, the suite keeps going
        return MetricsTimeline(seed=config.seed, digest=config.digest(), error=f"{type(exc).__name__}: {exc}")


def mean_series(timelines: Sequence[MetricsTimeline]) -> MetricsTimeline:
    """Seed-mean curve over the evaluation points every timeline shares."""
    usable = [t for t in timelines if t.scores]
    if not usable:
        return MetricsTimeline()
    n = min(len(t.scores) for t in usable)
    scores = np.mean([t.scores[:n] for t in usable], axis=0)
    return MetricsTimeline(episodes=list(usable[0].episodes[:n]), scores=[float(s) for s in scores])


def run_suite(matrix: Sequence[tuple[str, RunConfig]], seeds: Sequence[int], parallel: int = 1,
              threshold_fraction: float = 0.6, k: int = 5, final_window: int = 10) -> SuiteResult:
    """Train every (template, seed) pair and aggregate per template.

    Results depend only on the (config, seed) pairs, never on ``parallel``.
    """
    if not matrix or not seeds:
        raise ValueError("need at least one configuration and one seed")
    names = [n for n, _ in matrix]
    if len(set(names)) != len(names):
        raise ValueError("configuration names must be unique")
    jobs = [(name, replace(cfg, seed=int(s))) for name, cfg in matrix for s in seeds]
    configs = [c for _, c in jobs]
    if parallel > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(parallel, len(jobs))) as pool:
            timelines = list(pool.map(_run_job, configs))
    else:
        timelines = [_run_job(c) for c in configs]

    thresholds = {name: default_threshold(cfg.env, threshold_fraction) for name, cfg in matrix}
    runs = []
    for (name, cfg), tl in zip(jobs, timelines):
        eff = sample_efficiency(tl, thresholds[name], k)
        runs.append(RunRecord(name, cfg.seed, tl, eff, tl.final_score(final_window)))
    aggregates = {}
    if len(seeds) >= 2:
        for name in names:
            mine = [r for r in runs if r.name == name]
            aggregates[name] = {
                "episodes_to_threshold": aggregate([r.efficiency.episodes for r in mine]),
                "final_score": aggregate([None if r.timeline.failed else r.final_score for r in mine]),
            }
    return SuiteResult(runs, aggregates, thresholds)
