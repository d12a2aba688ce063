"""Online episode loop, baseline policies and regret accounting."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .backends import BackendRegistry
from .dsl import ProgramIR
from .envs import Environment, Sample
from .executor import ConfigurationVector, ExecutionTrace, loss
from .policy import PolicyHyperparams, StructuredPolicy, sub_rewards

REGRET_CAP = 256
REGRET_SAMPLE = 64


def compute_reward(loss_value: float, incurred_cost: float, lam: float) -> float:
    return -loss_value - lam * incurred_cost


@dataclass
class EpisodeRecord:
    t: int
    features: np.ndarray = field(repr=False)
    config: ConfigurationVector
    trace: ExecutionTrace
    y: object
    loss: float
    reward: float
    sub_rewards: list

    def to_json(self) -> dict:
        return {
            "episode": self.t,
            "config": list(self.config),
            "output": self.trace.output,
            "y": self.y,
            "loss": self.loss,
            "per_site_cost": list(self.trace.per_site_cost),
            "incurred_cost": self.trace.incurred_cost,
            "reward": self.reward,
            "sub_rewards": list(self.sub_rewards),
        }


# ---------------------------------------------------------------------------
# Baseline policies


class StaticPolicy:
    learns = False

    def __init__(self, config: ConfigurationVector, name: str = "static"):
        self.config = config
        self.name = name

    def select(self, x, t=None) -> ConfigurationVector:
        return self.config

    def observe(self, x, config, rewards, t) -> None:
        pass


def static_policy(config, ir: ProgramIR | None = None, registry: BackendRegistry | None = None, name="static"):
    config = config if isinstance(config, ConfigurationVector) else ConfigurationVector(tuple(config))
    if ir is not None and registry is not None:
        config.validate(ir, registry)
    return StaticPolicy(config, name)


def _extreme_config(ir: ProgramIR, registry: BackendRegistry, pick) -> ConfigurationVector:
    choices = []
    for site in ir.call_sites:
        arms = registry.arms(site.function_id)
        choices.append(pick(arms, key=registry.cost))
    return ConfigurationVector(tuple(choices))


def cheapest_config(ir, registry) -> ConfigurationVector:
    return _extreme_config(ir, registry, min)


def most_expensive_config(ir, registry) -> ConfigurationVector:
    return _extreme_config(ir, registry, max)


def cheapest(env: Environment) -> StaticPolicy:
    return StaticPolicy(cheapest_config(env.program, env.registry), "cheapest")


def most_expensive(env: Environment) -> StaticPolicy:
    return StaticPolicy(most_expensive_config(env.program, env.registry), "most_expensive")


class ParetoRandomPolicy:
    """Per episode, follow ``high`` with probability q and ``low`` otherwise."""

    learns = False

    def __init__(self, low, high, q: float, seed: int = 0, name: str | None = None):
        if not 0.0 <= q <= 1.0:
            raise ValueError("q must be a probability")
        self.low, self.high, self.q = low, high, q
        self.rng = np.random.default_rng([seed, 15485863])
        self.name = name or f"pareto_random_q{q:g}"
        self._active = low

    def select(self, x, t=None) -> ConfigurationVector:
        self._active = self.high if self.rng.random() < self.q else self.low
        return self._active.select(x, t)

    def observe(self, x, config, rewards, t) -> None:
        self._active.observe(x, config, rewards, t)


def pareto_random_policy(low_policy, high_policy, q: float, seed: int = 0) -> ParetoRandomPolicy:
    return ParetoRandomPolicy(low_policy, high_policy, q, seed)


def routing_policy(arms, input_dim: int = 16, hyper: PolicyHyperparams | None = None, seed: int = 0):
    """Single-site learned router over monolithic ``(backend_id, cost)`` arms."""
    arms = list(arms)
    if not arms:
        raise ValueError("routing needs at least one arm")
    ids = [a[0] if isinstance(a, tuple) else a.id for a in arms]
    costs = [a[1] if isinstance(a, tuple) else a.cost for a in arms]
    return StructuredPolicy([(ids, costs)], input_dim, hyper, seed, name="routing")


def learned_policy(env: Environment, hyper: PolicyHyperparams | None = None, seed: int = 0) -> StructuredPolicy:
    return StructuredPolicy.for_program(env.program, env.registry, env.feature_dim, hyper, seed)


# ---------------------------------------------------------------------------
# Regret


def static_universe(env: Environment, cap: int = REGRET_CAP, n_sample: int = REGRET_SAMPLE, seed: int = 0):
    """Every static configuration when there are at most ``cap``; else a flagged sample."""
    arms = env.site_arms()
    size = math.prod(len(a) for a in arms)
    if size <= cap:
        return [ConfigurationVector(c) for c in itertools.product(*arms)], False
    rng = np.random.default_rng([seed, 32452843])
    picked = {cheapest_config(env.program, env.registry), most_expensive_config(env.program, env.registry)}
    out = list(picked)
    while len(out) < n_sample + 2:
        c = ConfigurationVector(tuple(a[int(rng.integers(len(a)))] for a in arms))
        if c not in picked:
            picked.add(c)
            out.append(c)
    return sorted(out, key=lambda c: c.choices), True


class RegretLedger:
    """Counterfactual cumulative reward of each static config vs. the achieved reward."""

    def __init__(self, universe, approximate: bool = False, checkpoints=()):
        self.universe = list(universe)
        self.approximate = approximate
        self.cumulative = np.zeros(len(self.universe))
        self.achieved = 0.0
        self.contextual_best = 0.0
        self.t = 0
        self.gamma: list[float] = []
        self.r_min = math.inf
        self.r_max = -math.inf
        self.checkpoints = set(checkpoints)
        self.snapshots: dict[int, tuple[np.ndarray, float]] = {}

    def update(self, env: Environment, sample: Sample, y, achieved: float) -> None:
        rewards = np.empty(len(self.universe))
        for k, v in enumerate(self.universe):
            trace = env.execute(v, sample)
            rewards[k] = compute_reward(loss(trace.output, y), trace.incurred_cost, env.lam)
        self.record(rewards, achieved)

    def record(self, rewards: np.ndarray, achieved: float) -> None:
        self.cumulative += rewards
        self.achieved += achieved
        self.contextual_best += float(rewards.max())
        self.t += 1
        self.gamma.append(float(self.cumulative.max()) - self.achieved)
        lo, hi = min(float(rewards.min()), achieved), max(float(rewards.max()), achieved)
        self.r_min = min(self.r_min, lo)
        self.r_max = max(self.r_max, hi)
        if self.t in self.checkpoints:
            self.snapshots[self.t] = (self.cumulative.copy(), self.achieved)

    @property
    def best_index(self) -> int:
        return int(np.argmax(self.cumulative))

    @property
    def contextual_regret(self) -> float:
        """Regret against the per-input best configuration within the universe."""
        return self.contextual_best - self.achieved


def regret(ledger: RegretLedger):
    """(gamma_T, [gamma_t / t for t = 1..T])."""
    if ledger.t == 0:
        raise ValueError("empty regret ledger")
    series = [g / (i + 1) for i, g in enumerate(ledger.gamma)]
    return ledger.gamma[-1], series


# ---------------------------------------------------------------------------
# Episode loop


def run_episode(env: Environment, policy, t: int, ledger: RegretLedger | None = None) -> EpisodeRecord:
    sample = env.sample(t)
    config = policy.select(sample.features, t)
    trace = env.execute(config, sample)
    # the label is revealed only once the program has produced its output
    y = env.label(sample)
    loss_value = loss(trace.output, y)
    reward = compute_reward(loss_value, trace.incurred_cost, env.lam)
    subs = sub_rewards(trace, loss_value, env.lam, env.n_sites)
    policy.observe(sample.features, config, subs, t)
    if ledger is not None:
        ledger.update(env, sample, y, reward)
    return EpisodeRecord(t, sample.features, config, trace, y, loss_value, reward, subs)


@dataclass
class RunResult:
    episodes: list
    metrics: dict
    regret_series: list
    ledger: RegretLedger | None = None


def _is_positive(value, label) -> bool:
    return value == label and type(value) is type(label)


def summarize(records, env: Environment) -> dict:
    T = len(records)
    if T == 0:
        return {"episodes": 0, "accuracy": None, "mean_cost": None, "mean_reward": None}
    losses = np.array([r.loss for r in records])
    costs = np.array([r.trace.incurred_cost for r in records])
    rewards = np.array([r.reward for r in records])
    out = {
        "episodes": T,
        "accuracy": float(1.0 - losses.mean()),
        "mean_cost": float(costs.mean()),
        "mean_reward": float(rewards.mean()),
    }
    label = env.positive_label
    if label is not None:
        tp = sum(_is_positive(r.trace.output, label) and _is_positive(r.y, label) for r in records)
        fp = sum(_is_positive(r.trace.output, label) and not _is_positive(r.y, label) for r in records)
        fn = sum(not _is_positive(r.trace.output, label) and _is_positive(r.y, label) for r in records)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        out["precision"] = precision
        out["recall"] = recall
        out["f1"] = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return out


def run_stream(
    env: Environment,
    policy,
    T: int,
    *,
    ledger: RegretLedger | bool = True,
    on_episode: Callable[[EpisodeRecord], None] | None = None,
    keep_episodes: bool = True,
    checkpoints=(),
) -> RunResult:
    """Run ``T`` episodes in order; the policy trains on its own schedule."""
    if ledger is True:
        universe, approx = static_universe(env, seed=env.seed)
        ledger = RegretLedger(universe, approx, checkpoints)
    elif ledger is False:
        ledger = None
    records = []
    for t in range(1, T + 1):
        rec = run_episode(env, policy, t, ledger)
        if on_episode is not None:
            on_episode(rec)
        records.append(rec)
    metrics = summarize(records, env)
    series: list[float] = []
    if ledger is not None and ledger.t:
        gamma_T, series = regret(ledger)
        best = ledger.universe[ledger.best_index]
        metrics.update(
            regret=gamma_T,
            average_regret=gamma_T / ledger.t,
            contextual_regret=ledger.contextual_regret,
            regret_approximate=ledger.approximate,
            universe_size=len(ledger.universe),
            best_static=list(best),
            best_static_mean_reward=float(ledger.cumulative[ledger.best_index] / ledger.t),
            reward_min=ledger.r_min,
            reward_max=ledger.r_max,
        )
    elif ledger is not None:
        metrics.update(regret=0.0, average_regret=0.0)
    return RunResult(records if keep_episodes else [], metrics, series, ledger)
