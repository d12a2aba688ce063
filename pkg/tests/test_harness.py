from __future__ import annotations

import numpy as np
import pytest

from fmalloc.backends import BackendSpec, SyntheticBehavior
from fmalloc.envs import (
    CANONICAL_PROGRAM,
    Environment,
    RoutingEnvironment,
    canonical_config,
    canonical_environment,
    environment_from_dict,
    mixed_environment,
)
from fmalloc.executor import ConfigurationVector, ConfigError
from fmalloc.harness import (
    ParetoRandomPolicy,
    RegretLedger,
    StaticPolicy,
    cheapest,
    cheapest_config,
    compute_reward,
    learned_policy,
    most_expensive,
    most_expensive_config,
    pareto_random_policy,
    regret,
    routing_policy,
    run_episode,
    run_stream,
    static_policy,
    static_universe,
)
from fmalloc.policy import PolicyHyperparams, StructuredPolicy, unpack


@pytest.mark.parametrize("l, c, lam, expected", [(1, 0.04, 0.5, -1.02), (0, 0, 7.0, 0.0), (0, 1.0, 0.5, -0.5)])
def test_compute_reward(l, c, lam, expected):
    assert compute_reward(l, c, lam) == pytest.approx(expected)


def test_episode_record_invariants():
    env = canonical_environment(seed=2)
    pol = learned_policy(env, seed=2)
    for t in range(1, 300):
        rec = run_episode(env, pol, t)
        assert rec.reward == -rec.loss - env.lam * rec.trace.incurred_cost
        assert abs(sum(rec.sub_rewards) - rec.reward) <= 1e-12


def test_skipped_expensive_site_beats_executed_counterfactual():
    env = canonical_environment(seed=0)
    cfg = ConfigurationVector(("find_tiny", "find_tiny", "vqa_large"))
    for t in range(1, 400):
        s = env.sample(t)
        trace = env.execute(cfg, s)
        if trace.invocations[2] == 0:
            full_cost = sum(env.registry.cost(b) for b in cfg)
            assert compute_reward(0.0, trace.incurred_cost, env.lam) > compute_reward(0.0, full_cost, env.lam)
            assert compute_reward(1.0, trace.incurred_cost, env.lam) > compute_reward(1.0, full_cost, env.lam)


class RecordingEnv(Environment):
    """Logs the order in which the harness touches the episode."""

    def __init__(self, base: Environment):
        super().__init__(base.program, base.registry, base.generator, base.lam, base.seed, base.correlated)
        self.log: list[tuple] = []
        self.in_ledger = False

    def execute(self, config, sample):
        out = super().execute(config, sample)
        if not self.in_ledger:
            self.log.append(("execute", sample.t))
        return out

    def label(self, sample):
        self.log.append(("label", sample.t))
        return super().label(sample)


class SpyPolicy:
    learns = False

    def __init__(self, env, inner):
        self.env, self.inner = env, inner

    def select(self, x, t=None):
        self.env.log.append(("select", t))
        return self.inner.select(x, t)

    def observe(self, x, config, rewards, t):
        self.env.log.append(("observe", t))


def test_label_is_read_only_after_execution():
    env = RecordingEnv(canonical_environment(seed=1))
    pol = SpyPolicy(env, cheapest(env))
    for t in range(1, 30):
        run_episode(env, pol, t)
    for t in range(1, 30):
        events = [e for e, tt in env.log if tt == t]
        assert events[:4] == ["select", "execute", "label", "observe"]


def test_noiseless_greedy_oracle_policy_matches_best_static():
    cfg = canonical_config()
    for b in cfg["backends"]:
        b["base_accuracy"] = 1.0
    env = environment_from_dict(cfg, CANONICAL_PROGRAM, 0.3, 0)
    hyper = PolicyHyperparams(nu=0.0, hidden=0, warm_start=False, train_interval=10**6)
    pol = StructuredPolicy.for_program(env.program, env.registry, env.feature_dim, hyper, seed=0)
    for s in pol.sites:
        s.theta[:] = 0.0
        _, _, _, b = unpack(s.theta, s.input_dim, 0, s.n_arms)
        b[int(np.argmin(s.costs))] = 1.0
    res = run_stream(env, pol, 300)
    ledger = res.ledger
    best = ledger.cumulative.max()
    assert ledger.universe[ledger.best_index] == cheapest_config(env.program, env.registry)
    assert ledger.achieved == pytest.approx(best, abs=1e-12)
    assert res.metrics["regret"] == pytest.approx(0.0, abs=1e-12)


def test_empty_stream():
    res = run_stream(canonical_environment(), cheapest(canonical_environment()), 0)
    assert res.episodes == []
    assert res.metrics["episodes"] == 0
    assert res.metrics["regret"] == 0.0


def test_same_seed_is_bit_identical():
    def go():
        env = canonical_environment(seed=4)
        res = run_stream(env, learned_policy(env, seed=4), 200)
        return [r.to_json() for r in res.episodes], res.regret_series

    assert go() == go()


def test_metrics_fields():
    env = canonical_environment(seed=0)
    res = run_stream(env, learned_policy(env, seed=0), 100)
    for k in ("accuracy", "mean_cost", "mean_reward", "precision", "recall", "f1", "regret", "average_regret"):
        assert k in res.metrics
    assert len(res.regret_series) == 100


# static baselines ---------------------------------------------------------


def test_cheapest_and_most_expensive_constructors():
    env = canonical_environment()
    assert cheapest_config(env.program, env.registry).choices == ("find_tiny", "find_tiny", "vqa_small")
    assert most_expensive_config(env.program, env.registry).choices == ("find_large", "find_large", "vqa_large")
    assert most_expensive(env).select(None).choices == ("find_large", "find_large", "vqa_large")


def test_static_policy_never_changes():
    env = canonical_environment()
    cfg = ("find_tiny", "find_large", "vqa_large")
    pol = static_policy(cfg, env.program, env.registry)
    res = run_stream(env, pol, 100, ledger=False)
    assert {r.config.choices for r in res.episodes} == {cfg}


def test_static_policy_rejects_invalid_config():
    env = canonical_environment()
    with pytest.raises(ConfigError):
        static_policy(("vqa_small", "find_tiny", "vqa_large"), env.program, env.registry)


def test_pareto_random_endpoints_and_midpoint():
    env = canonical_environment(seed=3)
    lo, hi = cheapest(env), most_expensive(env)
    for q, src in ((0.0, lo), (1.0, hi)):
        mix = run_stream(env, pareto_random_policy(lo, hi, q, seed=1), 200, ledger=False)
        ref = run_stream(env, src, 200, ledger=False)
        assert [r.to_json() for r in mix.episodes] == [r.to_json() for r in ref.episodes]
    with pytest.raises(ValueError):
        ParetoRandomPolicy(lo, hi, 1.5)


# regret -----------------------------------------------------------------


def test_regret_example():
    led = RegretLedger([ConfigurationVector(("a",)), ConfigurationVector(("b",))])
    led.record(np.array([3.0, 2.5]), 2.8)
    gamma, series = regret(led)
    assert gamma == pytest.approx(0.2)
    assert series == [pytest.approx(0.2)]


def test_regret_zero_and_negative():
    led = RegretLedger([ConfigurationVector(("a",)), ConfigurationVector(("b",))])
    led.record(np.array([-1.0, -2.0]), -1.0)
    assert regret(led)[0] == 0.0
    led.record(np.array([-1.0, 0.0]), 0.0)
    assert regret(led)[0] == -1.0
    assert led.contextual_regret == 0.0


def test_regret_of_empty_ledger_fails():
    with pytest.raises(ValueError):
        regret(RegretLedger([]))


def test_universe_enumeration_and_sampling():
    env = canonical_environment()
    full, approx = static_universe(env)
    assert len(full) == 8 and not approx
    sampled, approx = static_universe(env, cap=4, n_sample=3, seed=0)
    assert approx
    assert len(sampled) == 5
    assert cheapest_config(env.program, env.registry) in sampled
    assert most_expensive_config(env.program, env.registry) in sampled


def test_crn_replay_reproduces_counterfactual_sums():
    env = mixed_environment(seed=6)
    res = run_stream(env, learned_policy(env, seed=6), 300)
    for k, v in enumerate(res.ledger.universe):
        replay = run_stream(env, StaticPolicy(v), 300, ledger=False)
        assert sum(r.reward for r in replay.episodes) == res.ledger.cumulative[k]


def test_ledger_tracks_reward_range_and_snapshots():
    env = canonical_environment(seed=0)
    universe, approx = static_universe(env)
    led = RegretLedger(universe, approx, checkpoints=(10, 20))
    run_stream(env, cheapest(env), 20, ledger=led)
    assert set(led.snapshots) == {10, 20}
    assert led.r_min <= led.r_max <= 0.0


# routing ------------------------------------------------------------------


def _routing_env(arms, seed=0):
    return RoutingEnvironment(canonical_environment(seed, 0.3), arms)


def test_routing_single_arm():
    arms = [BackendSpec("only", "answer", 0.5, SyntheticBehavior(0.9))]
    env = _routing_env(arms)
    res = run_stream(env, routing_policy([("only", 0.5)], 16, seed=0), 100, ledger=False)
    assert {r.config.choices for r in res.episodes} == {("only",)}


def test_routing_picks_dominant_arm():
    arms = [
        BackendSpec("weak", "answer", 0.5, SyntheticBehavior(0.9)),
        BackendSpec("strong", "answer", 0.1, SyntheticBehavior(0.99)),
    ]
    for seed in range(3):
        env = _routing_env(arms, seed)
        pol = routing_policy([(a.id, a.cost) for a in arms], 16, seed=seed)
        res = run_stream(env, pol, 2000, ledger=False)
        late = [r.config[0] == "strong" for r in res.episodes[-500:]]
        assert np.mean(late) > 0.9


def test_routing_equal_arms_is_symmetric_in_aggregate():
    # 50 independent streams of 200 episodes = 10,000 decisions
    arms = [
        BackendSpec("a", "answer", 0.5, SyntheticBehavior(0.9)),
        BackendSpec("b", "answer", 0.5, SyntheticBehavior(0.9)),
    ]
    picks = 0
    for seed in range(50):
        env = _routing_env(arms, seed)
        res = run_stream(env, routing_policy([("a", 0.5), ("b", 0.5)], 16, seed=seed), 200, ledger=False)
        picks += sum(r.config[0] == "a" for r in res.episodes)
    assert abs(picks / 10_000 - 0.5) <= 0.05


def test_routing_requires_arms():
    with pytest.raises(ValueError):
        routing_policy([], 16)


def test_routing_env_truth_is_the_program_label():
    base = canonical_environment(seed=0)
    env = _routing_env([BackendSpec("o", "answer", 1.0, SyntheticBehavior(1.0))])
    for t in range(1, 200):
        assert env.label(env.sample(t)) == base.label(base.sample(t))
