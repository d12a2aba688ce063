from __future__ import annotations

import numpy as np
import pytest

from fmalloc.envs import (
    CANONICAL_PROGRAM,
    canonical_config,
    canonical_environment,
    environment_from_dict,
    mixed_environment,
)


def test_inputs_are_a_pure_function_of_seed_and_t():
    a, b = canonical_environment(seed=3), canonical_environment(seed=3)
    for t in (1, 7, 1000, 7):
        sa, sb = a.sample(t), b.sample(t)
        assert np.array_equal(sa.features, sb.features)
        assert sa.truth == sb.truth
    assert not np.array_equal(a.sample(1).features, canonical_environment(seed=4).sample(1).features)


def test_canonical_positive_rate_is_one_percent():
    env = canonical_environment(seed=0)
    labels = [env.label(env.sample(t)) for t in range(1, 40_001)]
    rate = np.mean([y == "yes" for y in labels])
    assert abs(rate - 0.01) < 0.002


def test_canonical_features_carry_guard_signal():
    env = canonical_environment(seed=0)
    cats = [(env.sample(t).features[0], env.sample(t).truth.values[1]) for t in range(1, 3000)]
    with_cat = np.mean([f for f, c in cats if c])
    without = np.mean([f for f, c in cats if not c])
    assert with_cat - without > 1.5


def test_canonical_costs_are_normalized():
    env = canonical_environment()
    costs = {b: env.registry.cost(b) for b in env.registry.backends}
    assert max(costs.values()) == 1.0
    assert costs["find_tiny"] == 0.01


def test_lambda_must_be_positive():
    with pytest.raises(ValueError):
        canonical_environment(lam=0.0)


def test_unknown_environment_keys_are_errors():
    cfg = canonical_config()
    cfg["backend"] = []
    with pytest.raises(ValueError, match="unknown keys"):
        environment_from_dict(cfg, CANONICAL_PROGRAM, 0.3, 0)


def test_truth_must_cover_every_site():
    cfg = canonical_config()
    cfg["generator"]["scenarios"][0]["truth"] = [True, True]
    with pytest.raises(ValueError):
        environment_from_dict(cfg, CANONICAL_PROGRAM, 0.3, 0)


def test_with_lambda_and_seed_keep_everything_else():
    env = canonical_environment(seed=1, lam=0.3)
    other = env.with_lambda(1.0).with_seed(2)
    assert other.lam == 1.0 and other.seed == 2
    assert other.program == env.program


def test_mixed_environment_best_static_config_is_mixed():
    from fmalloc.harness import RegretLedger, static_universe

    env = mixed_environment(seed=0)
    universe, _ = static_universe(env)
    led = RegretLedger(universe)
    for t in range(1, 2001):
        s = env.sample(t)
        led.update(env, s, env.label(s), 0.0)
    best = universe[led.best_index].choices
    assert best == ("count_large", "find_small", "vqa_small")
