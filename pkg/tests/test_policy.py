from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fmalloc.executor import ExecutionTrace
from fmalloc.policy import (
    PolicyHyperparams,
    StructuredPolicy,
    SubPolicyState,
    _batch_gradient,
    init_subpolicy,
    log_policy_gradient,
    n_params,
    per_arm_gradients,
    predict_rewards,
    reinforce_update,
    select_configuration,
    softmax,
    sub_rewards,
    thompson_select,
    uncertainty_sigma,
    unpack,
    update_uncertainty,
)


def _state(d=4, h=5, n=3, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    st_ = init_subpolicy([f"a{j}" for j in range(n)], [0.1 * (j + 1) for j in range(n)], d, h, rng)
    st_.theta = rng.normal(0, scale, st_.theta.size)
    return st_


def _forward_loops(theta, x, d, h, n):
    """Second, loop-based implementation of the score network."""
    if h == 0:
        return [sum(theta[j * d + i] * x[i] for i in range(d)) + theta[n * d + j] for j in range(n)]
    hidden = []
    for k in range(h):
        pre = sum(theta[k * d + i] * x[i] for i in range(d)) + theta[h * d + k]
        hidden.append(math.tanh(pre))
    o = h * d + h
    return [sum(theta[o + j * h + k] * hidden[k] for k in range(h)) + theta[o + n * h + j] for j in range(n)]


def test_zero_weights_give_zero_scores():
    s = _state()
    s.theta[:] = 0.0
    assert np.all(predict_rewards(s, np.arange(4.0)) == 0.0)


def test_linear_identity_net():
    s = init_subpolicy(["a", "b"], [0.1, 0.2], 2, 0, np.random.default_rng(0))
    s.theta[:] = [1, 0, 0, 1, 0, 0]
    assert predict_rewards(s, np.array([2.0, 3.0])).tolist() == [2.0, 3.0]


@pytest.mark.parametrize("h", [0, 5])
def test_forward_matches_independent_implementation(h):
    rng = np.random.default_rng(11)
    for _ in range(20):
        s = _state(d=4, h=h, n=3, seed=int(rng.integers(1 << 30)))
        x = rng.normal(size=4)
        assert predict_rewards(s, x) == pytest.approx(_forward_loops(s.theta, x, 4, h, 3), abs=1e-12)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        predict_rewards(_state(), np.zeros(3))
    with pytest.raises(ValueError):
        per_arm_gradients(_state(), np.zeros(5))


def test_linear_gradient_structure():
    s = _state(d=3, h=0, n=2)
    x = np.array([0.5, -1.0, 2.0])
    G = per_arm_gradients(s, x)
    W_rows = G[:, :6].reshape(2, 2, 3)
    assert np.array_equal(W_rows[0, 0], x) and np.all(W_rows[0, 1] == 0)
    assert np.array_equal(W_rows[1, 1], x) and np.all(W_rows[1, 0] == 0)


def test_zero_input_kills_input_weight_gradients():
    s = _state(d=4, h=5, n=3)
    _, b1, _, _ = unpack(s.theta, 4, 5, 3)
    b1[:] = 0.0
    G = per_arm_gradients(s, np.zeros(4))
    assert np.all(G[:, : 5 * 4] == 0.0)


def _fd_jacobian(f, theta, eps=1e-5):
    cols = []
    for l in range(theta.size):
        tp, tm = theta.copy(), theta.copy()
        tp[l] += eps
        tm[l] -= eps
        cols.append((f(tp) - f(tm)) / (2 * eps))
    return np.stack(cols, axis=-1)


def _rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b)))


@pytest.mark.parametrize("h", [0, 6])
def test_gradients_match_finite_differences(h):
    rng = np.random.default_rng(5)
    for _ in range(10):
        s = _state(d=4, h=h, n=3, seed=int(rng.integers(1 << 30)))
        x = rng.normal(size=4)

        def scores(th):
            return predict_rewards(SubPolicyState(s.arms, s.costs, 4, h, th, s.U), x)

        assert _rel_err(per_arm_gradients(s, x), _fd_jacobian(scores, s.theta)) <= 1e-4
        arm = int(rng.integers(3))
        lp = _fd_jacobian(lambda th: np.log(softmax(scores(th)))[arm], s.theta)
        assert _rel_err(log_policy_gradient(s, x, arm), lp) <= 1e-4


def test_batch_gradient_equals_sum_of_sample_gradients():
    rng = np.random.default_rng(2)
    s = _state(d=4, h=6, n=3)
    X = rng.normal(size=(9, 4))
    arms = rng.integers(0, 3, 9)
    r = rng.normal(size=9)
    expected = sum(r[b] * log_policy_gradient(s, X[b], int(arms[b])) for b in range(9))
    assert _batch_gradient(s, X, arms, r) == pytest.approx(expected, abs=1e-12)


# uncertainty ------------------------------------------------------------


def test_sigma_arithmetic():
    assert uncertainty_sigma([2.0, 0.0], [4.0, 1.0]) == 1.0
    assert uncertainty_sigma([0.0, 0.0, 0.0], [1.0, 2.0, 3.0]) == 0.0


def test_sigma_shrinks_as_u_grows():
    g = np.array([1.0, -2.0, 0.5])
    vals = [uncertainty_sigma(g, np.full(3, u)) for u in (1, 10, 1e3, 1e9)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 1e-4


def test_sigma_rejects_nonpositive_u():
    with pytest.raises(ValueError):
        uncertainty_sigma([1.0], [0.0])
    with pytest.raises(ValueError):
        uncertainty_sigma([1.0, 2.0], [1.0])


def test_update_uncertainty_examples():
    assert update_uncertainty([1.0, 1.0], [0.5, 2.0]).tolist() == [1.25, 5.0]
    assert update_uncertainty([3.0, 4.0], [0.0, 0.0]).tolist() == [3.0, 4.0]
    U = np.ones(2)
    g = np.array([1.0, 3.0])
    for k in range(1, 6):
        U = update_uncertainty(U, g)
        assert U.tolist() == [1 + k * 1.0, 1 + k * 9.0]
    with pytest.raises(ValueError):
        update_uncertainty([1.0], [1.0, 2.0])


@settings(max_examples=100, deadline=None)
@given(
    g=st.lists(st.floats(-10, 10), min_size=1, max_size=8),
    data=st.data(),
)
def test_sigma_monotone_under_u_increments(g, data):
    U = np.array(data.draw(st.lists(st.floats(0.01, 100), min_size=len(g), max_size=len(g))))
    inc = np.array(data.draw(st.lists(st.floats(0, 100), min_size=len(g), max_size=len(g))))
    assert uncertainty_sigma(g, U + inc) <= uncertainty_sigma(g, U) + 1e-12


# Thompson sampling ------------------------------------------------------


def test_greedy_when_nu_zero():
    rng = np.random.default_rng(0)
    assert all(thompson_select([0.3, 0.5], [1.0, 1.0], 0.0, rng) == 1 for _ in range(100))


def test_ties_go_to_cheaper_arm():
    rng = np.random.default_rng(0)
    assert thompson_select([0.4, 0.4], [1.0, 1.0], 0.0, rng, costs=(0.2, 0.1)) == 1
    assert thompson_select([0.4, 0.4, 0.4], [1.0] * 3, 0.0, rng, costs=(0.3, 0.1, 0.1)) == 1
    assert thompson_select([0.4, 0.4], [1.0, 1.0], 0.0, rng) == 0


def test_symmetric_arms_split_evenly():
    rng = np.random.default_rng(123)
    picks = [thompson_select([0.0, 0.0], [1.0, 1.0], 1.0, rng) for _ in range(10_000)]
    assert abs(np.mean(picks) - 0.5) <= 0.02


def test_empty_arm_list():
    with pytest.raises(ValueError):
        thompson_select([], [], 1.0, np.random.default_rng(0))


def test_shift_invariance():
    base = np.array([0.1, -0.3, 0.2, 0.0])
    sig = np.array([0.5, 1.0, 0.2, 0.7])
    a = np.random.default_rng(9)
    b = np.random.default_rng(9)
    for _ in range(500):
        assert thompson_select(base, sig, 1.0, a) == thompson_select(base + 17.0, sig, 1.0, b)
    assert softmax(base) == pytest.approx(softmax(base + 17.0), abs=1e-15)


def test_softmax_normalization():
    rng = np.random.default_rng(1)
    for _ in range(200):
        p = softmax(rng.normal(0, 20, size=int(rng.integers(1, 9))))
        assert abs(p.sum() - 1.0) <= 1e-12


# configuration selection ------------------------------------------------


def _policy(nu=1.0, seed=0, arms=(2, 2, 2), d=4, warm=False):
    sites = [([f"s{i}a{j}" for j in range(n)], [0.1 * (j + 1) for j in range(n)]) for i, n in enumerate(arms)]
    return StructuredPolicy(sites, d, PolicyHyperparams(nu=nu, hidden=8, warm_start=warm), seed)


def test_selection_shape():
    pol = _policy()
    cfg = pol.select(np.ones(4))
    assert len(cfg) == 3
    assert [c[:2] for c in cfg] == ["s0", "s1", "s2"]


def test_nu_zero_is_per_site_greedy():
    pol = _policy(nu=0.0)
    x = np.random.default_rng(3).normal(size=4)
    expected = [int(np.argmax(predict_rewards(s, x))) for s in pol.sites]
    assert select_configuration(pol, x) == expected


def test_selection_updates_u_with_selected_gradient():
    pol = _policy(nu=0.0)
    x = np.random.default_rng(4).normal(size=4)
    before = [s.U.copy() for s in pol.sites]
    grads = [per_arm_gradients(s, x) for s in pol.sites]
    idx = select_configuration(pol, x)
    for s, U0, G, j in zip(pol.sites, before, grads, idx):
        assert s.U == pytest.approx(U0 + G[j] ** 2)


def test_arm_evaluations_count_is_additive():
    pol = _policy(arms=(4, 4, 4))
    for t in range(10):
        pol.select(np.ones(4))
    assert pol.arm_evaluations == 10 * 12


def test_warm_start_visits_every_arm_first():
    pol = _policy(nu=0.0, arms=(3, 2), warm=True)
    picks = [select_configuration(pol, np.ones(4)) for _ in range(3)]
    assert [p[0] for p in picks] == [0, 1, 2]
    assert [p[1] for p in picks[:2]] == [0, 1]


# sub-rewards and learning -----------------------------------------------


def _trace(costs):
    return ExecutionTrace("x", tuple(1 if c else 0 for c in costs), tuple(costs), sum(costs))


def test_sub_reward_examples():
    r = sub_rewards(_trace([0.02, 0.02]), 1.0, 0.5, 2)
    assert r == pytest.approx([-0.51, -0.51])
    assert sum(r) == pytest.approx(-1.02)
    assert sub_rewards(_trace([0.01, 0.0]), 1.0, 0.3, 2)[1] == -0.5
    assert sub_rewards(_trace([0.0, 0.0, 0.0]), 0.0, 0.3, 3) == [0.0, 0.0, 0.0]


def test_closed_form_softmax_gradient():
    s = init_subpolicy(["a", "b"], [0.1, 0.2], 2, 0, np.random.default_rng(0))
    s.theta[:] = 0.0
    x = np.array([1.0, 2.0])
    G = per_arm_gradients(s, x)
    dscores = np.array([0.5, -0.5])
    assert log_policy_gradient(s, x, 0) == pytest.approx(dscores @ G)
    reinforce_update(s, [(x, 0, 1.0)], 0.1, False)
    W, b = s.theta[:4].reshape(2, 2), s.theta[4:]
    assert W[0] == pytest.approx(0.05 * x)
    assert W[1] == pytest.approx(-0.05 * x)
    assert b == pytest.approx([0.05, -0.05])


def test_zero_rewards_leave_theta_unchanged():
    s = _state()
    before = s.theta.copy()
    reinforce_update(s, [(np.ones(4), 1, 0.0), (np.zeros(4), 2, 0.0)], 0.5)
    assert np.array_equal(s.theta, before)
    reinforce_update(s, [], 0.5)
    assert np.array_equal(s.theta, before)


def test_baseline_is_subtracted():
    s = _state(d=2, h=0, n=2)
    s.baseline_sum, s.baseline_count = 2.0, 2  # running mean 1.0
    before = s.theta.copy()
    reinforce_update(s, [(np.ones(2), 0, 1.0)], 0.5, baseline_enabled=True)
    assert np.array_equal(s.theta, before)


def test_two_arm_bandit_converges():
    # tabular policy: constant feature, rewards fixed at (1, 0), step 1/sqrt(t)
    rng = np.random.default_rng(0)
    s = init_subpolicy(["good", "bad"], [0.0, 0.0], 1, 0, rng)
    s.theta[:] = 0.0
    x = np.ones(1)
    for t in range(1, 2001):
        p = softmax(predict_rewards(s, x))
        arm = int(rng.choice(2, p=p))
        reinforce_update(s, [(x, arm, 1.0 if arm == 0 else 0.0)], 1.0 / math.sqrt(t))
    assert softmax(predict_rewards(s, x))[0] > 0.95


def test_training_schedule_runs_every_interval():
    pol = _policy(arms=(2,))
    pol.hyper.train_interval = 4
    thetas = []
    for t in range(1, 9):
        x = np.ones(4)
        cfg = pol.select(x, t)
        pol.observe(x, cfg, [-0.5], t)
        thetas.append(pol.sites[0].theta.copy())
    changed = [not np.array_equal(a, b) for a, b in zip(thetas, thetas[1:])]
    assert changed == [False, False, True, False, False, False, True]


def test_hyperparameter_validation():
    with pytest.raises(ValueError):
        PolicyHyperparams(nu=-1)
    with pytest.raises(ValueError):
        PolicyHyperparams(eta0=0)
    with pytest.raises(ValueError):
        PolicyHyperparams(train_interval=0)


def test_parameter_count():
    assert n_params(16, 32, 2) == 16 * 32 + 32 + 2 * 32 + 2
    assert n_params(3, 0, 2) == 8


def test_checkpoint_resume_is_bit_identical(tmp_path):
    rng = np.random.default_rng(8)
    xs = rng.normal(size=(120, 4))
    rewards = rng.normal(size=(120, 3))

    def drive(pol, lo, hi):
        out = []
        for t in range(lo, hi):
            cfg = pol.select(xs[t], t + 1)
            pol.observe(xs[t], cfg, list(rewards[t]), t + 1)
            out.append(tuple(cfg))
        return out

    full = _policy(seed=3)
    straight = drive(full, 0, 120)

    first = _policy(seed=3)
    head = drive(first, 0, 50)
    path = tmp_path / "ckpt.json"
    first.save(path)
    resumed = StructuredPolicy.load(path, seed=3)
    tail = drive(resumed, 50, 120)
    assert head + tail == straight
    for a, b in zip(full.sites, resumed.sites):
        assert np.array_equal(a.theta, b.theta) and np.array_equal(a.U, b.U)


def test_checkpoint_layout(tmp_path):
    pol = _policy()
    pol.select(np.ones(4))
    data = pol.to_json()
    assert sorted(data) == ["1", "2", "3"]
    entry = data["1"]
    for key in ("arms", "theta", "U", "hyperparams", "episode_count"):
        assert key in entry
    assert len(entry["theta"]) == len(entry["U"])
