"""Per-call-site subpolicies.

Each call site owns a small feedforward net mapping input features to one
score per candidate backend.  The scores are used twice:

* as reward predictions for gradient-based Thompson Sampling, where the
  sampling width of arm ``j`` is ``nu * sqrt(sum_l g_jl**2 / U_l)`` with
  ``g_j`` the gradient of score ``j`` w.r.t. the parameters and ``U`` the
  accumulated squared gradients of past selections;
* as logits of a softmax policy trained with REINFORCE on the site's
  sub-reward.

Gradients are computed analytically; no autodiff framework is involved.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from .backends import BackendRegistry
from .dsl import ProgramIR
from .executor import ConfigurationVector, ExecutionTrace


@dataclass
class PolicyHyperparams:
    nu: float = 1.0
    eta0: float = 0.05
    train_interval: int = 16
    samples: int = 16
    replay_capacity: int = 4096
    baseline: bool = False
    hidden: int = 32
    warm_start: bool = True

    def __post_init__(self):
        if self.nu < 0:
            raise ValueError("nu must be >= 0")
        if self.eta0 <= 0:
            raise ValueError("eta0 must be > 0")
        for name in ("train_interval", "samples", "replay_capacity"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.hidden < 0:
            raise ValueError("hidden must be >= 0")


@dataclass
class SubPolicyState:
    arms: tuple
    costs: tuple
    input_dim: int
    hidden: int
    theta: np.ndarray
    U: np.ndarray
    selections: int = 0
    replay: deque = field(default_factory=deque, repr=False)
    baseline_sum: float = 0.0
    baseline_count: int = 0

    @property
    def n_arms(self) -> int:
        return len(self.arms)

    @property
    def baseline(self) -> float:
        return self.baseline_sum / self.baseline_count if self.baseline_count else 0.0


def n_params(input_dim: int, hidden: int, n_arms: int) -> int:
    if hidden == 0:
        return n_arms * input_dim + n_arms
    return hidden * input_dim + hidden + n_arms * hidden + n_arms


def unpack(theta: np.ndarray, input_dim: int, hidden: int, n_arms: int):
    """Views (W1, b1, W2, b2); for a linear net W1/b1 are None."""
    d, h, n = input_dim, hidden, n_arms
    if h == 0:
        W = theta[: n * d].reshape(n, d)
        return None, None, W, theta[n * d : n * d + n]
    o = 0
    W1 = theta[o : o + h * d].reshape(h, d)
    o += h * d
    b1 = theta[o : o + h]
    o += h
    W2 = theta[o : o + n * h].reshape(n, h)
    o += n * h
    return W1, b1, W2, theta[o : o + n]


def init_subpolicy(arms, costs, input_dim: int, hidden: int, rng: np.random.Generator) -> SubPolicyState:
    """Weights uniform in +-1/sqrt(fan_in), zero biases, U = 1."""
    n = len(arms)
    if n < 1:
        raise ValueError("a call site needs at least one candidate backend")
    theta = np.zeros(n_params(input_dim, hidden, n))
    W1, _, W2, _ = unpack(theta, input_dim, hidden, n)
    if hidden == 0:
        W2[...] = rng.uniform(-1.0, 1.0, W2.shape) / math.sqrt(input_dim)
    else:
        W1[...] = rng.uniform(-1.0, 1.0, W1.shape) / math.sqrt(input_dim)
        W2[...] = rng.uniform(-1.0, 1.0, W2.shape) / math.sqrt(hidden)
    return SubPolicyState(tuple(arms), tuple(float(c) for c in costs), input_dim, hidden, theta, np.ones_like(theta))


def _check_x(state: SubPolicyState, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (state.input_dim,):
        raise ValueError(f"expected a feature vector of length {state.input_dim}, got shape {x.shape}")
    return x


def predict_rewards(state: SubPolicyState, x) -> np.ndarray:
    x = _check_x(state, x)
    W1, b1, W2, b2 = unpack(state.theta, state.input_dim, state.hidden, state.n_arms)
    if W1 is None:
        return W2 @ x + b2
    return W2 @ np.tanh(W1 @ x + b1) + b2


def per_arm_gradients(state: SubPolicyState, x) -> np.ndarray:
    """Jacobian of the score vector: row j holds d score_j / d theta."""
    x = _check_x(state, x)
    d, h, n = state.input_dim, state.hidden, state.n_arms
    W1, b1, W2, b2 = unpack(state.theta, d, h, n)
    G = np.zeros((n, state.theta.size))
    rows = np.arange(n)
    if W1 is None:
        for j in range(n):
            G[j, j * d : (j + 1) * d] = x
        G[rows, n * d + rows] = 1.0
        return G
    a = np.tanh(W1 @ x + b1)
    dpre = W2 * (1.0 - a * a)  # (n, h): d score_j / d pre-activation
    o = h * d
    G[:, :o] = (dpre[:, :, None] * x[None, None, :]).reshape(n, o)
    G[:, o : o + h] = dpre
    o += h
    for j in range(n):
        G[j, o + j * h : o + (j + 1) * h] = a
    o += n * h
    G[rows, o + rows] = 1.0
    return G


def uncertainty_sigma(g_row, U) -> float:
    g_row = np.asarray(g_row, dtype=float)
    U = np.asarray(U, dtype=float)
    if g_row.shape != U.shape:
        raise ValueError("gradient and uncertainty vectors differ in length")
    if np.any(U <= 0):
        raise ValueError("uncertainty accumulator must be strictly positive")
    return float(np.sqrt(np.sum(g_row * g_row / U)))


def arm_sigmas(G: np.ndarray, U: np.ndarray) -> np.ndarray:
    return np.sqrt((G * G / U).sum(axis=1))


def thompson_select(scores, sigmas, nu: float, rng: np.random.Generator, costs=None) -> int:
    """Draw r_hat_j ~ N(score_j, (nu * sigma_j)^2) and return the argmax.

    Ties go to the cheaper arm, then to the lower index.
    """
    scores = np.asarray(scores, dtype=float)
    sigmas = np.asarray(sigmas, dtype=float)
    if scores.size == 0:
        raise ValueError("no arms to select from")
    if scores.shape != sigmas.shape:
        raise ValueError("scores and sigmas differ in length")
    sampled = scores + nu * sigmas * rng.standard_normal(scores.size)
    best = np.flatnonzero(sampled == sampled.max())
    if best.size == 1 or costs is None:
        return int(best[0])
    return int(min(best, key=lambda j: (costs[j], j)))


def update_uncertainty(U, g_selected) -> np.ndarray:
    U = np.asarray(U, dtype=float)
    g = np.asarray(g_selected, dtype=float)
    if U.shape != g.shape:
        raise ValueError("gradient and uncertainty vectors differ in length")
    return U + g * g


def softmax(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=float)
    z = np.exp(s - s.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def log_policy_gradient(state: SubPolicyState, x, arm: int) -> np.ndarray:
    """d log softmax(scores)[arm] / d theta."""
    G = per_arm_gradients(state, x)
    coef = -softmax(predict_rewards(state, x))
    coef[arm] += 1.0
    return coef @ G


def sub_rewards(trace: ExecutionTrace, loss_value: float, lam: float, n_sites: int) -> list[float]:
    """Per-site share of the reward: -lam * (cost incurred at the site) - loss / N."""
    share = loss_value / n_sites
    return [-lam * c - share for c in trace.per_site_cost]


def _batch_gradient(state: SubPolicyState, X: np.ndarray, arms: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """sum_b weights_b * d log pi(arms_b | X_b) / d theta, by backpropagation."""
    d, h, n = state.input_dim, state.hidden, state.n_arms
    W1, b1, W2, b2 = unpack(state.theta, d, h, n)
    B = X.shape[0]
    if W1 is None:
        S = X @ W2.T + b2
    else:
        A = np.tanh(X @ W1.T + b1)
        S = A @ W2.T + b2
    C = -softmax(S)
    C[np.arange(B), arms] += 1.0
    C *= weights[:, None]  # (B, n): d objective / d scores
    grad = np.empty_like(state.theta)
    gW1, gb1, gW2, gb2 = unpack(grad, d, h, n)
    if W1 is None:
        gW2[...] = C.T @ X
        gb2[...] = C.sum(axis=0)
        return grad
    gW2[...] = C.T @ A
    gb2[...] = C.sum(axis=0)
    delta = (C @ W2) * (1.0 - A * A)
    gW1[...] = delta.T @ X
    gb1[...] = delta.sum(axis=0)
    return grad


def reinforce_update(state: SubPolicyState, batch, eta: float, baseline_enabled: bool = False) -> SubPolicyState:
    """One ascent step on sum_b grad log pi(j_b | x_b) * r_b.

    ``batch`` is a sequence of ``(x, arm, reward)``.  With the baseline
    enabled the site's running mean reward is subtracted first.
    """
    if len(batch) == 0:
        return state
    X = np.asarray([b[0] for b in batch], dtype=float)
    arms = np.asarray([b[1] for b in batch], dtype=int)
    r = np.asarray([b[2] for b in batch], dtype=float)
    if baseline_enabled:
        r = r - state.baseline
    if not np.any(r):
        return state
    state.theta += eta * _batch_gradient(state, X, arms, r)
    return state


class StructuredPolicy:
    """One subpolicy per call site, trained from the decomposed global reward."""

    learns = True

    def __init__(self, sites, input_dim: int, hyper: PolicyHyperparams | None = None, seed: int = 0, name="structured"):
        self.hyper = hyper or PolicyHyperparams()
        self.input_dim = input_dim
        self.name = name
        self.seed = seed
        self.rng = np.random.default_rng([seed, 7919])
        self.sites = [init_subpolicy(arms, costs, input_dim, self.hyper.hidden, self.rng) for arms, costs in sites]
        for s in self.sites:
            s.replay = deque(maxlen=self.hyper.replay_capacity)
        self.episodes = 0
        self.arm_evaluations = 0
        self._last: list[int] = []

    @classmethod
    def for_program(cls, ir: ProgramIR, registry: BackendRegistry, input_dim: int, hyper=None, seed=0, name="structured"):
        sites = []
        for site in ir.call_sites:
            arms = registry.arms(site.function_id)
            sites.append((arms, [registry.cost(a) for a in arms]))
        return cls(sites, input_dim, hyper, seed, name)

    def select(self, x, t: int | None = None) -> ConfigurationVector:
        idx = select_configuration(self, x)
        self._last = idx
        return ConfigurationVector(tuple(s.arms[j] for s, j in zip(self.sites, idx)))

    def observe(self, x, config, rewards, t: int) -> None:
        """Store per-site samples and train every ``train_interval`` episodes."""
        x = np.asarray(x, dtype=float)
        idx = [s.arms.index(b) for s, b in zip(self.sites, config)]
        for s, j, r in zip(self.sites, idx, rewards):
            s.replay.append((x, j, float(r)))
            s.baseline_sum += float(r)
            s.baseline_count += 1
        self.episodes += 1
        if self.episodes % self.hyper.train_interval == 0:
            self.train(self.episodes)

    def train(self, t: int) -> None:
        eta = self.hyper.eta0 / math.sqrt(t)
        want = self.hyper.samples * self.hyper.train_interval
        for s in self.sites:
            size = min(want, len(s.replay))
            picks = self.rng.choice(len(s.replay), size=size, replace=False)
            batch = [s.replay[i] for i in sorted(picks)]
            reinforce_update(s, batch, eta, self.hyper.baseline)

    # checkpointing -------------------------------------------------------

    def to_json(self) -> dict:
        out = {}
        for i, s in enumerate(self.sites, start=1):
            out[str(i)] = {
                "arms": list(s.arms),
                "costs": list(s.costs),
                "theta": s.theta.tolist(),
                "U": s.U.tolist(),
                "hyperparams": asdict(self.hyper),
                "episode_count": self.episodes,
                "input_dim": s.input_dim,
                "selections": s.selections,
                "baseline": [s.baseline_sum, s.baseline_count],
                "replay": [[xx.tolist(), j, r] for xx, j, r in s.replay],
                "rng_state": self.rng.bit_generator.state,
            }
        return out

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def from_json(cls, data: dict, seed: int = 0, name="structured") -> "StructuredPolicy":
        entries = [data[k] for k in sorted(data, key=int)]
        first = entries[0]
        hyper = PolicyHyperparams(**first["hyperparams"])
        policy = cls([(e["arms"], e["costs"]) for e in entries], first["input_dim"], hyper, seed, name)
        for s, e in zip(policy.sites, entries):
            s.theta = np.asarray(e["theta"], dtype=float)
            s.U = np.asarray(e["U"], dtype=float)
            s.selections = e.get("selections", 0)
            s.baseline_sum, s.baseline_count = e.get("baseline", [0.0, 0])
            s.replay = deque(
                ((np.asarray(xx, dtype=float), j, r) for xx, j, r in e.get("replay", [])),
                maxlen=hyper.replay_capacity,
            )
        policy.episodes = first["episode_count"]
        if "rng_state" in first:
            policy.rng.bit_generator.state = first["rng_state"]
        return policy

    @classmethod
    def load(cls, path, seed: int = 0) -> "StructuredPolicy":
        with open(path) as fh:
            return cls.from_json(json.load(fh), seed)


def select_configuration(policy, x, nu: float | None = None, rng=None) -> list[int]:
    """Pick one arm per site and fold each pick's gradient into that site's U.

    Only ``sum_i n_i`` arm scores are evaluated, one network pass per site.
    Returns the chosen arm index for each site.
    """
    sites = policy.sites if hasattr(policy, "sites") else policy
    hyper = getattr(policy, "hyper", None)
    nu = nu if nu is not None else hyper.nu
    rng = rng if rng is not None else policy.rng
    warm = hyper.warm_start if hyper is not None else False
    x = np.asarray(x, dtype=float)
    chosen = []
    for s in sites:
        scores = predict_rewards(s, x)
        G = per_arm_gradients(s, x)
        if hasattr(policy, "arm_evaluations"):
            policy.arm_evaluations += scores.size
        sig = arm_sigmas(G, s.U)
        j = thompson_select(scores, sig, nu, rng, s.costs)
        if warm and s.selections < s.n_arms:
            j = s.selections  # visit every arm once before trusting the scores
        s.U = update_uncertainty(s.U, G[j])
        s.selections += 1
        chosen.append(j)
    return chosen
