"""Synthetic streaming environments.

An environment bundles a program, a backend registry and an i.i.d. input
generator.  Inputs are drawn from a weighted list of *scenarios*; each
scenario fixes the latent per-site truth and shifts a few feature
dimensions, so features carry (noisy) information about the truth.  Input
``t`` is a pure function of ``(seed, t)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backends import BackendRegistry, BackendSpec, LatentTruth, RemoteEndpoint, SyntheticBehavior, normalized_cost
from .dsl import GenericFunction, ProgramIR, default_functions, parse_program, validate_program
from .executor import ExecutionTrace, ProgramInput, execute, ground_truth_output

DEFAULT_WRONG = {"yes": "no", "no": "yes"}
_INPUT_STREAM = 104729


@dataclass(frozen=True)
class Scenario:
    weight: float
    truth: tuple
    shift: tuple = ()  # (dimension, offset) pairs
    wrong: tuple = ()  # per-site wrong answer overrides; None keeps the default rule


@dataclass(frozen=True)
class ScenarioGenerator:
    feature_dim: int
    scenarios: tuple
    difficulty: tuple = (0.0, 1.0)
    noise: float = 1.0
    wrong_answers: dict = field(default_factory=lambda: dict(DEFAULT_WRONG))

    def __post_init__(self):
        if not self.scenarios:
            raise ValueError("generator needs at least one scenario")
        total = sum(s.weight for s in self.scenarios)
        if total <= 0 or any(s.weight < 0 for s in self.scenarios):
            raise ValueError("scenario weights must be nonnegative with a positive sum")
        for s in self.scenarios:
            for dim, _ in s.shift:
                if not 0 <= dim < self.feature_dim:
                    raise ValueError(f"feature shift dimension {dim} out of range")

    @property
    def probabilities(self) -> np.ndarray:
        w = np.array([s.weight for s in self.scenarios], dtype=float)
        return w / w.sum()

    def draw(self, seed: int, t: int):
        """(features, truth, scenario index) for input ``t``."""
        rng = np.random.default_rng([seed, _INPUT_STREAM, t])
        k = int(rng.choice(len(self.scenarios), p=self.probabilities))
        sc = self.scenarios[k]
        x = rng.standard_normal(self.feature_dim) * self.noise
        for dim, off in sc.shift:
            x[dim] += off
        lo, hi = self.difficulty
        diff = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
        values = {i + 1: v for i, v in enumerate(sc.truth)}
        wrong = {}
        for i, v in enumerate(sc.truth):
            override = sc.wrong[i] if i < len(sc.wrong) else None
            if override is not None:
                wrong[i + 1] = override
            elif isinstance(v, str) and v in self.wrong_answers:
                wrong[i + 1] = self.wrong_answers[v]
        return x, LatentTruth(values, diff, wrong), k


@dataclass(frozen=True)
class Sample:
    t: int
    x: ProgramInput
    truth: LatentTruth = field(repr=False)
    scenario: int = 0

    @property
    def features(self) -> np.ndarray:
        return self.x.features


class Environment:
    def __init__(
        self,
        program: ProgramIR,
        registry: BackendRegistry,
        generator: ScenarioGenerator,
        lam: float,
        seed: int = 0,
        correlated: bool = False,
        positive_label="yes",
        name: str = "env",
    ):
        if not lam > 0:
            raise ValueError("trade-off weight lambda must be > 0")
        for sc in generator.scenarios:
            if len(sc.truth) != program.n_sites:
                raise ValueError(f"scenario truth covers {len(sc.truth)} sites, program has {program.n_sites}")
        for site in program.call_sites:
            if registry.n_backends(site.function_id) == 0:
                raise ValueError(f"no backend registered for {site.function_id!r} (site {site.index})")
        self.program = program
        self.registry = registry
        self.generator = generator
        self.lam = lam
        self.seed = seed
        self.correlated = correlated
        self.positive_label = positive_label
        self.name = name

    @property
    def n_sites(self) -> int:
        return self.program.n_sites

    @property
    def feature_dim(self) -> int:
        return self.generator.feature_dim

    def sample(self, t: int) -> Sample:
        x, truth, k = self.generator.draw(self.seed, t)
        return Sample(t, ProgramInput(f"{self.seed}:{t}", x), truth, k)

    def execute(self, config, sample: Sample) -> ExecutionTrace:
        return execute(
            self.program, config, self.registry, sample.x, sample.truth,
            seed=self.seed, episode=sample.t, correlated=self.correlated,
        )

    def label(self, sample: Sample):
        """Ground truth y_t; the harness only asks after execution."""
        return ground_truth_output(self.program, sample.x, sample.truth)

    def with_lambda(self, lam: float) -> "Environment":
        return Environment(
            self.program, self.registry, self.generator, lam, self.seed, self.correlated, self.positive_label, self.name
        )

    def with_seed(self, seed: int) -> "Environment":
        return Environment(
            self.program, self.registry, self.generator, self.lam, seed, self.correlated, self.positive_label, self.name
        )

    def site_arms(self) -> list[list[str]]:
        return [self.registry.arms(s.function_id) for s in self.program.call_sites]


ROUTING_SOURCE = 'program route(x):\n  return answer(x, "task")\n'


class RoutingEnvironment(Environment):
    """Same input stream, answered end to end by one monolithic call."""

    def __init__(self, base: Environment, arms):
        registry = BackendRegistry([GenericFunction("answer", 2, "text")])
        for spec in arms:
            registry.register(spec)
        self.base = base
        self.program = parse_program(ROUTING_SOURCE, registry.functions)
        self.registry = registry
        self.generator = base.generator
        self.lam = base.lam
        self.seed = base.seed
        self.correlated = base.correlated
        self.positive_label = base.positive_label
        self.name = base.name + "/routing"
        self._arms = list(arms)

    def sample(self, t: int) -> Sample:
        inner = self.base.sample(t)
        y = self.base.label(inner)
        wrong = {}
        if isinstance(y, str) and y in self.generator.wrong_answers:
            wrong[1] = self.generator.wrong_answers[y]
        truth = LatentTruth({1: y}, inner.truth.difficulty, wrong)
        return Sample(t, inner.x, truth, inner.scenario)

    def with_lambda(self, lam: float) -> "RoutingEnvironment":
        return RoutingEnvironment(self.base.with_lambda(lam), self._arms)

    def with_seed(self, seed: int) -> "RoutingEnvironment":
        return RoutingEnvironment(self.base.with_seed(seed), self._arms)


# ---------------------------------------------------------------------------
# Construction from plain dicts (the JSON config format)


def backend_from_dict(d: dict) -> BackendSpec:
    known = {"id", "function", "cost", "base_accuracy", "difficulty_slope", "endpoint", "timeout"}
    extra = set(d) - known
    if extra:
        raise ValueError(f"backend {d.get('id')!r}: unknown keys {sorted(extra)}")
    if "endpoint" in d:
        behavior = RemoteEndpoint(d["endpoint"], float(d.get("timeout", 10.0)))
    else:
        behavior = SyntheticBehavior(float(d["base_accuracy"]), float(d.get("difficulty_slope", 0.0)))
    return BackendSpec(d["id"], d.get("function", "answer"), float(d["cost"]), behavior)


def generator_from_dict(d: dict) -> ScenarioGenerator:
    known = {"feature_dim", "scenarios", "difficulty", "noise", "wrong_answers"}
    extra = set(d) - known
    if extra:
        raise ValueError(f"generator: unknown keys {sorted(extra)}")
    scenarios = []
    for s in d["scenarios"]:
        bad = set(s) - {"weight", "truth", "shift", "wrong"}
        if bad:
            raise ValueError(f"scenario: unknown keys {sorted(bad)}")
        scenarios.append(
            Scenario(
                float(s["weight"]),
                tuple(s["truth"]),
                tuple((int(a), float(b)) for a, b in s.get("shift", [])),
                tuple(s.get("wrong", [])),
            )
        )
    return ScenarioGenerator(
        int(d["feature_dim"]),
        tuple(scenarios),
        tuple(float(v) for v in d.get("difficulty", (0.0, 1.0))),
        float(d.get("noise", 1.0)),
        dict(d.get("wrong_answers", DEFAULT_WRONG)),
    )


def registry_from_dict(d: dict) -> BackendRegistry:
    if "functions" in d:
        functions = [GenericFunction(f["name"], int(f["arity"]), f["return_kind"]) for f in d["functions"]]
    else:
        functions = default_functions()
    registry = BackendRegistry(functions)
    for b in d["backends"]:
        registry.register(backend_from_dict(b))
    if d.get("normalize_costs", True):
        registry = normalized_cost(registry)
    return registry


ENV_KEYS = {
    "functions", "backends", "normalize_costs", "generator", "correlated", "positive_label", "routing_arms", "name",
}


def environment_from_dict(d: dict, program_source: str, lam: float, seed: int) -> Environment:
    extra = set(d) - ENV_KEYS
    if extra:
        raise ValueError(f"environment: unknown keys {sorted(extra)}")
    registry = registry_from_dict(d)
    program = parse_program(program_source, registry.functions)
    diags = validate_program(program)
    if diags:
        raise ValueError("program is invalid:\n" + "\n".join(str(x) for x in diags))
    return Environment(
        program,
        registry,
        generator_from_dict(d["generator"]),
        lam,
        seed,
        bool(d.get("correlated", False)),
        d.get("positive_label", "yes"),
        d.get("name", program.name),
    )


def routing_arms_from_dict(d: dict, reference_cost: float = 1.0) -> list[BackendSpec]:
    """Monolithic arms; costs are divided by ``reference_cost`` when normalizing."""
    arms = []
    for a in d.get("routing_arms", []):
        spec = backend_from_dict({**a, "function": "answer"})
        if d.get("normalize_costs", True):
            spec = BackendSpec(spec.id, spec.function_id, spec.cost / reference_cost, spec.behavior)
        arms.append(spec)
    return arms


# ---------------------------------------------------------------------------
# Reference environments

CANONICAL_PROGRAM = """\
# Is there a cat sitting or laying on a laptop keyboard?
program cat_on_laptop(x) default "no":
  cat = find(x, "cat")
  laptop = find(x, "laptop")
  if cat and laptop:
    return vqa(x, "Is the cat sitting or laying on the laptop keyboard?")
  else:
    return "no"
"""


def _guard_scenarios(positive_rate: float, p_first: float, p_second: float, signal: float):
    neg = 1.0 - positive_rate
    s = signal
    return [
        {"weight": positive_rate, "truth": [True, True, "yes"], "shift": [[0, s], [1, s]]},
        {"weight": neg * p_first * p_second, "truth": [True, True, "no"], "shift": [[0, s], [1, s]]},
        {"weight": neg * p_first * (1 - p_second), "truth": [True, False, "no"], "shift": [[0, s], [1, -s]]},
        {"weight": neg * (1 - p_first) * p_second, "truth": [False, True, "no"], "shift": [[0, -s], [1, s]]},
        {"weight": neg * (1 - p_first) * (1 - p_second), "truth": [False, False, "no"], "shift": [[0, -s], [1, -s]]},
    ]


def canonical_config() -> dict:
    """Guard-gated binary task with a 1% positive rate.

    Costs are given in normalized units (the large answer model costs 1.0).
    """
    return {
        "name": "canonical",
        "backends": [
            {"id": "find_tiny", "function": "find", "cost": 0.01, "base_accuracy": 0.95},
            {"id": "find_large", "function": "find", "cost": 0.5, "base_accuracy": 0.99},
            {"id": "vqa_small", "function": "vqa", "cost": 0.1, "base_accuracy": 0.8},
            {"id": "vqa_large", "function": "vqa", "cost": 1.0, "base_accuracy": 0.99},
        ],
        "normalize_costs": True,
        "generator": {
            "feature_dim": 16,
            "difficulty": [0.0, 1.0],
            "scenarios": _guard_scenarios(0.01, 0.1, 0.1, 1.0),
        },
        "positive_label": "yes",
        "routing_arms": [
            {"id": "mllm_small", "cost": 0.05, "base_accuracy": 0.9},
            {"id": "mllm_large", "cost": 1.0, "base_accuracy": 0.99},
        ],
    }


def canonical_environment(seed: int = 0, lam: float = 0.3) -> Environment:
    return environment_from_dict(canonical_config(), CANONICAL_PROGRAM, lam, seed)


MIXED_PROGRAM = """\
# Are at least four horses standing on the beach?
program horses_on_beach(x) default "no":
  horses = count(x, "horse")
  beach = find(x, "beach")
  relation = vqa(x, "Are the horses standing on the beach?")
  if beach and horses >= 4 and relation == "yes":
    return "yes"
  return "no"
"""


def mixed_config() -> dict:
    """Three always-executed sites whose best static choice mixes sizes.

    Miscounting matters (the true count is 3 or 4), so the large counter
    pays for itself while the small detector and small VQA model suffice.
    """
    scenarios = []
    for n in (3, 4):
        for beach in (True, False):
            for rel in ("yes", "no"):
                scenarios.append({
                    "weight": 0.5 * (0.6 if beach else 0.4) * 0.5,
                    "truth": [n, beach, rel],
                    "shift": [[0, n - 3.5], [1, 1.0 if beach else -1.0], [2, 1.0 if rel == "yes" else -1.0]],
                })
    return {
        "name": "mixed",
        "backends": [
            {"id": "count_small", "function": "count", "cost": 0.02, "base_accuracy": 0.3},
            {"id": "count_large", "function": "count", "cost": 0.05, "base_accuracy": 0.9},
            {"id": "find_small", "function": "find", "cost": 0.01, "base_accuracy": 0.9},
            {"id": "find_large", "function": "find", "cost": 0.3, "base_accuracy": 0.95},
            {"id": "vqa_small", "function": "vqa", "cost": 0.1, "base_accuracy": 0.75},
            {"id": "vqa_large", "function": "vqa", "cost": 1.0, "base_accuracy": 0.85},
        ],
        "generator": {"feature_dim": 16, "scenarios": scenarios},
        "positive_label": "yes",
    }


def mixed_environment(seed: int = 0, lam: float = 0.3) -> Environment:
    return environment_from_dict(mixed_config(), MIXED_PROGRAM, lam, seed)
