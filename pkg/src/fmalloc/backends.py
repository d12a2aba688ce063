"""Backend registry, cost model and simulated backend behaviour.

Synthetic backends are deterministic given ``(seed, episode, site, backend)``:
the correct/incorrect coin comes from a keyed hash rather than a stateful RNG,
so every configuration evaluated on the same episode sees the same draws
(common random numbers).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Union

from .dsl import CallSite, GenericFunction, function_table


class RegistryError(ValueError):
    pass


class MissingTruthError(KeyError):
    pass


@dataclass(frozen=True)
class SyntheticBehavior:
    base_accuracy: float
    difficulty_slope: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.base_accuracy <= 1.0:
            raise ValueError(f"base_accuracy must be in [0, 1], got {self.base_accuracy}")
        if self.difficulty_slope < 0:
            raise ValueError("difficulty_slope must be >= 0")

    def accuracy(self, difficulty: float) -> float:
        if self.base_accuracy >= 1.0:
            return 1.0
        if self.base_accuracy <= 0.0:
            return 0.0
        logit = math.log(self.base_accuracy / (1.0 - self.base_accuracy))
        z = logit - self.difficulty_slope * difficulty
        if z >= 0:
            return 1.0 / (1.0 + math.exp(-z))
        ez = math.exp(z)
        return ez / (1.0 + ez)


@dataclass(frozen=True)
class RemoteEndpoint:
    url: str
    timeout: float = 10.0


@dataclass(frozen=True)
class BackendSpec:
    id: str
    function_id: str
    cost: float
    behavior: Union[SyntheticBehavior, RemoteEndpoint]


@dataclass(frozen=True)
class LatentTruth:
    """Per-site ground truth for one input, plus the typed wrong answers."""

    values: dict
    difficulty: float = 0.0
    wrong: dict = field(default_factory=dict)


class BackendRegistry:
    """Generic functions and the backends implementing each of them."""

    def __init__(self, functions=()):
        self.functions: dict[str, GenericFunction] = function_table(list(functions))
        self.backends: dict[str, BackendSpec] = {}
        self._by_function: dict[str, list[str]] = {name: [] for name in self.functions}

    def add_function(self, fn: GenericFunction) -> None:
        if fn.name in self.functions:
            raise RegistryError(f"duplicate generic function {fn.name!r}")
        self.functions[fn.name] = fn
        self._by_function[fn.name] = []

    def register(self, spec: BackendSpec) -> str:
        if spec.id in self.backends:
            raise RegistryError(f"duplicate backend id {spec.id!r}")
        if spec.function_id not in self.functions:
            raise RegistryError(f"backend {spec.id!r} implements unknown function {spec.function_id!r}")
        if not spec.cost >= 0 or math.isinf(spec.cost):
            raise RegistryError(f"backend {spec.id!r}: cost must be a finite nonnegative number")
        self.backends[spec.id] = spec
        self._by_function[spec.function_id].append(spec.id)
        return spec.id

    def __getitem__(self, backend_id: str) -> BackendSpec:
        return self.backends[backend_id]

    def __contains__(self, backend_id: str) -> bool:
        return backend_id in self.backends

    def arms(self, function_id: str) -> list[str]:
        """M_k in registration order."""
        return list(self._by_function.get(function_id, ()))

    def n_backends(self, function_id: str) -> int:
        return len(self._by_function.get(function_id, ()))

    def cost(self, backend_id: str) -> float:
        return self.backends[backend_id].cost

    def copy_with(self, backends) -> "BackendRegistry":
        out = BackendRegistry(self.functions.values())
        for b in backends:
            out.register(b)
        return out


def register_backend(spec: BackendSpec, registry: BackendRegistry) -> str:
    return registry.register(spec)


def normalized_cost(registry: BackendRegistry) -> BackendRegistry:
    """Rescale costs so the most expensive backend costs exactly 1.0."""
    top = max((b.cost for b in registry.backends.values()), default=0.0)
    if top <= 0:
        raise RegistryError("cannot normalize: every backend has zero cost")
    return registry.copy_with(replace(b, cost=b.cost / top) for b in registry.backends.values())


# ---------------------------------------------------------------------------
# Common random numbers


def keyed_uniform(seed: int, *key) -> float:
    """Uniform in [0, 1) that is a pure function of ``(seed, key)``, stable across processes."""
    payload = "|".join(str(k) for k in (seed, *key)).encode()
    digest = hashlib.blake2b(payload, digest_size=8).digest()
    return int.from_bytes(digest, "big") / 2.0**64


def corrupt(value, wrong=None, u: float = 0.0):
    """A wrong answer of the same type as ``value``."""
    if isinstance(value, bool):
        return not value
    if isinstance(value, str):
        if wrong is not None and wrong != value:
            return wrong
        return "N/A" if value != "N/A" else "none"
    if isinstance(value, int):
        # counts: off by one, never negative
        if value <= 0:
            return value + 1
        return value - 1 if u < 0.5 else value + 1
    if isinstance(value, float):
        return value - 1.0 if u < 0.5 else value + 1.0
    raise TypeError(f"no corruption rule for {type(value).__name__}")


def invoke_synthetic(
    backend: BackendSpec,
    site: CallSite,
    dynamic_args,
    truth: LatentTruth,
    *,
    seed: int,
    episode: int,
    invocation: int = 0,
    correlated: bool = False,
):
    """Simulated backend output for one call.

    Correct with probability ``accuracy(truth.difficulty)``.  With
    ``correlated`` set, all backends at a site share the coin's uniform, so a
    more accurate backend is right whenever a less accurate one is.
    """
    if backend.function_id != site.function_id:
        raise RegistryError(f"backend {backend.id!r} does not implement {site.function_id!r}")
    if site.index not in truth.values:
        raise MissingTruthError(f"no latent value for call site {site.index}")
    behavior = backend.behavior
    if not isinstance(behavior, SyntheticBehavior):
        raise TypeError(f"backend {backend.id!r} is not synthetic")
    tag = "*" if correlated else backend.id
    u = keyed_uniform(seed, episode, site.index, tag, invocation, "coin")
    value = truth.values[site.index]
    if u < behavior.accuracy(truth.difficulty):
        return value
    return corrupt(value, truth.wrong.get(site.index), keyed_uniform(seed, episode, site.index, tag, invocation, "alt"))
