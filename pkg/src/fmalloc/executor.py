"""Tree-walking interpreter that runs a program under a configuration vector."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .backends import BackendRegistry, LatentTruth, RemoteEndpoint, invoke_synthetic
from .dsl import Assign, Binary, Call, CallSite, If, Literal, Name, ProgramIR, Return, Unary, While
from .remote import invoke_remote


class DSLRuntimeError(Exception):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ProgramInput:
    """The streamed input bound to the program parameter."""

    input_id: str
    features: np.ndarray = field(compare=False, repr=False)


@dataclass(frozen=True)
class ConfigurationVector:
    choices: tuple

    def __post_init__(self):
        object.__setattr__(self, "choices", tuple(self.choices))

    def __len__(self) -> int:
        return len(self.choices)

    def __iter__(self):
        return iter(self.choices)

    def __getitem__(self, i):
        return self.choices[i]

    def validate(self, ir: ProgramIR, registry: BackendRegistry) -> None:
        if len(self.choices) != ir.n_sites:
            raise ConfigError(f"configuration has {len(self.choices)} choices, program has {ir.n_sites} call sites")
        for site, backend_id in zip(ir.call_sites, self.choices):
            if backend_id not in registry:
                raise ConfigError(f"site {site.index}: unknown backend {backend_id!r}")
            if registry[backend_id].function_id != site.function_id:
                raise ConfigError(
                    f"site {site.index}: backend {backend_id!r} does not implement {site.function_id!r}"
                )


@dataclass(frozen=True)
class ExecutionTrace:
    output: object
    invocations: tuple  # per site, number of dynamic executions
    per_site_cost: tuple
    incurred_cost: float
    exhausted: bool = False
    latency_ms: tuple = ()

    @property
    def executed_sites(self) -> tuple:
        return tuple((i + 1, n) for i, n in enumerate(self.invocations) if n)


class _Return(Exception):
    def __init__(self, value):
        self.value = value


class _Exhausted(Exception):
    pass


_MISSING = object()


def _truthy(value) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, (int, float)):
        return value != 0
    raise DSLRuntimeError(f"condition must be boolean or numeric, got {type(value).__name__}")


def _number(value, op: str):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise DSLRuntimeError(f"operator {op!r} needs numbers, got {type(value).__name__}")
    return value


def _binary(op: str, a, b):
    if op == "+" and isinstance(a, str) and isinstance(b, str):
        return a + b
    if op in ("==", "!="):
        same = value_kind(a) == value_kind(b) and a == b
        return same if op == "==" else not same
    if op in ("<", "<=", ">", ">="):
        if not (isinstance(a, str) and isinstance(b, str)):
            _number(a, op)
            _number(b, op)
        if op == "<":
            return a < b
        if op == "<=":
            return a <= b
        if op == ">":
            return a > b
        return a >= b
    a, b = _number(a, op), _number(b, op)
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if b == 0:
        raise DSLRuntimeError("division by zero")
    if op == "/":
        return a / b
    return a % b


def interpret(ir: ProgramIR, x, call: Callable[[Call, list], object]):
    """Run ``ir`` on input ``x``; ``call`` resolves each neural call.

    Returns ``(output, exhausted)``.  A loop that would exceed its bound
    aborts the run and yields the program's declared default.
    """
    env: dict = {ir.param: x}

    def ev(e):
        t = type(e)
        if t is Name:
            v = env.get(e.id, _MISSING)
            if v is _MISSING:
                raise DSLRuntimeError(f"{e.line}:{e.col}: variable {e.id!r} is unbound")
            return v
        if t is Literal:
            return e.value
        if t is Call:
            return call(e, [ev(a) for a in e.args])
        if t is Binary:
            if e.op == "and":
                return _truthy(ev(e.left)) and _truthy(ev(e.right))
            if e.op == "or":
                return _truthy(ev(e.left)) or _truthy(ev(e.right))
            return _binary(e.op, ev(e.left), ev(e.right))
        if t is Unary:
            if e.op == "not":
                return not _truthy(ev(e.operand))
            return -_number(ev(e.operand), "-")
        raise DSLRuntimeError(f"cannot evaluate {t.__name__}")

    def run(stmts):
        for st in stmts:
            t = type(st)
            if t is Assign:
                env[st.target] = ev(st.value)
            elif t is If:
                run(st.body if _truthy(ev(st.test)) else st.orelse)
            elif t is Return:
                raise _Return(ev(st.value))
            elif t is While:
                if st.bound is None:
                    raise DSLRuntimeError(f"{st.line}:{st.col}: while loop without bound")
                n = 0
                while _truthy(ev(st.test)):
                    if n == st.bound:
                        raise _Exhausted()
                    run(st.body)
                    n += 1

    default = ir.default.value if ir.default is not None else None
    try:
        run(ir.body)
    except _Return as r:
        return r.value, False
    except _Exhausted:
        return default, True
    return default, False


def execute(
    ir: ProgramIR,
    config: ConfigurationVector,
    registry: BackendRegistry,
    x,
    truth: LatentTruth,
    *,
    seed: int,
    episode: int,
    correlated: bool = False,
) -> ExecutionTrace:
    """Execute under ``config``, charging cost only for calls actually made.

    Every dynamic execution of a site uses that site's configured backend and
    is charged its fixed cost.
    """
    choices = config.choices if isinstance(config, ConfigurationVector) else tuple(config)
    n = ir.n_sites
    counts = [0] * n
    latencies: list[float] = []
    sites = ir.call_sites
    backends = [registry[b] for b in choices]

    def call(node: Call, args):
        i = node.site - 1
        backend = backends[i]
        inv = counts[i]
        counts[i] = inv + 1
        if isinstance(backend.behavior, RemoteEndpoint):
            reply = invoke_remote(backend, sites[i], args, getattr(x, "input_id", ""))
            latencies.append(reply.latency_ms)
            return reply.output
        return invoke_synthetic(
            backend, sites[i], args, truth, seed=seed, episode=episode, invocation=inv, correlated=correlated
        )

    output, exhausted = interpret(ir, x, call)
    per_site = tuple(backends[i].cost * counts[i] if counts[i] else 0.0 for i in range(n))
    return ExecutionTrace(output, tuple(counts), per_site, sum(per_site), exhausted, tuple(latencies))


def ground_truth_output(ir: ProgramIR, x, truth: LatentTruth):
    """The program's output when every neural call returns its latent truth."""

    def call(node: Call, args):
        try:
            return truth.values[node.site]
        except KeyError:
            raise DSLRuntimeError(f"no latent value for call site {node.site}") from None

    output, _ = interpret(ir, x, call)
    return output


def value_kind(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "boolean"
    if isinstance(value, str):
        return "text"
    if isinstance(value, (int, float)):
        return "number"
    return type(value).__name__


def loss(output, y) -> float:
    """0/1 exact-match loss."""
    if value_kind(output) != value_kind(y):
        warnings.warn(f"loss: comparing {value_kind(output)} output with {value_kind(y)} target", stacklevel=2)
        return 1.0
    return 0.0 if output == y else 1.0


def trace_record(episode: int, config, trace: ExecutionTrace, y, loss_value: float) -> dict:
    return {
        "episode": episode,
        "config": list(config),
        "output": trace.output,
        "y": y,
        "loss": loss_value,
        "per_site_cost": list(trace.per_site_cost),
        "incurred_cost": trace.incurred_cost,
    }


def site_of(ir: ProgramIR, index: int) -> CallSite:
    return ir.call_sites[index - 1]
