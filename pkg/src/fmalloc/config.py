"""Run configuration: a single JSON document, strict about unknown keys."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .envs import Environment, environment_from_dict
from .policy import PolicyHyperparams

DEFAULT_LAMBDAS = (0.01, 0.03, 0.1, 0.3, 1.0, 3.0)
DEFAULT_BASELINES = ("cheapest", "most_expensive", "pareto_random")
KNOWN_BASELINES = ("cheapest", "most_expensive", "pareto_random", "routing", "pareto_random_mllm")
OUTPUT_ROOT_VAR = "FMALLOC_OUTPUT_ROOT"


class ConfigValidationError(ValueError):
    pass


@dataclass
class RunConfig:
    program: str
    environment: dict
    policy: PolicyHyperparams = field(default_factory=PolicyHyperparams)
    baselines: tuple = DEFAULT_BASELINES
    lambdas: tuple = DEFAULT_LAMBDAS
    T: int = 5000
    seeds: tuple = (0,)
    output_dir: str | None = None
    regret_cap: int = 256
    pareto_q: tuple = (0.25, 0.5, 0.75)
    save_policy: bool = False
    base_dir: str = field(default=".", compare=False, repr=False)

    @property
    def program_path(self) -> Path:
        p = Path(self.program)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def program_source(self) -> str:
        return self.program_path.read_text()

    def resolved_output_dir(self) -> Path:
        if self.output_dir is not None:
            p = Path(self.output_dir)
            return p if p.is_absolute() else Path(self.base_dir) / p
        return Path(os.environ.get(OUTPUT_ROOT_VAR, "runs"))

    def build_environment(self, seed: int, lam: float) -> Environment:
        return environment_from_dict(self.environment, self.program_source(), lam, seed)

    def validate(self) -> None:
        if not self.program_path.is_file():
            raise ConfigValidationError(f"program file not found: {self.program_path}")
        if not self.seeds:
            raise ConfigValidationError("seeds must be a nonempty list")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigValidationError("seeds must be distinct")
        if not self.lambdas or any(not lam > 0 for lam in self.lambdas):
            raise ConfigValidationError("lambdas must be a nonempty list of positive numbers")
        if self.T < 0:
            raise ConfigValidationError("T must be >= 0")
        if self.regret_cap < 1:
            raise ConfigValidationError("regret_cap must be >= 1")
        unknown = [b for b in self.baselines if b not in KNOWN_BASELINES]
        if unknown:
            raise ConfigValidationError(f"unknown baselines {unknown}; choose from {list(KNOWN_BASELINES)}")
        if any(not 0.0 <= q <= 1.0 for q in self.pareto_q):
            raise ConfigValidationError("pareto_q values must lie in [0, 1]")
        needs_arms = {"routing", "pareto_random_mllm"} & set(self.baselines)
        if needs_arms and len(self.environment.get("routing_arms", [])) < 1:
            raise ConfigValidationError(f"{sorted(needs_arms)} need environment.routing_arms")
        try:
            self.build_environment(self.seeds[0], self.lambdas[0])
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigValidationError(f"environment: {exc}") from exc

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            if f.name == "base_dir":
                continue
            v = getattr(self, f.name)
            if isinstance(v, PolicyHyperparams):
                v = asdict(v)
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, d: dict, base_dir: str = ".") -> "RunConfig":
        names = {f.name for f in fields(cls)} - {"base_dir"}
        extra = set(d) - names
        if extra:
            raise ConfigValidationError(f"unknown config keys {sorted(extra)}")
        for required in ("program", "environment"):
            if required not in d:
                raise ConfigValidationError(f"missing required key {required!r}")
        pol = d.get("policy", {})
        bad = set(pol) - {f.name for f in fields(PolicyHyperparams)}
        if bad:
            raise ConfigValidationError(f"unknown policy keys {sorted(bad)}")
        try:
            hyper = PolicyHyperparams(**pol)
        except (TypeError, ValueError) as exc:
            raise ConfigValidationError(f"policy: {exc}") from exc
        kw = {k: v for k, v in d.items() if k != "policy"}
        for k in ("baselines", "seeds"):
            if k in kw:
                kw[k] = tuple(kw[k])
        if "lambdas" in kw:
            kw["lambdas"] = tuple(float(v) for v in kw["lambdas"])
        if "pareto_q" in kw:
            kw["pareto_q"] = tuple(float(v) for v in kw["pareto_q"])
        if "seeds" in kw:
            kw["seeds"] = tuple(int(s) for s in kw["seeds"])
        return cls(policy=hyper, base_dir=str(base_dir), **kw)


def normalize(d: dict) -> dict:
    """The canonical form of a config dict: every field present, defaults filled."""
    return RunConfig.from_dict(d).to_dict()


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigValidationError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigValidationError(f"{path}: top level must be an object")
    return RunConfig.from_dict(data, base_dir=str(path.parent))


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
