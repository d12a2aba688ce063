"""Command-line entry points: ``parse``, ``run`` and ``report``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ConfigValidationError, RunConfig, load_config
from .dsl import DSLSyntaxError, default_functions, parse_program, validate_program
from .executor import ConfigurationVector
from .envs import RoutingEnvironment, registry_from_dict, routing_arms_from_dict
from .harness import (
    ParetoRandomPolicy,
    RegretLedger,
    StaticPolicy,
    cheapest,
    learned_policy,
    most_expensive,
    routing_policy,
    run_stream,
    static_universe,
)
from .pareto import pareto_front, scatter_svg

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
PARETO_FIELDS = ["policy", "lambda", "seed", "row", "mean_cost", "accuracy", "f1", "mean_reward", "episodes"]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# parse


def cmd_parse(path: str, config: str | None = None, out=None, err=None) -> int:
    out, err = out or sys.stdout, err or sys.stderr
    try:
        source = Path(path).read_text()
    except OSError as exc:
        print(f"{path}: {exc.strerror or exc}", file=err)
        return EXIT_RUNTIME
    functions = default_functions()
    if config is not None:
        try:
            functions = registry_from_dict(load_config(config).environment).functions
        except (ConfigValidationError, ValueError, KeyError) as exc:
            print(f"{config}: {exc}", file=err)
            return EXIT_RUNTIME
    try:
        ir = parse_program(source, functions)
    except DSLSyntaxError as exc:
        print(f"{path}:{exc.line}:{exc.col}: error: {exc.message}", file=err)
        return EXIT_RUNTIME
    diags = validate_program(ir)
    for d in diags:
        print(f"{path}:{d.line}:{d.col}: error: {d.message}", file=err)
    print(f"N={ir.n_sites}: " + ", ".join(s.function_id for s in ir.call_sites), file=out)
    return EXIT_RUNTIME if diags else EXIT_OK


# ---------------------------------------------------------------------------
# run


@dataclass(frozen=True)
class RunTask:
    seed: int
    lam: float
    kind: str
    q: float | None = None

    @property
    def name(self) -> str:
        return self.kind if self.q is None else f"{self.kind}_q{self.q:g}"

    def subdir(self) -> str:
        return f"seed{self.seed}/lam{self.lam:g}/{self.name}"


def plan_tasks(cfg: RunConfig) -> list[RunTask]:
    tasks = []
    for seed in cfg.seeds:
        for lam in cfg.lambdas:
            tasks.append(RunTask(seed, lam, "structured"))
            for b in cfg.baselines:
                if b in ("pareto_random", "pareto_random_mllm"):
                    tasks.extend(RunTask(seed, lam, b, q) for q in cfg.pareto_q)
                else:
                    tasks.append(RunTask(seed, lam, b))
    return tasks


def _routing_env(cfg: RunConfig, env):
    d = cfg.environment
    ref = max(float(b["cost"]) for b in d["backends"]) if d.get("normalize_costs", True) else 1.0
    arms = routing_arms_from_dict(d, ref)
    return RoutingEnvironment(env, arms), arms


def build_task(cfg: RunConfig, task: RunTask):
    """(environment, policy) for one run."""
    env = cfg.build_environment(task.seed, task.lam)
    if task.kind == "structured":
        return env, learned_policy(env, cfg.policy, task.seed)
    if task.kind == "cheapest":
        return env, cheapest(env)
    if task.kind == "most_expensive":
        return env, most_expensive(env)
    if task.kind == "pareto_random":
        return env, ParetoRandomPolicy(cheapest(env), most_expensive(env), task.q, task.seed, task.name)
    renv, arms = _routing_env(cfg, env)
    if task.kind == "routing":
        pol = routing_policy([(a.id, a.cost) for a in arms], env.feature_dim, cfg.policy, task.seed)
        return renv, pol
    if task.kind == "pareto_random_mllm":
        lo = min(arms, key=lambda a: (a.cost, a.id))
        hi = max(arms, key=lambda a: (a.cost, a.id))
        low = StaticPolicy(ConfigurationVector((lo.id,)), "mllm_low")
        high = StaticPolicy(ConfigurationVector((hi.id,)), "mllm_high")
        return renv, ParetoRandomPolicy(low, high, task.q, task.seed, task.name)
    raise ValueError(f"unknown policy kind {task.kind!r}")


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, default=_json_default)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def run_task(cfg_dict: dict, base_dir: str, task: RunTask, out_root: str) -> dict:
    """Execute one (seed, lambda, policy) run and write its directory."""
    cfg = RunConfig.from_dict(cfg_dict, base_dir)
    env, policy = build_task(cfg, task)
    run_dir = Path(out_root) / task.subdir()
    run_dir.mkdir(parents=True, exist_ok=True)
    universe, approx = static_universe(env, cap=cfg.regret_cap, seed=task.seed)
    ledger = RegretLedger(universe, approx)
    with open(run_dir / "episodes.jsonl", "w") as fh:
        # each line is written as soon as the episode finishes, so an aborted run keeps its prefix
        result = run_stream(
            env, policy, cfg.T, ledger=ledger, keep_episodes=False,
            on_episode=lambda rec: fh.write(_dumps(rec.to_json()) + "\n"),
        )
    with open(run_dir / "regret.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "gamma", "gamma_over_t"])
        for t, (g, avg) in enumerate(zip(ledger.gamma, result.regret_series), start=1):
            w.writerow([t, repr(g), repr(avg)])
    summary = {
        "policy": task.name,
        "kind": task.kind,
        "seed": task.seed,
        "lambda": task.lam,
        "q": task.q,
        "environment": env.name,
        "T": cfg.T,
        "metrics": result.metrics,
    }
    if getattr(policy, "learns", False):
        summary["hyperparams"] = cfg.to_dict()["policy"]
        summary["arm_evaluations"] = policy.arm_evaluations
        if cfg.save_policy:
            policy.save(run_dir / "policy.json")
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=_json_default) + "\n")
    return summary


def cmd_run(config_path: str, jobs: int = 1, out: str | None = None, stdout=None, err=None) -> int:
    stdout, err = stdout or sys.stdout, err or sys.stderr
    try:
        cfg = load_config(config_path)
        if out is not None:
            cfg.output_dir = str(Path(out).resolve())
        cfg.validate()
    except (ConfigValidationError, OSError) as exc:
        print(f"config error: {exc}", file=err)
        return EXIT_RUNTIME
    out_root = cfg.resolved_output_dir()
    out_root.mkdir(parents=True, exist_ok=True)
    tasks = plan_tasks(cfg)
    cfg_dict = cfg.to_dict()
    args = [(cfg_dict, cfg.base_dir, t, str(out_root)) for t in tasks]
    try:
        if jobs > 1 and len(tasks) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                summaries = list(pool.map(run_task, *zip(*args)))
        else:
            summaries = [run_task(*a) for a in args]
    except Exception as exc:  # noqa: BLE001 - surfaced as a runtime failure
        print(f"run failed: {type(exc).__name__}: {exc}", file=err)
        return EXIT_RUNTIME
    rows = pareto_rows(summaries)
    write_pareto_csv(rows, out_root / "pareto.csv")
    (out_root / "config.json").write_text(json.dumps(cfg_dict, indent=2, sort_keys=True) + "\n")
    print(f"{len(tasks)} runs written to {out_root}", file=stdout)
    return EXIT_OK


# ---------------------------------------------------------------------------
# report


def _row(summary: dict) -> dict:
    m = summary["metrics"]
    return {
        "policy": summary["policy"],
        "lambda": float(summary["lambda"]),
        "seed": summary["seed"],
        "row": "raw",
        "mean_cost": m.get("mean_cost"),
        "accuracy": m.get("accuracy"),
        "f1": m.get("f1"),
        "mean_reward": m.get("mean_reward"),
        "episodes": m.get("episodes"),
    }


def pareto_rows(summaries) -> list[dict]:
    """One raw row per run plus one mean row per (policy, lambda)."""
    raw = sorted((_row(s) for s in summaries), key=lambda r: (r["policy"], r["lambda"], str(r["seed"])))
    groups: dict = {}
    for r in raw:
        groups.setdefault((r["policy"], r["lambda"]), []).append(r)
    means = []
    for (policy, lam), rs in sorted(groups.items()):
        row = {"policy": policy, "lambda": lam, "seed": "mean", "row": "mean", "episodes": sum(r["episodes"] for r in rs)}
        for k in ("mean_cost", "accuracy", "f1", "mean_reward"):
            vals = [r[k] for r in rs if r[k] is not None]
            row[k] = float(np.mean(vals)) if len(vals) == len(rs) and vals else None
        means.append(row)
    return raw + means


def write_pareto_csv(rows, path) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=PARETO_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r[k] is None else (repr(r[k]) if isinstance(r[k], float) else r[k])) for k in PARETO_FIELDS})
    Path(path).write_text(buf.getvalue())


REQUIRED_SUMMARY = ("policy", "lambda", "seed", "metrics")


def collect_summaries(dirs):
    """(summaries, problems): problems lists missing or unreadable summary files."""
    summaries, problems = [], []
    for d in dirs:
        d = Path(d)
        if not d.is_dir():
            problems.append(f"{d}: not a directory")
            continue
        found = sorted(d.rglob("summary.json"))
        # run directories that never got a summary (aborted or still running)
        orphans = sorted(p.parent for p in d.rglob("episodes.jsonl") if not (p.parent / "summary.json").exists())
        if not found and not orphans:
            problems.append(f"{d}: missing summary.json")
        for p in orphans:
            problems.append(f"{p}: missing summary.json")
        for p in found:
            try:
                s = json.loads(p.read_text())
                if not isinstance(s, dict) or any(k not in s for k in REQUIRED_SUMMARY):
                    raise ValueError("required fields absent")
                if not isinstance(s["metrics"], dict):
                    raise ValueError("metrics is not an object")
            except (ValueError, OSError) as exc:
                problems.append(f"{p}: corrupt summary ({exc})")
                continue
            summaries.append(s)
    return summaries, problems


def front_points(rows) -> list[tuple[float, float]]:
    pts = [(r["mean_cost"], r["accuracy"]) for r in rows if r["mean_cost"] is not None and r["accuracy"] is not None]
    return pareto_front(pts) if pts else []


def cmd_report(dirs, svg: bool = False, out: str | None = None, stdout=None, err=None) -> int:
    stdout, err = stdout or sys.stdout, err or sys.stderr
    if not dirs:
        print("report: no run directories given", file=err)
        return EXIT_USAGE
    summaries, problems = collect_summaries(dirs)
    for p in problems:
        print(p, file=err)
    if not summaries:
        print("report: no completed runs found", file=err)
        return EXIT_RUNTIME
    out_dir = Path(out) if out is not None else Path(dirs[0])
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = pareto_rows(summaries)
    write_pareto_csv(rows, out_dir / "pareto.csv")
    if svg:
        plotted = [r for r in rows if r["row"] == "mean"]
        (out_dir / "pareto.svg").write_text(scatter_svg(plotted))
    print(f"{len(summaries)} runs reported to {out_dir / 'pareto.csv'}", file=stdout)
    return EXIT_RUNTIME if problems else EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fmalloc", description="Online backend allocation for foundation-model programs.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sp = sub.add_parser("parse", help="check a program and list its call sites")
    sp.add_argument("file")
    sp.add_argument("--config", help="take the function table from this run config")
    sr = sub.add_parser("run", help="run every (seed, lambda, policy) combination of a config")
    sr.add_argument("--config", required=True)
    sr.add_argument("--jobs", type=int, default=1)
    sr.add_argument("--out", help="output directory (overrides the config and FMALLOC_OUTPUT_ROOT)")
    rp = sub.add_parser("report", help="aggregate finished runs into pareto.csv")
    rp.add_argument("dirs", nargs="+")
    rp.add_argument("--svg", action="store_true", help="also write pareto.svg")
    rp.add_argument("--out", help="where to write the report (default: first directory)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "parse":
        return cmd_parse(args.file, args.config)
    if args.command == "run":
        if args.jobs < 1:
            print("--jobs must be >= 1", file=sys.stderr)
            return EXIT_USAGE
        return cmd_run(args.config, args.jobs, args.out)
    return cmd_report(args.dirs, args.svg, args.out)


if __name__ == "__main__":
    sys.exit(main())
