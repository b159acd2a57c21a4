"""Command-line entry points: run, sweep, evaluate, serve.

Config files are YAML mirroring the RunConfig schema (see README). `sweep`
expands a grid file into arms x seeds; `evaluate` aggregates finished runs
into the normalized-return table against the reference arm.
"""

from __future__ import annotations

import argparse
import copy
import itertools
import json
import os
import sys

import numpy as np
import yaml

from .consistency import ConsistencyConfig
from .loop import (
    RunConfig,
    final_window_return,
    normalized_return,
    run_experiment,
    run_performance_curve,
)
from .reward import RewardConfig
from .sac import AgentConfig, IntrinsicConfig
from .teachers import TeacherConfig


def config_from_dict(raw: dict) -> RunConfig:
    raw = copy.deepcopy(raw or {})
    nested = {
        "teacher": TeacherConfig,
        "reward": RewardConfig,
        "agent": AgentConfig,
        "intrinsic": IntrinsicConfig,
    }
    kwargs = {}
    for key, value in raw.items():
        if key in nested:
            kwargs[key] = nested[key](**(value or {}))
        elif key == "consistency":
            kwargs[key] = ConsistencyConfig(**value) if value else None
        else:
            kwargs[key] = value
    return RunConfig(**kwargs)


def load_config(path: str) -> RunConfig:
    with open(path) as f:
        return config_from_dict(yaml.safe_load(f))


def _set_path(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
    d[keys[-1]] = value


def expand_grid(grid_spec: dict) -> list[tuple[str, dict]]:
    """(arm name, config dict) pairs from {base: {...}, grid: {path: [...]}}."""
    base = grid_spec.get("base", {})
    grid = grid_spec.get("grid", {})
    if not grid:
        return [("base", copy.deepcopy(base))]
    paths = sorted(grid)
    arms = []
    for combo in itertools.product(*(grid[p] for p in paths)):
        cfg = copy.deepcopy(base)
        parts = []
        for path, value in zip(paths, combo):
            _set_path(cfg, path, value)
            short = path.split(".")[-1]
            parts.append(f"{short}={value}")
        arms.append(("_".join(parts).replace("/", "-"), cfg))
    return arms


def cmd_run(args) -> int:
    config = load_config(args.config)
    result = run_experiment(config, seed=args.seed, out_dir=args.out)
    print(json.dumps(result.summary, indent=2, sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    with open(args.grid) as f:
        grid_spec = yaml.safe_load(f)
    seeds = grid_spec.get("seeds", [0])
    for arm_name, cfg_dict in expand_grid(grid_spec):
        for seed in seeds:
            out = os.path.join(args.out, arm_name, f"seed-{seed}")
            if os.path.exists(os.path.join(out, "summary.json")) and not args.force:
                print(f"skip {out} (exists)")
                continue
            config = config_from_dict(cfg_dict)
            result = run_experiment(config, seed=seed, out_dir=out)
            print(f"{arm_name} seed={seed}: episodes={result.summary['episodes']} "
                  f"labels={result.summary['labels_kept']} "
                  f"runtime={result.summary['runtime_seconds']:.1f}s")
    return 0


def _discover_runs(runs_dir: str) -> dict[str, dict[int, str]]:
    """arm -> seed -> run dir, from any summary.json below runs_dir."""
    found: dict[str, dict[int, str]] = {}
    for dirpath, _, filenames in os.walk(runs_dir):
        if "summary.json" not in filenames:
            continue
        with open(os.path.join(dirpath, "summary.json")) as f:
            summary = json.load(f)
        rel = os.path.relpath(dirpath, runs_dir)
        arm = os.path.dirname(rel) or rel
        found.setdefault(arm, {})[int(summary["seed"])] = dirpath
    return found


def evaluate_runs(runs_dir: str, reference_arm: str | None = None) -> dict:
    """Normalized and final-window returns per arm against the reference arm."""
    runs = _discover_runs(runs_dir)
    if reference_arm is None:
        for arm, by_seed in runs.items():
            sample = json.load(open(os.path.join(next(iter(by_seed.values())),
                                                 "summary.json")))
            if sample["reward_mode"] == "ground_truth":
                reference_arm = arm
                break
    if reference_arm is None or reference_arm not in runs:
        raise ValueError("no reference (ground-truth reward mode) runs found")
    reference = {seed: run_performance_curve(path)
                 for seed, path in runs[reference_arm].items()}
    table = {}
    for arm, by_seed in runs.items():
        if arm == reference_arm:
            continue
        per_seed = {}
        for seed, path in sorted(by_seed.items()):
            if seed not in reference:
                continue
            curve = run_performance_curve(path)
            ref = reference[seed]
            n = min(len(curve), len(ref))
            per_seed[seed] = {
                "normalized_return": normalized_return(curve[:n], ref[:n]),
                "final_window_return": final_window_return(curve[:n], ref[:n]),
            }
        if per_seed:
            norm = [v["normalized_return"] for v in per_seed.values()]
            final = [v["final_window_return"] for v in per_seed.values()]
            table[arm] = {
                "seeds": sorted(per_seed),
                "per_seed": per_seed,
                "normalized_return_mean": float(np.mean(norm)),
                "normalized_return_sd": float(np.std(norm)),
                "final_window_mean": float(np.mean(final)),
                "final_window_sd": float(np.std(final)),
            }
    return {"reference_arm": reference_arm, "arms": table}


def format_ratio(mean: float, sd: float) -> str:
    return f"{mean:.2f}±{sd:.2f}"


def cmd_evaluate(args) -> int:
    report = evaluate_runs(args.runs, reference_arm=args.reference)
    print(f"reference: {report['reference_arm']}")
    width = max((len(a) for a in report["arms"]), default=10)
    print(f"{'arm'.ljust(width)}  normalized   final-window  seeds")
    for arm, row in sorted(report["arms"].items()):
        print(
            f"{arm.ljust(width)}  "
            f"{format_ratio(row['normalized_return_mean'], row['normalized_return_sd'])}    "
            f"{format_ratio(row['final_window_mean'], row['final_window_sd'])}     "
            f"{len(row['seeds'])}"
        )
    out_path = os.path.join(args.runs, "ratio_table.json")
    with open(out_path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    print(f"written {out_path}")
    return 0


def cmd_serve(args) -> int:
    import threading

    import uvicorn

    from .service import HumanLabeller, SessionStore, create_app

    config = load_config(args.config)
    store = SessionStore()
    app = create_app(store, static_dir=args.static)
    server = uvicorn.Server(uvicorn.Config(app, host=args.host, port=args.port,
                                           log_level="warning"))
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    print(f"labelling service on http://{args.host}:{args.port}")
    labeller = HumanLabeller(store, env_id=config.env_id, horizon=config.horizon)
    try:
        result = run_experiment(config, seed=args.seed, out_dir=args.out,
                                label_provider=labeller)
        print(json.dumps(result.summary, indent=2, sort_keys=True))
    finally:
        server.should_exit = True
        thread.join(timeout=5)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="preflab",
                                     description="preference-based RL laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one experiment")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--seed", type=int, required=True)
    p_run.add_argument("--out", required=True)
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a grid of experiments")
    p_sweep.add_argument("--grid", required=True)
    p_sweep.add_argument("--out", required=True)
    p_sweep.add_argument("--force", action="store_true")
    p_sweep.set_defaults(func=cmd_sweep)

    p_eval = sub.add_parser("evaluate", help="aggregate runs into the ratio table")
    p_eval.add_argument("--runs", required=True)
    p_eval.add_argument("--reference", default=None)
    p_eval.set_defaults(func=cmd_evaluate)

    p_serve = sub.add_parser("serve", help="run with the human labelling service")
    p_serve.add_argument("--config", required=True)
    p_serve.add_argument("--seed", type=int, required=True)
    p_serve.add_argument("--out", required=True)
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8710)
    p_serve.add_argument("--static", default=None)
    p_serve.set_defaults(func=cmd_serve)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
