"""Runs (and caches) the desk-scale experiment matrix for the acceptance suite.

Results land under experiments/acceptance/<arm>/seed-<n>/ relative to the
repository root; finished runs are reused on re-entry, so the suite is cheap
to re-run after the first pass.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor

from preflab.consistency import ConsistencyConfig
from preflab.loop import RunConfig, collapse_probe, run_experiment
from preflab.reward import RewardConfig
from preflab.sac import AgentConfig, IntrinsicConfig
from preflab.teachers import TeacherConfig

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
RUNS_DIR = os.path.join(ROOT, "experiments", "acceptance")
SEEDS = list(range(10))
COLLAPSE_SEEDS = list(range(5))

AGENT = dict(hidden=64, n_hidden=2, batch_size=128, lr=1e-3)
REWARD = dict(state_embed=20, action_embed=10, hidden=64, trunk_layers=3,
              lr=3e-4, ensemble_size=3)
CONSISTENCY = dict(objective="contrastive", temperature=0.1, epochs_per_update=2,
                   batch_size=128, optimizer="adam", lr=1e-3)


def reference_config() -> RunConfig:
    return RunConfig(
        env_id="point_mass",
        total_steps=50_000,
        reward_mode="ground_truth",
        feedback_budget=0,
        agent=AgentConfig(**AGENT),
        intrinsic=IntrinsicConfig(pretrain_steps=0),
        eval_every_steps=10_000,
        eval_episodes=5,
    )


def learned_config(variant: str, aux: str | None) -> RunConfig:
    return RunConfig(
        env_id="point_mass",
        total_steps=50_000,
        teacher=TeacherConfig(style="oracle"),
        strategy="disagreement",
        feedback_budget=50,
        queries_per_session=5,
        steps_between_sessions=2_000,
        segment_length=50,
        reward=RewardConfig(variant=variant, **REWARD),
        consistency=ConsistencyConfig(**{**CONSISTENCY, "objective": aux}) if aux else None,
        reward_epochs=200,
        reward_target_accuracy=0.97,
        agent=AgentConfig(**AGENT),
        intrinsic=IntrinsicConfig(pretrain_steps=9_000),
        eval_every_steps=10_000,
        eval_episodes=5,
    )


ARMS = {
    "reference": lambda: reference_config(),
    "base": lambda: learned_config("concat", None),
    "saf": lambda: learned_config("fusion", None),
    "reed": lambda: learned_config("fusion", "contrastive"),
}


def _run_arm_seed(arm: str, seed: int) -> str:
    out = os.path.join(RUNS_DIR, arm, f"seed-{seed}")
    if not os.path.exists(os.path.join(out, "summary.json")):
        run_experiment(ARMS[arm](), seed=seed, out_dir=out)
    return out


def _run_collapse(objective: str, seed: int) -> str:
    out = os.path.join(RUNS_DIR, "collapse", f"{objective}-seed-{seed}.json")
    if not os.path.exists(out):
        os.makedirs(os.path.dirname(out), exist_ok=True)
        probe = collapse_probe(objective, seed=seed, collect_steps=3_000, epochs=150, lr=2e-3)
        with open(out, "w") as f:
            json.dump(probe, f, indent=2)
    return out


def _dispatch(job):
    kind = job[0]
    if kind == "run":
        return _run_arm_seed(job[1], job[2])
    return _run_collapse(job[1], job[2])


def pending_jobs() -> list[tuple]:
    jobs: list[tuple] = []
    for arm in ARMS:
        for seed in SEEDS:
            out = os.path.join(RUNS_DIR, arm, f"seed-{seed}", "summary.json")
            if not os.path.exists(out):
                jobs.append(("run", arm, seed))
    for objective in ("simsiam", "contrastive"):
        for seed in COLLAPSE_SEEDS:
            out = os.path.join(RUNS_DIR, "collapse", f"{objective}-seed-{seed}.json")
            if not os.path.exists(out):
                jobs.append(("collapse", objective, seed))
    return jobs


def ensure_experiments(workers: int = 2) -> str:
    jobs = pending_jobs()
    if jobs:
        os.environ.setdefault("OMP_NUM_THREADS", "1")
        os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for path in pool.map(_dispatch, jobs):
                print(f"finished {os.path.relpath(path, RUNS_DIR)}", flush=True)
    return RUNS_DIR


def load_collapse(objective: str) -> list[dict]:
    probes = []
    for seed in COLLAPSE_SEEDS:
        path = os.path.join(RUNS_DIR, "collapse", f"{objective}-seed-{seed}.json")
        with open(path) as f:
            probes.append(json.load(f))
    return probes


if __name__ == "__main__":
    ensure_experiments()
