"""The experiment loop: feedback scheduling, reward/consistency updates,
relabelling, policy training, and evaluation metrics.

Per policy step after pre-training: every K steps a feedback cycle runs
(consistency training over the whole buffer, encoder sync, query selection,
teacher labelling, preference training, buffer relabelling), then the agent
takes one environment step and one learner update. Runs are fully
deterministic per (config, seed); metrics.csv is byte-identical on repeat.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .consistency import (
    ConsistencyConfig,
    ConsistencyHeads,
    embedding_variance,
    sync_shared_params,
    train_consistency,
)
from .envs import make_env
from .queries import select_queries
from .replay import ReplayBuffer, Transition, ground_truth_guard
from .reward import (
    PreferenceDataset,
    PreferenceTriplet,
    RewardConfig,
    RewardEnsemble,
    train_preferences,
)
from .sac import AgentConfig, IntrinsicConfig, Policy, act, explore_pretrain, sac_update
from .teachers import LABEL_DISTRIBUTIONS, Label, ReturnStats, Teacher, TeacherConfig

PERFORMANCE_SHIFT_PER_STEP = 3.0  # bounds the start distance on PointMass2D
DENOMINATOR_EPS = 1e-6


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    env_id: str = "point_mass"
    total_steps: int = 50_000
    horizon: int | None = None
    reward_mode: str = "learned"  # "learned" | "ground_truth" (reference run)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    strategy: str = "disagreement"
    feedback_budget: int = 50
    queries_per_session: int = 5  # M
    steps_between_sessions: int = 2000  # K
    segment_length: int = 50  # l
    candidate_pool: int | None = None  # N; default 10*M
    intermediate_pool: int | None = None  # M'; default 5*M
    entropy_single_member: bool = False
    reward: RewardConfig = field(default_factory=RewardConfig)
    consistency: ConsistencyConfig | None = None
    consistency_after_budget: bool = False
    reward_epochs: int = 200
    reward_target_accuracy: float = 0.97
    agent: AgentConfig = field(default_factory=lambda: AgentConfig(hidden=64))
    intrinsic: IntrinsicConfig = field(default_factory=IntrinsicConfig)
    eval_every_steps: int = 10_000
    eval_episodes: int = 5

    @property
    def sessions(self) -> int:
        if self.reward_mode == "ground_truth" or self.feedback_budget == 0:
            return 0
        return self.feedback_budget // self.queries_per_session

    def validate(self) -> None:
        env = make_env(self.env_id, self.horizon)
        if self.reward_mode not in ("learned", "ground_truth"):
            raise ConfigError(f"unknown reward mode {self.reward_mode!r}")
        if self.segment_length > env.spec.horizon:
            raise ConfigError("segment length exceeds the episode horizon")
        if self.reward_mode == "learned" and self.feedback_budget > 0:
            if self.feedback_budget % self.queries_per_session != 0:
                raise ConfigError("feedback budget must be a multiple of M")
            last_session_step = (self.intrinsic.pretrain_steps
                                 + (self.sessions - 1) * self.steps_between_sessions)
            if last_session_step >= self.total_steps:
                raise ConfigError("feedback sessions do not fit into total_steps")
        if self.consistency is not None and self.reward.variant != "fusion":
            raise ConfigError("the consistency task requires the fusion reward network")


@dataclass
class EpisodeRecord:
    episode: int
    step: int
    phase: str
    gt_return: float
    learned_return: float
    critic_loss: float | None
    actor_loss: float | None
    alpha: float | None
    entropy: float | None
    reward_loss: float | None
    disagreement_mean: float | None
    embedding_var: float | None
    labels_total: int
    collapse_warnings: int


@dataclass
class RunResult:
    config: RunConfig
    seed: int
    episodes: list[EpisodeRecord]
    evals: list[dict]
    events: list[tuple[int, str]]  # (sequence number, event kind)
    summary: dict
    out_dir: str | None
    dataset: PreferenceDataset | None = None


METRICS_COLUMNS = [
    "episode", "step", "phase", "gt_return", "learned_return", "critic_loss",
    "actor_loss", "alpha", "entropy", "reward_loss", "disagreement_mean",
    "embedding_var", "labels_total", "collapse_warnings",
]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


class _HumanTimeout(RuntimeError):
    pass


class SimulatedLabeller:
    """Default label provider: wraps one simulated teacher."""

    def __init__(self, teacher: Teacher):
        self.teacher = teacher

    def label(self, pairs, stats, session_index: int) -> list[Label]:
        return self.teacher.label_batch(pairs, stats)


class _Runner:
    def __init__(self, config: RunConfig, seed: int, out_dir: str | None,
                 label_provider=None):
        config.validate()
        self.config = config
        self.seed = seed
        self.out_dir = out_dir
        root = np.random.SeedSequence(seed)
        (env_ss, agent_ss, reward_ss, query_ss, consist_ss, eval_ss,
         teacher_ss) = root.spawn(7)
        self.env = make_env(config.env_id, config.horizon)
        self.env_rng = np.random.default_rng(env_ss)
        self.agent_rng = np.random.default_rng(agent_ss)
        self.reward_rng = np.random.default_rng(reward_ss)
        self.query_rng = np.random.default_rng(query_ss)
        self.consist_rng = np.random.default_rng(consist_ss)
        self.eval_rng = np.random.default_rng(eval_ss)

        spec = self.env.spec
        self.buffer = ReplayBuffer(config.total_steps, spec.obs_dim, spec.action_dim)
        if config.reward_mode == "ground_truth":
            self.buffer.enforce_reward_range = False
        self.policy = Policy(spec.obs_dim, spec.action_dim, config.agent, self.agent_rng)

        self.learned = config.reward_mode == "learned"
        if self.learned:
            self.ensemble = RewardEnsemble(
                spec.obs_dim, spec.action_dim, config.reward,
                seed=int(np.random.default_rng(reward_ss.spawn(1)[0]).integers(2**31)),
            )
            teacher_cfg = TeacherConfig(**{**vars(config.teacher),
                                           "seed": int(np.random.default_rng(teacher_ss)
                                                       .integers(2**31))})
            self.teacher = Teacher(teacher_cfg)
            self.label_provider = label_provider or SimulatedLabeller(self.teacher)
            self.dataset = PreferenceDataset(max_size=config.feedback_budget)
            if config.consistency is not None:
                self.heads = [
                    ConsistencyHeads(m, config.consistency, self.consist_rng)
                    for m in self.ensemble.members
                ]
            else:
                self.heads = []
        else:
            self.ensemble = None
            self.teacher = None
            self.label_provider = None
            self.dataset = PreferenceDataset()
            self.heads = []

        self.stats = ReturnStats(window=config.steps_between_sessions)
        self.episodes: list[EpisodeRecord] = []
        self.evals: list[dict] = []
        self.events: list[tuple[int, str]] = []
        self.audit_rows: list[list] = []
        self.seq = 0
        self.labels_issued = 0
        self.sessions_run = 0
        self.session_steps: list[int] = []
        self.last_session: dict = {}

    # -- bookkeeping ------------------------------------------------------------

    def _event(self, kind: str) -> None:
        self.events.append((self.seq, kind))
        self.seq += 1

    def _episode_row(self, episode, step, phase, gt_return, learned_return,
                     losses) -> None:
        self.episodes.append(EpisodeRecord(
            episode=episode, step=step, phase=phase, gt_return=gt_return,
            learned_return=learned_return,
            critic_loss=losses.get("critic_loss"), actor_loss=losses.get("actor_loss"),
            alpha=losses.get("alpha"), entropy=losses.get("entropy"),
            reward_loss=self.last_session.get("reward_loss"),
            disagreement_mean=self.last_session.get("disagreement_mean"),
            embedding_var=self.last_session.get("embedding_var"),
            labels_total=len(self.dataset),
            collapse_warnings=sum(h.collapse_warnings for h in self.heads),
        ))

    # -- feedback cycle -----------------------------------------------------------

    def consistency_update(self) -> None:
        """Train the auxiliary task on the whole buffer, then sync encoders."""
        with ground_truth_guard():
            for heads in self.heads:
                train_consistency(heads, self.buffer, self.config.consistency,
                                  self.consist_rng)
            for heads, member in zip(self.heads, self.ensemble.members):
                sync_shared_params(heads, member)
        self.last_session["embedding_var"] = embedding_variance(
            self.ensemble.members[0], self.buffer, 512, self.consist_rng
        )
        self._event("consistency_update")

    def feedback_session(self, step: int) -> int:
        """One full feedback cycle; returns the number of triplets appended."""
        config = self.config
        self.session_steps.append(step)
        if self.heads:
            self.consistency_update()

        if getattr(self.label_provider, "wants_checkpoint", False) and self.out_dir:
            self.write_checkpoint()

        batch = select_queries(
            config.strategy, self.buffer, self.ensemble, config.queries_per_session,
            config.segment_length, self.query_rng, n=config.candidate_pool,
            m_prime=config.intermediate_pool,
            entropy_single_member=config.entropy_single_member,
        )
        if batch.scores is not None and len(batch.selected_indices) > 0:
            picked = batch.scores[batch.selected_indices]
            self.last_session["disagreement_mean"] = float(np.mean(picked))
        labels = self.label_provider.label(batch.pairs, self.stats, self.sessions_run)
        self.labels_issued += len(batch.pairs)
        assert self.labels_issued <= config.feedback_budget, "feedback budget exceeded"
        self._event("labels_collected")

        added = 0
        for idx, (pair, label) in enumerate(zip(batch.pairs, labels)):
            r1, r2 = pair[0].gt_return(), pair[1].gt_return()
            self.audit_rows.append([
                self.sessions_run, self.seq, idx, self.config.teacher.style,
                repr(r1), repr(r2), label.value,
            ])
            if label is Label.DISCARD:
                continue
            self.dataset.append(PreferenceTriplet(pair[0], pair[1],
                                                  LABEL_DISTRIBUTIONS[label]))
            added += 1

        if len(self.dataset) > 0:
            with ground_truth_guard():
                result = train_preferences(
                    self.ensemble, self.dataset, epochs=config.reward_epochs,
                    batch_size=config.queries_per_session, rng=self.reward_rng,
                    target_accuracy=config.reward_target_accuracy,
                )
            self.last_session["reward_loss"] = float(
                np.mean([trace[-1] for trace in result.losses])
            )
            self._event("reward_update")
            with ground_truth_guard():
                self.buffer.relabel(self.ensemble.mean_rewards)
            self._event("relabel")
        self.sessions_run += 1
        return added

    # -- evaluation ----------------------------------------------------------------

    def _evaluate(self, step: int) -> None:
        config = self.config
        eval_env = make_env(config.env_id, config.horizon)
        returns, final_distances = [], []
        for ep in range(config.eval_episodes):
            state = eval_env.reset(int(self.eval_rng.integers(2**31)))
            total = 0.0
            tail = []
            while not state.done:
                action = act(self.policy, state.observation, "deterministic")
                state, r = eval_env.step(state, action)
                total += r
                tail.append(eval_env.distance_to_goal() if hasattr(
                    eval_env, "distance_to_goal") else -r)
            returns.append(total)
            final_distances.append(float(np.mean(tail[-10:])))
        self.evals.append({
            "step": step,
            "mean_gt_return": float(np.mean(returns)),
            "mean_final_distance": float(np.mean(final_distances)),
        })

    # -- main loop -------------------------------------------------------------------

    def run(self) -> RunResult:
        config = self.config
        t_start = time.perf_counter()
        global_step = 0
        episode = 0

        if self.learned:
            def hook(ep, steps_done, ep_return):
                self.stats.update(ep_return, steps_done)
                self._episode_row(ep, steps_done, "pretrain", ep_return,
                                  float("nan"), {})

            with ground_truth_guard():
                episode = explore_pretrain(self.policy, self.env, self.buffer,
                                           config.intrinsic, self.agent_rng,
                                           episode_hook=hook)
            global_step = config.intrinsic.pretrain_steps

        state = self.env.reset(int(self.env_rng.integers(2**31)))
        step_in_ep = 0
        ep_gt, ep_learned = 0.0, 0.0
        losses: dict = {}

        remaining = config.total_steps - global_step
        for local_step in range(remaining):
            if self.learned and local_step % config.steps_between_sessions == 0:
                if (config.feedback_budget > 0
                        and self.labels_issued < config.feedback_budget):
                    self.feedback_session(global_step)
                elif config.consistency_after_budget and self.heads:
                    self.consistency_update()
                    with ground_truth_guard():
                        self.buffer.relabel(self.ensemble.mean_rewards)
                    self._event("relabel")

            action = act(self.policy, state.observation, "stochastic", self.agent_rng)
            nxt, gt_reward = self.env.step(state, action)
            if self.learned:
                stored = float(self.ensemble.mean_rewards(
                    state.observation[None, :], action[None, :])[0])
            else:
                stored = gt_reward
            self.buffer.push(Transition(state.observation, action, nxt.observation,
                                        stored, gt_reward, nxt.done, episode, step_in_ep))
            ep_gt += gt_reward
            ep_learned += stored
            global_step += 1
            step_in_ep += 1
            state = nxt

            if self.buffer.size >= config.agent.batch_size:
                batch = self.buffer.sample_transitions(config.agent.batch_size,
                                                       self.agent_rng)
                with ground_truth_guard():
                    losses = sac_update(self.policy, batch, self.agent_rng)

            if nxt.done:
                self.stats.update(ep_gt, global_step)
                self._episode_row(episode, global_step, "train", ep_gt, ep_learned, losses)
                episode += 1
                step_in_ep = 0
                ep_gt, ep_learned = 0.0, 0.0
                state = self.env.reset(int(self.env_rng.integers(2**31)))

            if config.eval_every_steps and global_step % config.eval_every_steps == 0:
                self._evaluate(global_step)

        summary = self._summary(time.perf_counter() - t_start)
        result = RunResult(config, self.seed, self.episodes, self.evals, self.events,
                           summary, self.out_dir, dataset=self.dataset)
        if self.out_dir:
            write_run(result, self.audit_rows)
        return result

    def write_checkpoint(self) -> None:
        """Buffer + ensemble snapshot, written before blocking on a human."""
        ckpt = os.path.join(self.out_dir, "checkpoint")
        os.makedirs(ckpt, exist_ok=True)
        self.buffer.save(os.path.join(ckpt, "buffer.npz"))
        if self.ensemble is not None:
            with open(os.path.join(ckpt, "ensemble.json"), "w") as f:
                json.dump(self.ensemble.to_dict(), f)

    def _summary(self, runtime: float) -> dict:
        horizon = self.env.spec.horizon
        returns = np.array([e.gt_return for e in self.episodes])
        return {
            "seed": self.seed,
            "env_id": self.config.env_id,
            "reward_mode": self.config.reward_mode,
            "reward_variant": self.config.reward.variant,
            "aux_objective": (self.config.consistency.objective
                              if self.config.consistency else "none"),
            "strategy": self.config.strategy,
            "teacher_style": self.config.teacher.style,
            "feedback_budget": self.config.feedback_budget,
            "total_steps": self.config.total_steps,
            "horizon": horizon,
            "episodes": len(self.episodes),
            "labels_issued": self.labels_issued,
            "labels_kept": len(self.dataset),
            "sessions_run": self.sessions_run,
            "session_steps": self.session_steps,
            "consistency_ops": sum(h.forward_count for h in self.heads),
            "collapse_warnings": sum(h.collapse_warnings for h in self.heads),
            "performance_shift": PERFORMANCE_SHIFT_PER_STEP * horizon,
            "final_eval_distance": (self.evals[-1]["mean_final_distance"]
                                    if self.evals else None),
            "mean_return_last_10pct": (float(np.mean(returns[-max(1, len(returns) // 10):]))
                                       if len(returns) else None),
            "runtime_seconds": runtime,
        }


def run_experiment(config: RunConfig, seed: int, out_dir: str | None = None,
                   label_provider=None) -> RunResult:
    """Execute one full run; writes metrics/audit/summary when out_dir is given."""
    return _Runner(config, seed, out_dir, label_provider).run()


def write_run(result: RunResult, audit_rows: list[list] | None = None) -> None:
    os.makedirs(result.out_dir, exist_ok=True)
    with open(os.path.join(result.out_dir, "metrics.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRICS_COLUMNS)
        for e in result.episodes:
            writer.writerow([_fmt(getattr(e, c)) for c in METRICS_COLUMNS])
    with open(os.path.join(result.out_dir, "eval.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "mean_gt_return", "mean_final_distance"])
        for row in result.evals:
            writer.writerow([row["step"], repr(row["mean_gt_return"]),
                             repr(row["mean_final_distance"])])
    with open(os.path.join(result.out_dir, "labels_audit.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["session", "seq", "pair_index", "style",
                         "return_first", "return_second", "label"])
        for row in audit_rows or []:
            writer.writerow(row)
    with open(os.path.join(result.out_dir, "summary.json"), "w") as f:
        json.dump(result.summary, f, indent=2, sort_keys=True)


# -- Eq.-style evaluation ------------------------------------------------------------


def episode_performance(returns: np.ndarray, horizon: int) -> np.ndarray:
    """Positive per-episode performance: return shifted by the distance bound.

    The raw returns are sums of -distance terms (always negative); shifting by
    PERFORMANCE_SHIFT_PER_STEP per step makes the ratio's polarity match the
    normalized-returns convention (1 = parity with the reference, bigger is
    better).
    """
    shifted = np.asarray(returns, dtype=np.float64) + PERFORMANCE_SHIFT_PER_STEP * horizon
    return np.maximum(shifted, DENOMINATOR_EPS)


def normalized_return(learned: np.ndarray, reference: np.ndarray) -> float:
    """Mean per-point ratio of learned to reference performance on one grid."""
    learned = np.asarray(learned, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if learned.shape != reference.shape:
        raise ValueError(f"grid mismatch: {learned.shape} vs {reference.shape}")
    return float(np.mean(learned / np.maximum(reference, DENOMINATOR_EPS)))


def final_window_return(learned: np.ndarray, reference: np.ndarray) -> float:
    """normalized_return over the last 10% of episodes (ceil, minimum 1)."""
    learned = np.asarray(learned, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if learned.shape != reference.shape:
        raise ValueError(f"grid mismatch: {learned.shape} vs {reference.shape}")
    n = len(learned)
    if n < 10:
        raise ValueError("need at least 10 episodes for the final-window metric")
    window = math.ceil(0.1 * n)
    return normalized_return(learned[-window:], reference[-window:])


def run_performance_curve(result_or_dir) -> np.ndarray:
    """Per-episode positive performance series for a finished run."""
    if isinstance(result_or_dir, RunResult):
        returns = np.array([e.gt_return for e in result_or_dir.episodes])
        horizon = result_or_dir.summary["horizon"]
    else:
        with open(os.path.join(result_or_dir, "summary.json")) as f:
            horizon = json.load(f)["horizon"]
        returns = []
        with open(os.path.join(result_or_dir, "metrics.csv")) as f:
            for row in csv.DictReader(f):
                returns.append(float(row["gt_return"]))
        returns = np.array(returns)
    return episode_performance(returns, horizon)


# -- collapse probe -------------------------------------------------------------------


def collapse_probe(objective: str, seed: int, env_id: str = "static_feature",
                   collect_steps: int = 3000, epochs: int = 60,
                   batch_size: int = 128, lr: float = 1e-3) -> dict:
    """Train only the consistency task on random-policy data; report the
    embedding variance trajectory. Reproduces the degenerate-encoder regime on
    the static-feature environment."""
    env = make_env(env_id)
    spec = env.spec
    rng = np.random.default_rng(seed)
    buffer = ReplayBuffer(collect_steps, spec.obs_dim, spec.action_dim)
    state = env.reset(int(rng.integers(2**31)))
    episode, step_in_ep = 0, 0
    for _ in range(collect_steps):
        action = rng.uniform(-1.0, 1.0, spec.action_dim)
        nxt, gt = env.step(state, action)
        buffer.push(Transition(state.observation, action, nxt.observation, 0.0, gt,
                               nxt.done, episode, step_in_ep))
        step_in_ep += 1
        state = nxt
        if nxt.done:
            episode += 1
            step_in_ep = 0
            state = env.reset(int(rng.integers(2**31)))

    from .reward import RewardMember

    member = RewardMember(spec.obs_dim, spec.action_dim, RewardConfig(), rng)
    cfg = ConsistencyConfig(objective=objective, epochs_per_update=1,
                            batch_size=batch_size, lr=lr)
    heads = ConsistencyHeads(member, cfg, rng)
    variances = [embedding_variance(member, buffer, 512, rng)]
    for _ in range(epochs):
        train_consistency(heads, buffer, cfg, rng)
        variances.append(embedding_variance(member, buffer, 512, rng))
    return {
        "objective": objective,
        "seed": seed,
        "variances": variances,
        "final_variance": variances[-1],
        "min_variance": float(np.min(variances)),
        "collapse_warnings": heads.collapse_warnings,
    }
