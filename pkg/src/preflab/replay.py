"""Transition storage, fixed-length segment extraction, and reward relabelling.

Ground-truth rewards are stored next to learned rewards but are access-gated:
reward-model, consistency, and agent training run inside ``ground_truth_guard``
and any attempt to read ground truth there raises. Teachers and evaluation
read it outside the guard.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np


class GroundTruthAccessError(RuntimeError):
    """Ground-truth rewards were read from a learner code path."""


_GT_FORBIDDEN = [False]


@contextmanager
def ground_truth_guard():
    """Forbid ground-truth reward access for the duration of the block."""
    _GT_FORBIDDEN[0] = True
    try:
        yield
    finally:
        _GT_FORBIDDEN[0] = False


def _check_gt_access() -> None:
    if _GT_FORBIDDEN[0]:
        raise GroundTruthAccessError(
            "ground-truth rewards are not readable inside ground_truth_guard"
        )


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    next_state: np.ndarray
    learned_reward: float
    ground_truth_reward: float
    done: bool  # episode boundary (includes time limits)
    episode_id: int
    step_index: int
    terminal: bool = False  # true environment termination; Bellman cutoff


@dataclass
class AgentBatch:
    """Learner view of sampled transitions; carries no ground truth."""

    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    learned_rewards: np.ndarray
    dones: np.ndarray  # episode boundaries
    terminals: np.ndarray  # environment terminations (no bootstrap past these)
    indices: np.ndarray


class Segment:
    """A contiguous length-l window of one episode."""

    def __init__(self, states, actions, gt_rewards, episode_id: int, start_step: int):
        self.states = np.asarray(states)
        self.actions = np.asarray(actions)
        self._gt_rewards = np.asarray(gt_rewards)
        self.episode_id = int(episode_id)
        self.start_step = int(start_step)

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def gt_rewards(self) -> np.ndarray:
        """Per-step ground-truth rewards; teacher/evaluation use only."""
        _check_gt_access()
        return self._gt_rewards

    def gt_return(self) -> float:
        _check_gt_access()
        return float(self._gt_rewards.sum())


class NotEnoughExperience(RuntimeError):
    """Recoverable: the buffer cannot yet serve the request."""


class ReplayBuffer:
    """Ring buffer of transitions with episode bookkeeping.

    FIFO eviction on overflow; episodes must be pushed contiguously and a done
    transition closes its episode id for good.
    """

    def __init__(self, capacity: int, obs_dim: int, action_dim: int):
        self.capacity = capacity
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        # learned rewards come from a tanh head; reference runs that store raw
        # environment rewards switch this off
        self.enforce_reward_range = True
        self.states = np.zeros((capacity, obs_dim))
        self.actions = np.zeros((capacity, action_dim))
        self.next_states = np.zeros((capacity, obs_dim))
        self.learned_rewards = np.zeros(capacity)
        self._gt_rewards = np.zeros(capacity)
        self.dones = np.zeros(capacity, dtype=bool)
        self.terminals = np.zeros(capacity, dtype=bool)
        self.episode_ids = np.full(capacity, -1, dtype=np.int64)
        self.step_indices = np.zeros(capacity, dtype=np.int64)
        self.inserted = 0
        self._open_episode: int | None = None
        self._closed_episodes: set[int] = set()

    @property
    def size(self) -> int:
        return min(self.inserted, self.capacity)

    def push(self, t: Transition) -> None:
        state = np.asarray(t.state, dtype=np.float64)
        action = np.asarray(t.action, dtype=np.float64)
        next_state = np.asarray(t.next_state, dtype=np.float64)
        if state.shape != (self.obs_dim,) or next_state.shape != (self.obs_dim,):
            raise ValueError(f"observation shape mismatch: {state.shape}")
        if action.shape != (self.action_dim,):
            raise ValueError(f"action shape mismatch: {action.shape}")
        if self.enforce_reward_range and not -1.0 <= t.learned_reward <= 1.0:
            raise ValueError(f"learned reward {t.learned_reward} outside [-1, 1]")
        if t.episode_id in self._closed_episodes:
            raise ValueError(f"episode {t.episode_id} already ended with done")
        if self._open_episode is None:
            self._open_episode = t.episode_id
        elif t.episode_id != self._open_episode:
            raise ValueError(
                f"episode {self._open_episode} still open; interleaved episodes are rejected"
            )
        idx = self.inserted % self.capacity
        self.states[idx] = state
        self.actions[idx] = action
        self.next_states[idx] = next_state
        self.learned_rewards[idx] = t.learned_reward
        self._gt_rewards[idx] = t.ground_truth_reward
        self.dones[idx] = t.done
        self.terminals[idx] = t.terminal
        self.episode_ids[idx] = t.episode_id
        self.step_indices[idx] = t.step_index
        self.inserted += 1
        if t.done:
            self._closed_episodes.add(t.episode_id)
            self._open_episode = None

    # -- segment extraction ---------------------------------------------------

    def _order(self) -> np.ndarray:
        """Indices of live slots in insertion order."""
        if self.inserted <= self.capacity:
            return np.arange(self.inserted)
        head = self.inserted % self.capacity
        return np.concatenate([np.arange(head, self.capacity), np.arange(head)])

    def valid_segment_starts(self, length: int) -> np.ndarray:
        """Positions (into insertion order) where an l-window stays inside one episode."""
        order = self._order()
        if len(order) < length:
            return np.zeros(0, dtype=np.int64)
        eps = self.episode_ids[order]
        steps = self.step_indices[order]
        n = len(order) - length + 1
        same_episode = eps[:n] == eps[length - 1:]
        consecutive = steps[length - 1:] - steps[:n] == length - 1
        return np.nonzero(same_episode & consecutive)[0]

    def extract_segment(self, start: int, length: int) -> Segment:
        order = self._order()
        idx = order[start : start + length]
        return Segment(
            self.states[idx].copy(),
            self.actions[idx].copy(),
            self._gt_rewards[idx].copy(),
            self.episode_ids[idx[0]],
            self.step_indices[idx[0]],
        )

    def sample_segment_pairs(self, count: int, length: int,
                             rng: np.random.Generator) -> list[tuple[Segment, Segment]]:
        starts = self.valid_segment_starts(length)
        if len(starts) == 0:
            raise NotEnoughExperience(f"no stored episode provides a window of length {length}")
        pairs = []
        for _ in range(count):
            a = int(starts[rng.integers(len(starts))])
            b = int(starts[rng.integers(len(starts))])
            seg_a = self.extract_segment(a, length)
            seg_b = self.extract_segment(b, length)
            assert len(seg_a) == length and len(seg_b) == length
            assert np.all(self.episode_ids[self._order()[a : a + length]] == seg_a.episode_id)
            pairs.append((seg_a, seg_b))
        return pairs

    # -- sampling and relabelling ----------------------------------------------

    def sample_transitions(self, batch: int, rng: np.random.Generator) -> AgentBatch:
        if batch > self.size:
            raise NotEnoughExperience(f"requested {batch} of {self.size} stored transitions")
        idx = rng.choice(self.size, size=batch, replace=False)
        slots = self._order()[idx]
        return AgentBatch(
            states=self.states[slots],
            actions=self.actions[slots],
            next_states=self.next_states[slots],
            learned_rewards=self.learned_rewards[slots],
            dones=self.dones[slots],
            terminals=self.terminals[slots],
            indices=slots,
        )

    def dynamics_view(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(s, a, s') arrays over the whole buffer; no rewards of any kind."""
        slots = self._order()
        return self.states[slots], self.actions[slots], self.next_states[slots]

    def relabel(self, reward_fn) -> None:
        """Overwrite every stored learned reward with reward_fn(states, actions).

        reward_fn must be the ensemble-mean batched predictor; the whole buffer
        goes through one call so the stored values are bit-identical to any
        later recomputation through the same path.
        """
        n = self.size
        if n == 0:
            return
        self.learned_rewards[:n] = reward_fn(self.states[:n], self.actions[:n])

    def gt_episode_return(self, episode_id: int) -> float:
        _check_gt_access()
        mask = self.episode_ids[: self.size] == episode_id
        return float(self._gt_rewards[: self.size][mask].sum())

    # -- checkpointing ----------------------------------------------------------

    def save(self, path: str) -> None:
        np.savez(
            path,
            version=np.int64(1),
            capacity=np.int64(self.capacity),
            inserted=np.int64(self.inserted),
            states=self.states,
            actions=self.actions,
            next_states=self.next_states,
            learned_rewards=self.learned_rewards,
            gt_rewards=self._gt_rewards,
            dones=self.dones,
            terminals=self.terminals,
            episode_ids=self.episode_ids,
            step_indices=self.step_indices,
            closed_episodes=np.array(sorted(self._closed_episodes), dtype=np.int64),
            open_episode=np.int64(-1 if self._open_episode is None else self._open_episode),
        )

    @classmethod
    def load(cls, path: str) -> "ReplayBuffer":
        data = np.load(path)
        if int(data["version"]) != 1:
            raise ValueError("unsupported buffer checkpoint version")
        buf = cls(int(data["capacity"]), data["states"].shape[1], data["actions"].shape[1])
        buf.inserted = int(data["inserted"])
        buf.states = data["states"]
        buf.actions = data["actions"]
        buf.next_states = data["next_states"]
        buf.learned_rewards = data["learned_rewards"]
        buf._gt_rewards = data["gt_rewards"]
        buf.dones = data["dones"]
        buf.terminals = data["terminals"]
        buf.episode_ids = data["episode_ids"]
        buf.step_indices = data["step_indices"]
        buf._closed_episodes = set(int(e) for e in data["closed_episodes"])
        open_ep = int(data["open_episode"])
        buf._open_episode = None if open_ep < 0 else open_ep
        return buf
