"""Toy environments with analytic ground-truth rewards.

Three environments share one interface:

* ``PointMass2D`` — damped point mass steered toward a per-episode goal,
  reward = -distance(position, goal). The main benchmark.
* ``StaticFeatureEnv`` — PointMass2D with a large constant feature block
  appended to every observation, so temporally adjacent observations are
  nearly parallel (cosine > 0.99). Recreates the conditions under which the
  cosine-based consistency objective degenerates.
* ``Chain`` — tiny discrete chain used for brute-force enumeration oracles.

Ground-truth rewards are produced by ``step`` and are consumed only by
simulated teachers and evaluation code; see replay.ground_truth_guard.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ProtocolError(RuntimeError):
    """Environment driven outside its contract (e.g. stepping a done state)."""


@dataclass
class EnvSpec:
    env_id: str
    obs_dim: int
    action_dim: int
    horizon: int
    reward_id: str
    renderable_2d: bool = False
    # observation slices for the renderer (position / goal), when renderable
    position_slice: tuple[int, int] = (0, 2)
    goal_slice: tuple[int, int] = (4, 6)


@dataclass
class EnvState:
    observation: np.ndarray
    step_index: int
    done: bool


class PointMass2D:
    """Damped 2D point mass; observation is [position, velocity, goal].

    Dynamics: v' = damping * v + dt * a, p' = clip(p + dt * v', arena).
    Reward: -||p' - goal||_2, always in (-r_max, 0].
    """

    DT = 0.05
    DAMPING = 0.95
    ARENA = 2.0  # positions clipped to [-ARENA, ARENA]^2
    START = 1.8  # start positions drawn from [-START, START]^2
    GOAL = 1.5  # goals drawn from [-GOAL, GOAL]^2
    HORIZON = 100

    def __init__(self, horizon: int | None = None):
        self.spec = EnvSpec(
            env_id="point_mass",
            obs_dim=6,
            action_dim=2,
            horizon=horizon or self.HORIZON,
            reward_id="neg_goal_distance",
            renderable_2d=True,
        )
        self._pos = np.zeros(2)
        self._vel = np.zeros(2)
        self._goal = np.zeros(2)
        self._t = 0
        self._started = False
        self.clipped_action_count = 0

    def reset(self, seed: int) -> EnvState:
        rng = np.random.default_rng(seed)
        self._pos = rng.uniform(-self.START, self.START, size=2)
        self._vel = np.zeros(2)
        self._goal = rng.uniform(-self.GOAL, self.GOAL, size=2)
        self._t = 0
        self._started = True
        return EnvState(self._observe(), 0, False)

    def _observe(self) -> np.ndarray:
        return np.concatenate([self._pos, self._vel, self._goal])

    def step(self, state: EnvState, action: np.ndarray) -> tuple[EnvState, float]:
        if not self._started:
            raise ProtocolError("step before reset")
        if state.done:
            raise ProtocolError("step called on a done state")
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (2,):
            raise ValueError(f"action shape {action.shape}, expected (2,)")
        clipped = np.clip(action, -1.0, 1.0)
        if not np.array_equal(clipped, action):
            self.clipped_action_count += 1
        self._vel = self.DAMPING * self._vel + self.DT * clipped
        self._pos = np.clip(self._pos + self.DT * self._vel, -self.ARENA, self.ARENA)
        self._t += 1
        reward = -float(np.linalg.norm(self._pos - self._goal))
        done = self._t >= self.spec.horizon
        return EnvState(self._observe(), self._t, done), reward

    def distance_to_goal(self) -> float:
        return float(np.linalg.norm(self._pos - self._goal))


class StaticFeatureEnv:
    """PointMass2D with a constant per-episode feature block appended.

    The block is a fixed goal/context direction plus a small per-episode
    offset, so it is exactly constant within an episode, differs across
    episodes, and dominates the dynamic part everywhere: any two observations
    in the buffer are nearly parallel (adjacent ones above cosine 0.99), the
    regime in which cosine-based consistency training tends to degenerate.
    """

    N_STATIC = 16
    STATIC_NORM = 70.0  # >= 20x the dynamic observation norm bound (~3.5)
    EPISODE_JITTER = 0.5

    def __init__(self, horizon: int | None = None):
        self.base = PointMass2D(horizon)
        b = self.base.spec
        self.spec = EnvSpec(
            env_id="static_feature",
            obs_dim=b.obs_dim + self.N_STATIC,
            action_dim=b.action_dim,
            horizon=b.horizon,
            reward_id=b.reward_id,
            renderable_2d=True,
        )
        direction = np.random.default_rng(0x57A71C).normal(size=self.N_STATIC)
        self._base_block = direction / np.linalg.norm(direction) * self.STATIC_NORM
        self._static = np.zeros(self.N_STATIC)

    def reset(self, seed: int) -> EnvState:
        state = self.base.reset(seed)
        rng = np.random.default_rng((seed, 0x57A71C))
        self._static = self._base_block + rng.normal(scale=self.EPISODE_JITTER,
                                                     size=self.N_STATIC)
        return EnvState(np.concatenate([state.observation, self._static]), 0, False)

    def step(self, state: EnvState, action: np.ndarray) -> tuple[EnvState, float]:
        inner = EnvState(state.observation[: self.base.spec.obs_dim], state.step_index, state.done)
        nxt, reward = self.base.step(inner, action)
        obs = np.concatenate([nxt.observation, self._static])
        return EnvState(obs, nxt.step_index, nxt.done), reward

    def distance_to_goal(self) -> float:
        return self.base.distance_to_goal()


class Chain:
    """Deterministic discrete chain of `n_states` cells, one-hot observations.

    An action's sign moves the agent left/right (clipped at the ends); reward 1
    is paid for every transition that lands on the rightmost cell. Small enough
    that every trajectory can be enumerated.
    """

    def __init__(self, n_states: int = 5, horizon: int = 6):
        assert n_states <= 5 and horizon <= 6
        self.n_states = n_states
        self.spec = EnvSpec(
            env_id="chain",
            obs_dim=n_states,
            action_dim=1,
            horizon=horizon,
            reward_id="rightmost_cell",
            renderable_2d=False,
        )
        self._cell = 0
        self._t = 0
        self._started = False

    def reset(self, seed: int) -> EnvState:
        rng = np.random.default_rng(seed)
        self._cell = int(rng.integers(self.n_states))
        self._t = 0
        self._started = True
        return EnvState(self._observe(), 0, False)

    def _observe(self) -> np.ndarray:
        obs = np.zeros(self.n_states)
        obs[self._cell] = 1.0
        return obs

    def step(self, state: EnvState, action: np.ndarray) -> tuple[EnvState, float]:
        if not self._started:
            raise ProtocolError("step before reset")
        if state.done:
            raise ProtocolError("step called on a done state")
        a = float(np.clip(np.asarray(action, dtype=np.float64).reshape(-1)[0], -1.0, 1.0))
        self._cell = min(self._cell + 1, self.n_states - 1) if a > 0 else max(self._cell - 1, 0)
        self._t += 1
        reward = 1.0 if self._cell == self.n_states - 1 else 0.0
        done = self._t >= self.spec.horizon
        return EnvState(self._observe(), self._t, done), reward


ENV_REGISTRY = {
    "point_mass": PointMass2D,
    "static_feature": StaticFeatureEnv,
    "chain": Chain,
}


def make_env(env_id: str, horizon: int | None = None):
    if env_id not in ENV_REGISTRY:
        raise ValueError(f"unknown env id {env_id!r}; known: {sorted(ENV_REGISTRY)}")
    if env_id == "chain":
        return Chain() if horizon is None else Chain(horizon=horizon)
    return ENV_REGISTRY[env_id](horizon)


# -- rendering ----------------------------------------------------------------


class RenderError(RuntimeError):
    pass


def render_trace(segment, spec: EnvSpec) -> dict:
    """Per-timestep 2D positions plus the goal marker, as a JSON-ready dict.

    `segment` must expose .states (l x obs_dim) from a renderable environment.
    """
    if not spec.renderable_2d:
        raise RenderError(f"environment {spec.env_id!r} has no 2D rendering")
    p0, p1 = spec.position_slice
    g0 = spec.goal_slice[0]
    states = np.asarray(segment.states)
    return {
        "version": 1,
        "env_id": spec.env_id,
        "frames": [{"x": float(row[0]), "y": float(row[1])} for row in states[:, p0:p1]],
        "goal": {"x": float(states[0, g0]), "y": float(states[0, g0 + 1])},
        "bounds": PointMass2D.ARENA,
    }
