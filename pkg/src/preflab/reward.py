"""Reward ensemble learned from pairwise segment preferences.

Two reward-network variants share the training code:

* ``concat`` — the classic net: raw [state; action] into an MLP trunk.
* ``fusion`` — state and action encoded separately, embeddings concatenated,
  then fused by the trunk. The split keeps the state pathway independent of
  actions, which the temporal-consistency task requires.

Preference probabilities follow the Bradley-Terry model over summed per-step
rewards; the training loss is the binary cross-entropy between the predicted
and labelled preference distributions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nets import Adam, DenseNet, LayerSpec, mlp
from .replay import Segment


@dataclass
class RewardConfig:
    variant: str = "fusion"  # "fusion" | "concat"
    state_embed: int = 20
    action_embed: int = 10
    hidden: int = 64
    trunk_layers: int = 3
    lr: float = 3e-4
    ensemble_size: int = 3

    def __post_init__(self) -> None:
        if self.variant not in ("fusion", "concat"):
            raise ValueError(f"unknown reward net variant {self.variant!r}")


class RewardMember:
    """One reward network: per-step reward in (-1, 1) via a tanh head."""

    def __init__(self, obs_dim: int, action_dim: int, cfg: RewardConfig,
                 rng: np.random.Generator):
        self.cfg = cfg
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        if cfg.variant == "fusion":
            self.f_s = mlp([obs_dim, cfg.state_embed], "leaky_relu",
                           rng, final_activation="leaky_relu")
            self.f_a = mlp([action_dim, cfg.action_embed], "leaky_relu",
                           rng, final_activation="leaky_relu")
            trunk_dims = [cfg.state_embed + cfg.action_embed] + [cfg.hidden] * cfg.trunk_layers
            self.trunk = mlp(trunk_dims, "leaky_relu", rng, final_activation="leaky_relu")
        else:
            self.f_s = self.f_a = None
            trunk_dims = [obs_dim + action_dim] + [cfg.hidden] * cfg.trunk_layers
            self.trunk = mlp(trunk_dims, "leaky_relu", rng, final_activation="leaky_relu")
        self.head = DenseNet([LayerSpec(cfg.hidden, 1, "tanh")], rng)
        self.optimizer = Adam(cfg.lr)

    def _nets(self) -> list[DenseNet]:
        if self.cfg.variant == "fusion":
            return [self.f_s, self.f_a, self.trunk, self.head]
        return [self.trunk, self.head]

    def parameters(self) -> list[np.ndarray]:
        return [p for net in self._nets() for p in net.parameters()]

    def encoder_nets(self) -> list[DenseNet]:
        """The shared-parameter stack (everything below the reward head)."""
        if self.cfg.variant != "fusion":
            raise ValueError("only the fusion variant has a shared encoder stack")
        return [self.f_s, self.f_a, self.trunk]

    def embed(self, states: np.ndarray, actions: np.ndarray, record: bool = False) -> np.ndarray:
        """Fused state-action embedding (trunk output)."""
        if self.cfg.variant == "fusion":
            zs = self.f_s.forward(states, record=record)
            za = self.f_a.forward(actions, record=record)
            fused_in = np.concatenate([zs, za], axis=1)
        else:
            fused_in = np.concatenate([states, actions], axis=1)
        return self.trunk.forward(fused_in, record=record)

    def rewards(self, states: np.ndarray, actions: np.ndarray, record: bool = False) -> np.ndarray:
        z = self.embed(np.atleast_2d(states), np.atleast_2d(actions), record=record)
        return self.head.forward(z, record=record)[:, 0]

    def backward(self, upstream_rewards: np.ndarray) -> list[np.ndarray]:
        """Gradients of a scalar loss given dL/d(reward) per row of the last
        recorded rewards() call, aligned with parameters()."""
        head_tape = self.head.backward(upstream_rewards[:, None])
        trunk_tape = self.trunk.backward(head_tape.input_grad)
        grads: list[np.ndarray] = []
        if self.cfg.variant == "fusion":
            d_fused = trunk_tape.input_grad
            s_tape = self.f_s.backward(d_fused[:, : self.cfg.state_embed])
            a_tape = self.f_a.backward(d_fused[:, self.cfg.state_embed :])
            grads.extend(s_tape.grads)
            grads.extend(a_tape.grads)
        grads.extend(trunk_tape.grads)
        grads.extend(head_tape.grads)
        return grads

    def to_dict(self) -> dict:
        return {
            "variant": self.cfg.variant,
            "nets": [net.to_dict() for net in self._nets()],
        }

    def load_dict(self, d: dict) -> None:
        for net, blob in zip(self._nets(), d["nets"]):
            net.copy_params_from(DenseNet.from_dict(blob))


def predict_reward(member: RewardMember, state: np.ndarray, action: np.ndarray) -> float:
    """Scalar tanh-bounded reward for a single (s, a)."""
    return float(member.rewards(np.atleast_2d(state), np.atleast_2d(action))[0])


def segment_return(member: RewardMember, segment: Segment) -> float:
    """Predicted return: sum of per-step rewards over the segment."""
    return float(member.rewards(segment.states, segment.actions).sum())


def preference_probability(member: RewardMember, seg_a: Segment, seg_b: Segment) -> float:
    ra = segment_return(member, seg_a)
    rb = segment_return(member, seg_b)
    return _softmax_first(ra, rb)


def _softmax_first(ra: float, rb: float) -> float:
    """exp(ra) / (exp(ra) + exp(rb)) with max-subtraction for stability."""
    m = max(ra, rb)
    ea, eb = np.exp(ra - m), np.exp(rb - m)
    return float(ea / (ea + eb))


def _log_sigmoid(x: np.ndarray) -> np.ndarray:
    # log(1/(1+exp(-x))) = -softplus(-x), computed without overflow
    return np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))


@dataclass
class PreferenceTriplet:
    """Two segments and a preference distribution (p_first, p_second)."""

    seg_a: Segment
    seg_b: Segment
    label: tuple[float, float]

    def __post_init__(self) -> None:
        if abs(self.label[0] + self.label[1] - 1.0) > 1e-12:
            raise ValueError(f"label {self.label} does not sum to 1")


class PreferenceDataset:
    """Append-only store of labelled preference triplets."""

    def __init__(self, max_size: int | None = None):
        self.triplets: list[PreferenceTriplet] = []
        self.max_size = max_size

    def __len__(self) -> int:
        return len(self.triplets)

    def append(self, triplet: PreferenceTriplet) -> None:
        if self.max_size is not None and len(self.triplets) >= self.max_size:
            raise RuntimeError(f"preference dataset exceeded its budget of {self.max_size}")
        self.triplets.append(triplet)


def _stack_triplets(triplets: list[PreferenceTriplet]):
    """Concatenate all segment steps into one (states, actions) batch.

    Rows are ordered [seg_a of t0, seg_b of t0, seg_a of t1, ...]; returns the
    per-segment slice boundaries so segment sums can be undone per triplet.
    """
    states = np.concatenate([arr for t in triplets for arr in (t.seg_a.states, t.seg_b.states)])
    actions = np.concatenate(
        [arr for t in triplets for arr in (t.seg_a.actions, t.seg_b.actions)]
    )
    lengths = np.array([n for t in triplets for n in (len(t.seg_a), len(t.seg_b))])
    return states, actions, lengths


def _pair_returns(member: RewardMember, triplets: list[PreferenceTriplet],
                  record: bool = False):
    states, actions, lengths = _stack_triplets(triplets)
    rewards = member.rewards(states, actions, record=record)
    sums = np.add.reduceat(rewards, np.concatenate([[0], np.cumsum(lengths)[:-1]]))
    return sums[0::2], sums[1::2], lengths


def preference_loss(member: RewardMember, triplets: list[PreferenceTriplet]) -> float:
    """Mean binary cross-entropy between predicted and labelled preferences."""
    if not triplets:
        raise ValueError("empty preference batch")
    ra, rb, _ = _pair_returns(member, triplets)
    diff = ra - rb
    y1 = np.array([t.label[0] for t in triplets])
    y2 = np.array([t.label[1] for t in triplets])
    return float(-np.mean(y1 * _log_sigmoid(diff) + y2 * _log_sigmoid(-diff)))


def preference_loss_grads(member: RewardMember,
                          triplets: list[PreferenceTriplet]) -> tuple[float, list[np.ndarray]]:
    """Loss and its gradients w.r.t. member.parameters()."""
    ra, rb, lengths = _pair_returns(member, triplets, record=True)
    diff = ra - rb
    y1 = np.array([t.label[0] for t in triplets])
    p1 = 1.0 / (1.0 + np.exp(-np.clip(diff, -500, 500)))
    y2 = 1.0 - y1
    loss = float(-np.mean(y1 * _log_sigmoid(diff) + y2 * _log_sigmoid(-diff)))
    # dL/dR_a = (p1 - y1)/B for each triplet, dL/dR_b the negative
    d_pair = (p1 - y1) / len(triplets)
    per_segment = np.empty(2 * len(triplets))
    per_segment[0::2] = d_pair
    per_segment[1::2] = -d_pair
    upstream = np.repeat(per_segment, lengths)
    return loss, member.backward(upstream)


def _preference_loss_step(member: RewardMember, triplets: list[PreferenceTriplet]) -> float:
    loss, grads = preference_loss_grads(member, triplets)
    member.optimizer.step(member.parameters(), grads)
    return loss


def preference_accuracy(member: RewardMember, triplets: list[PreferenceTriplet]) -> float:
    """Fraction of non-tied labels whose preferred side has the higher return."""
    ra, rb, _ = _pair_returns(member, triplets)
    y1 = np.array([t.label[0] for t in triplets])
    decided = y1 != 0.5
    if not decided.any():
        return 1.0
    predicted_first = (ra - rb) > 0.0
    return float(np.mean(predicted_first[decided] == (y1[decided] > 0.5)))


class RewardEnsemble:
    """Independently initialized reward members with one optimizer each."""

    def __init__(self, obs_dim: int, action_dim: int, cfg: RewardConfig, seed: int):
        self.cfg = cfg
        seeds = np.random.SeedSequence(seed).spawn(cfg.ensemble_size)
        self.members = [
            RewardMember(obs_dim, action_dim, cfg, np.random.default_rng(s)) for s in seeds
        ]

    def __len__(self) -> int:
        return len(self.members)

    def mean_rewards(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Ensemble-mean per-step rewards, computed in one full-array pass.

        This is the single code path used both for relabelling and for any
        exactness checks against stored rewards; splitting it into different
        batch shapes would break bit-level reproducibility.
        """
        total = np.zeros(len(np.atleast_2d(states)))
        for member in self.members:
            total += member.rewards(states, actions)
        return total / len(self.members)

    def member_segment_returns(self, segments: list[Segment]) -> np.ndarray:
        """[E, n_segments] predicted returns for a flat list of segments."""
        states = np.concatenate([s.states for s in segments])
        actions = np.concatenate([s.actions for s in segments])
        lengths = np.array([len(s) for s in segments])
        offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        out = np.zeros((len(self.members), len(segments)))
        for e, member in enumerate(self.members):
            out[e] = np.add.reduceat(member.rewards(states, actions), offsets)
        return out

    def to_dict(self) -> dict:
        return {"format": "reward-ensemble", "version": 1,
                "members": [m.to_dict() for m in self.members]}

    def load_dict(self, d: dict) -> None:
        if d.get("version") != 1:
            raise ValueError("unsupported ensemble checkpoint version")
        for m, blob in zip(self.members, d["members"]):
            m.load_dict(blob)


def ensemble_disagreement(ensemble: RewardEnsemble, seg_a: Segment, seg_b: Segment) -> float:
    """Population variance of the members' preference probabilities."""
    if len(ensemble) < 2:
        raise ValueError("disagreement needs an ensemble of at least 2 members")
    probs = np.array([preference_probability(m, seg_a, seg_b) for m in ensemble.members])
    # centering on the first member keeps identical members at exactly zero
    return float((probs - probs[0]).var())


def binary_entropy(p: float) -> float:
    if p <= 0.0 or p >= 1.0:
        return 0.0
    return float(-p * np.log(p) - (1.0 - p) * np.log(1.0 - p))


def predictor_entropy(ensemble: RewardEnsemble, seg_a: Segment, seg_b: Segment,
                      member_index: int | None = None) -> float:
    """Entropy of the (mean or single-member) preference probability."""
    if member_index is not None:
        p = preference_probability(ensemble.members[member_index], seg_a, seg_b)
    else:
        p = float(
            np.mean([preference_probability(m, seg_a, seg_b) for m in ensemble.members])
        )
    return binary_entropy(p)


@dataclass
class TrainResult:
    losses: list[list[float]] = field(default_factory=list)  # per member, per epoch
    epochs_run: list[int] = field(default_factory=list)
    final_accuracy: list[float] = field(default_factory=list)


def train_preferences(ensemble: RewardEnsemble, dataset: PreferenceDataset, epochs: int,
                      batch_size: int, rng: np.random.Generator,
                      target_accuracy: float | None = None) -> TrainResult:
    """Train every member independently on shuffled minibatches.

    Each member gets its own shuffle stream. With `target_accuracy`, a member
    stops early once its full-dataset training accuracy reaches the target.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty preference dataset")
    result = TrainResult()
    member_rngs = [np.random.default_rng(rng.integers(2**63)) for _ in ensemble.members]
    for member, mrng in zip(ensemble.members, member_rngs):
        trace: list[float] = []
        epochs_done = 0
        for _ in range(epochs):
            order = mrng.permutation(len(dataset))
            epoch_losses = []
            for lo in range(0, len(order), batch_size):
                batch = [dataset.triplets[i] for i in order[lo : lo + batch_size]]
                epoch_losses.append(_preference_loss_step(member, batch))
            trace.append(float(np.mean(epoch_losses)))
            epochs_done += 1
            if (
                target_accuracy is not None
                and preference_accuracy(member, dataset.triplets) >= target_accuracy
            ):
                break
        result.losses.append(trace)
        result.epochs_run.append(epochs_done)
        result.final_accuracy.append(preference_accuracy(member, dataset.triplets))
    return result
