"""Self-supervised temporal-consistency task over the reward encoders.

Predicts the latent embedding of the next state from the fused state-action
embedding. The encoder stack (state/action encoders + fusion trunk) is shared
with one reward-ensemble member by aliasing; the dynamics, projection, and
prediction heads are exclusive to this task. The target branch (projected
next-state embedding) is gradient-stopped.

Two objectives: negative cosine similarity against the target ("simsiam"),
or a temperature-scaled cross-entropy that identifies the true next state
among the batch ("contrastive"). The contrastive form defaults to the
standard formulation; ``literal_form`` switches to the asymmetric published
variant for comparison.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nets import (
    DenseNet,
    LayerSpec,
    ShapeError,
    cosine_rows,
    make_optimizer,
)
from .replay import ReplayBuffer
from .reward import RewardMember


@dataclass
class ConsistencyConfig:
    objective: str = "contrastive"  # "simsiam" | "contrastive"
    temperature: float = 0.1
    epochs_per_update: int = 3
    batch_size: int = 128
    optimizer: str = "adam"
    lr: float = 1e-3
    literal_form: bool = False  # published asymmetric contrastive denominator

    def __post_init__(self) -> None:
        if self.objective not in ("simsiam", "contrastive"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.temperature <= 0.0:
            raise ValueError("temperature must be positive")


@dataclass
class LatentPair:
    """Prediction-branch output (gradient-carrying) and stopped target."""

    predicted: np.ndarray  # [B, p]
    target: np.ndarray  # [B, p], never contributes parameter gradients
    next_states: np.ndarray  # raw s_{t+1}, for the contrastive indicator


class ConsistencyHeads:
    """Task-exclusive heads bolted onto one reward member's encoders."""

    def __init__(self, member: RewardMember, cfg: ConsistencyConfig, rng: np.random.Generator):
        if member.cfg.variant != "fusion":
            raise ValueError("the consistency task requires the fusion reward network")
        self.member = member
        self.cfg = cfg
        e_s = member.cfg.state_embed
        hidden = member.cfg.hidden
        bottleneck = max(1, e_s // 8)
        self.dynamics = DenseNet([LayerSpec(hidden, e_s, "identity")], rng)
        self.projector = DenseNet([LayerSpec(e_s, e_s, "identity")], rng)
        self.predictor = DenseNet(
            [
                LayerSpec(e_s, bottleneck, "relu", bias=False, batch_norm=True),
                LayerSpec(bottleneck, e_s, "identity"),
            ],
            rng,
        )
        self.optimizer = make_optimizer(cfg.optimizer, cfg.lr)
        self.forward_count = 0
        self.train_steps = 0
        self.collapse_warnings = 0

    def head_nets(self) -> list[DenseNet]:
        return [self.dynamics, self.projector, self.predictor]

    def parameters(self) -> list[np.ndarray]:
        shared = [p for net in self.member.encoder_nets() for p in net.parameters()]
        own = [p for net in self.head_nets() for p in net.parameters()]
        return shared + own

    def forward(self, states, actions, next_states, training: bool = False) -> LatentPair:
        """Run the prediction branch (recorded) and the stopped target branch."""
        self.forward_count += 1
        member = self.member
        zs = member.f_s.forward(states, record=True)
        za = member.f_a.forward(actions, record=True)
        fused = member.trunk.forward(np.concatenate([zs, za], axis=1), record=True)
        predicted_next = self.dynamics.forward(fused, record=True)
        projected = self.projector.forward(predicted_next, record=True)
        y_hat = self.predictor.forward(projected, training=training, record=True)
        # target branch: unrecorded forwards, so no gradient can ever flow back
        zs_next = member.f_s.forward(next_states)
        y = self.projector.forward(zs_next)
        return LatentPair(y_hat, y, np.atleast_2d(np.asarray(next_states)))

    def backward(self, upstream_predicted: np.ndarray) -> list[np.ndarray]:
        """Gradients aligned with parameters(), given dL/d(predicted)."""
        pre_tape = self.predictor.backward(upstream_predicted)
        pro_tape = self.projector.backward(pre_tape.input_grad)
        dyn_tape = self.dynamics.backward(pro_tape.input_grad)
        trunk_tape = self.member.trunk.backward(dyn_tape.input_grad)
        e_s = self.member.cfg.state_embed
        s_tape = self.member.f_s.backward(trunk_tape.input_grad[:, :e_s])
        a_tape = self.member.f_a.backward(trunk_tape.input_grad[:, e_s:])
        return (
            s_tape.grads + a_tape.grads + trunk_tape.grads
            + dyn_tape.grads + pro_tape.grads + pre_tape.grads
        )


# -- losses ---------------------------------------------------------------------


def simsiam_loss(pair: LatentPair) -> float:
    """Mean negative cosine similarity between prediction and stopped target."""
    sims, degenerate = cosine_rows(pair.predicted, pair.target)
    return float(np.mean(np.where(degenerate, 0.0, -sims)))


def _simsiam_grads(pair: LatentPair) -> tuple[float, np.ndarray, int]:
    y_hat, y = pair.predicted, pair.target
    n = len(y_hat)
    norms_p = np.linalg.norm(y_hat, axis=1)
    norms_t = np.linalg.norm(y, axis=1)
    degenerate = (norms_p < 1e-8) | (norms_t < 1e-8)
    safe_p = np.where(degenerate, 1.0, norms_p)
    safe_t = np.where(degenerate, 1.0, norms_t)
    sims = np.einsum("ij,ij->i", y_hat, y) / (safe_p * safe_t)
    sims = np.where(degenerate, 0.0, sims)
    loss = float(np.mean(-sims))
    # d(-cos)/d y_hat = -(y/(|y_hat||y|) - cos * y_hat/|y_hat|^2)
    grad = -(
        y / (safe_p * safe_t)[:, None] - sims[:, None] * y_hat / (safe_p**2)[:, None]
    )
    grad[degenerate] = 0.0
    return loss, grad / n, int(degenerate.sum())


def _duplicate_next_state_mask(next_states: np.ndarray) -> np.ndarray:
    """mask[i, j] True where candidate j's raw next state equals anchor i's."""
    return (next_states[:, None, :] == next_states[None, :, :]).all(axis=2)


def contrastive_loss(pair: LatentPair, temperature: float) -> float:
    loss, _, _ = _contrastive_grads(pair, temperature)
    return loss


def _contrastive_grads(pair: LatentPair, temperature: float) -> tuple[float, np.ndarray, int]:
    """Standard form: anchors are predictions, candidates are stopped targets.

    Candidates whose raw next state duplicates the anchor's are excluded from
    the denominator, except the positive itself, which always stays.
    """
    y_hat, y = pair.predicted, pair.target
    n = len(y_hat)
    if n < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    norms_p = np.linalg.norm(y_hat, axis=1)
    norms_t = np.linalg.norm(y, axis=1)
    degenerate = (norms_p < 1e-8) | (norms_t < 1e-8)
    u = y_hat / np.where(norms_p < 1e-8, 1.0, norms_p)[:, None]
    v = y / np.where(norms_t < 1e-8, 1.0, norms_t)[:, None]
    cos = u @ v.T
    allowed = ~_duplicate_next_state_mask(pair.next_states)
    np.fill_diagonal(allowed, True)  # the positive always stays in the denominator
    logits = cos / temperature
    masked = np.where(allowed, logits, -np.inf)
    row_max = masked.max(axis=1)
    exp = np.exp(masked - row_max[:, None])
    denom = exp.sum(axis=1)
    log_softmax_pos = logits.diagonal() - row_max - np.log(denom)
    loss = float(np.mean(-log_softmax_pos))
    softmax = exp / denom[:, None]
    d_cos = (softmax - np.eye(n)) / temperature / n  # dL/d cos_ij, zero where masked
    d_cos[~allowed] = 0.0
    # back through the cosine: dL/d y_hat_i = (sum_j d_cos_ij v_j - (u_i . that) u_i)/|y_hat_i|
    d_u = d_cos @ v
    proj = np.einsum("ij,ij->i", d_u, u)
    d_y_hat = (d_u - proj[:, None] * u) / np.where(norms_p < 1e-8, 1.0, norms_p)[:, None]
    d_y_hat[degenerate] = 0.0
    return loss, d_y_hat, int(degenerate.sum())


def _contrastive_grads_literal(pair: LatentPair, temperature: float):
    """Published asymmetric form, for comparison runs only.

    Numerator exp(cos(pred_i, target_i)/tau); denominator sums over candidates
    k with raw next state different from anchor i's (the positive is excluded),
    using exp(cos(target_i, pred_k) * tau).
    """
    y_hat, y = pair.predicted, pair.target
    n = len(y_hat)
    if n < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    norms_p = np.maximum(np.linalg.norm(y_hat, axis=1), 1e-8)
    norms_t = np.maximum(np.linalg.norm(y, axis=1), 1e-8)
    u = y_hat / norms_p[:, None]
    v = y / norms_t[:, None]
    pos_cos = np.einsum("ij,ij->i", u, v)
    cross = v @ u.T  # cross[i, k] = cos(target_i, pred_k)
    allowed = ~_duplicate_next_state_mask(pair.next_states)
    weights = np.where(allowed, np.exp(cross * temperature), 0.0)
    denom = weights.sum(axis=1)
    usable = denom > 0.0
    loss_rows = -(pos_cos[usable] / temperature - np.log(denom[usable]))
    loss = float(loss_rows.mean()) if usable.any() else 0.0
    m = max(int(usable.sum()), 1)
    d_y_hat = np.zeros_like(y_hat)
    # numerator path: -(1/tau) d cos(pred_i, target_i)/d pred_i
    d_pos = np.where(usable, -1.0 / temperature / m, 0.0)
    d_y_hat += d_pos[:, None] * (v - pos_cos[:, None] * u) / norms_p[:, None]
    # denominator path: each pred_k collects gradient from every usable row i
    frac = np.where(usable[:, None], weights / np.maximum(denom, 1e-300)[:, None], 0.0)
    coef = frac * temperature / m  # dL/d cross_ik
    d_u_k = coef.T @ v - (np.einsum("ik,ik->k", coef, cross))[:, None] * u
    d_y_hat += d_u_k / norms_p[:, None]
    return loss, d_y_hat, 0


@dataclass
class ConsistencyTrace:
    epoch_losses: list[float] = field(default_factory=list)
    collapse_warnings: int = 0


def train_consistency(heads: ConsistencyHeads, buffer: ReplayBuffer, cfg: ConsistencyConfig,
                      rng: np.random.Generator) -> ConsistencyTrace:
    """Descend the configured objective over all buffered transitions.

    Updates the shared encoder parameters and the task heads together, for
    cfg.epochs_per_update passes over the buffer.
    """
    states, actions, next_states = buffer.dynamics_view()
    n = len(states)
    if n == 0:
        raise ValueError("cannot train on an empty buffer")
    trace = ConsistencyTrace()
    for _ in range(cfg.epochs_per_update):
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            if cfg.objective == "contrastive" and len(idx) < 2:
                continue
            pair = heads.forward(states[idx], actions[idx], next_states[idx], training=True)
            if cfg.objective == "simsiam":
                loss, d_pred, collapsed = _simsiam_grads(pair)
            elif cfg.literal_form:
                loss, d_pred, collapsed = _contrastive_grads_literal(pair, cfg.temperature)
            else:
                loss, d_pred, collapsed = _contrastive_grads(pair, cfg.temperature)
            heads.collapse_warnings += collapsed
            grads = heads.backward(d_pred)
            heads.optimizer.step(heads.parameters(), grads)
            heads.train_steps += 1
            losses.append(loss)
        trace.epoch_losses.append(float(np.mean(losses)))
    trace.collapse_warnings = heads.collapse_warnings
    return trace


def sync_shared_params(heads: ConsistencyHeads, member: RewardMember) -> None:
    """Copy the shared encoder stack from the task's member into `member`.

    With the default aliasing (heads built on the same member) this is a no-op
    barrier; across members it overwrites the target's encoders bit-exactly and
    leaves its reward head untouched.
    """
    source = heads.member.encoder_nets()
    target = member.encoder_nets()
    if len(source) != len(target):
        raise ShapeError("encoder stack mismatch")
    for src, dst in zip(source, target):
        if dst is src:
            continue
        dst.copy_params_from(src)


def embedding_variance(member: RewardMember, buffer: ReplayBuffer, sample: int,
                       rng: np.random.Generator) -> float:
    """Mean per-dimension variance of the fused embedding over sampled transitions."""
    n = buffer.size
    if n == 0:
        raise ValueError("empty buffer")
    take = min(sample, n)
    slots = buffer._order()[rng.choice(n, size=take, replace=False)]
    z = member.embed(buffer.states[slots], buffer.actions[slots])
    return float(z.var(axis=0).mean())
