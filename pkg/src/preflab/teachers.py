"""Simulated teachers: six labelling styles over ground-truth segment returns.

Every style reduces to the oracle comparison of summed ground-truth rewards,
then perturbs it: discarding queries (skip), flipping labels (mistake),
reweighting steps (myopic), widening the tieband (equal), or sampling from a
softmax over returns (noisy). Exactly tied returns are labelled Equal by every
style.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .replay import Segment

STYLES = ("oracle", "skip", "myopic", "equal", "mistake", "noisy")


class Label(enum.Enum):
    PREFER_FIRST = "first"
    PREFER_SECOND = "second"
    EQUAL = "equal"
    DISCARD = "discard"


LABEL_DISTRIBUTIONS = {
    Label.PREFER_FIRST: (1.0, 0.0),
    Label.PREFER_SECOND: (0.0, 1.0),
    Label.EQUAL: (0.5, 0.5),
}


@dataclass
class TeacherConfig:
    style: str = "oracle"
    gamma_myopic: float = 0.9
    skip_rate: float = 0.1
    mistake_rate: float = 0.1
    equal_threshold: float = 0.005  # fraction of mean recent episode return
    rationality: float = 1.0  # softmax beta for the noisy style
    myopic_late_emphasis: bool = True  # weight gamma^(l-1-t); False = plain gamma^t
    seed: int = 0

    def __post_init__(self) -> None:
        if self.style not in STYLES:
            raise ValueError(f"unknown teacher style {self.style!r}")
        for rate in (self.skip_rate, self.mistake_rate):
            if not 0.0 <= rate <= 1.0:
                raise ValueError("rates must lie in [0, 1]")
        if not 0.0 < self.gamma_myopic <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.rationality <= 0.0:
            raise ValueError("rationality must be positive")


class ConfigurationError(RuntimeError):
    pass


class ReturnStats:
    """Ground-truth episode returns observed over the last `window` policy steps."""

    def __init__(self, window: int):
        self.window = window
        self._entries: deque[tuple[int, float]] = deque()

    def update(self, episode_return: float, step: int) -> None:
        self._entries.append((step, episode_return))
        self._evict(step)

    def _evict(self, now: int) -> None:
        while self._entries and self._entries[0][0] < now - self.window:
            self._entries.popleft()

    def mean(self) -> float:
        if not self._entries:
            return 0.0
        return float(np.mean([r for _, r in self._entries]))

    def __len__(self) -> int:
        return len(self._entries)


def _round_half_up(x: float) -> int:
    return max(int(np.floor(x + 0.5)), 0)


@dataclass
class LabelDecision:
    label: Label
    return_first: float
    return_second: float
    perturbed: bool = False


class Teacher:
    """Stateful labeller; owns its RNG so a fixed seed replays identically."""

    def __init__(self, cfg: TeacherConfig):
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.last_decisions: list[LabelDecision] = []

    def _returns(self, seg: Segment) -> float:
        if self.cfg.style == "myopic":
            l = len(seg)
            t = np.arange(l)
            exponent = (l - 1 - t) if self.cfg.myopic_late_emphasis else t
            weights = self.cfg.gamma_myopic**exponent
            return float((seg.gt_rewards * weights).sum())
        return float(seg.gt_rewards.sum())

    @staticmethod
    def _compare(r1: float, r2: float) -> Label:
        if r1 > r2:
            return Label.PREFER_FIRST
        if r2 > r1:
            return Label.PREFER_SECOND
        return Label.EQUAL

    def label_batch(self, queries: list[tuple[Segment, Segment]],
                    stats: ReturnStats | None = None) -> list[Label]:
        cfg = self.cfg
        if cfg.style == "equal" and stats is None:
            raise ConfigurationError("the 'equal' style needs running return statistics")
        decisions: list[LabelDecision] = []
        for seg_a, seg_b in queries:
            r1, r2 = self._returns(seg_a), self._returns(seg_b)
            if cfg.style == "noisy":
                if r1 == r2:
                    label = Label.EQUAL
                else:
                    n1 = cfg.rationality * r1 / len(seg_a)
                    n2 = cfg.rationality * r2 / len(seg_b)
                    m = max(n1, n2)
                    p_first = np.exp(n1 - m) / (np.exp(n1 - m) + np.exp(n2 - m))
                    label = (
                        Label.PREFER_FIRST
                        if self.rng.random() < p_first
                        else Label.PREFER_SECOND
                    )
            else:
                label = self._compare(r1, r2)
                if cfg.style == "equal" and label is not Label.EQUAL:
                    threshold = cfg.equal_threshold * abs(stats.mean())
                    if abs(r1 - r2) < threshold:
                        label = Label.EQUAL
            decisions.append(LabelDecision(label, r1, r2))

        if cfg.style == "skip":
            n = _round_half_up(cfg.skip_rate * len(queries))
            for idx in self.rng.choice(len(queries), size=n, replace=False):
                decisions[idx].label = Label.DISCARD
                decisions[idx].perturbed = True
        elif cfg.style == "mistake":
            n = _round_half_up(cfg.mistake_rate * len(queries))
            flip = {Label.PREFER_FIRST: Label.PREFER_SECOND,
                    Label.PREFER_SECOND: Label.PREFER_FIRST}
            for idx in self.rng.choice(len(queries), size=n, replace=False):
                decisions[idx].label = flip.get(decisions[idx].label, decisions[idx].label)
                decisions[idx].perturbed = True

        self.last_decisions = decisions
        return [d.label for d in decisions]


def update_return_stats(stats: ReturnStats, episode_return: float, step: int) -> None:
    stats.update(episode_return, step)
