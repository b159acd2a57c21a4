"""Active selection of the M most informative segment pairs.

All scored strategies draw N candidate pairs uniformly from the replay buffer
and keep the top M (stable ties by candidate index). Coverage replaces scoring
with k-means over pooled pair features; the hybrid strategies score down to an
intermediate M' first and then cover down to M.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .replay import ReplayBuffer, Segment
from .reward import RewardEnsemble, binary_entropy

STRATEGIES = (
    "uniform",
    "entropy",
    "disagreement",
    "coverage",
    "entropy_coverage",
    "disagreement_coverage",
)


@dataclass
class QueryBatch:
    pairs: list[tuple[Segment, Segment]]
    strategy: str
    candidate_pool: int
    intermediate: int | None
    selected_indices: list[int]
    scores: np.ndarray | None


def top_m_indices(scores: np.ndarray, m: int) -> np.ndarray:
    """Indices of the m largest scores; ties broken by candidate index."""
    return np.argsort(-np.asarray(scores), kind="stable")[:m]


def _pair_probabilities(ensemble: RewardEnsemble,
                        pairs: list[tuple[Segment, Segment]]) -> np.ndarray:
    """[E, n_pairs] preference probabilities, one batched pass per member."""
    segments = [seg for pair in pairs for seg in pair]
    returns = ensemble.member_segment_returns(segments)  # [E, 2n]
    diff = returns[:, 0::2] - returns[:, 1::2]
    return 1.0 / (1.0 + np.exp(-np.clip(diff, -500, 500)))


def disagreement_scores(ensemble: RewardEnsemble,
                        pairs: list[tuple[Segment, Segment]]) -> np.ndarray:
    probs = _pair_probabilities(ensemble, pairs)
    # centering on the first member keeps identical members at exactly zero
    return (probs - probs[0]).var(axis=0)


def entropy_scores(ensemble: RewardEnsemble, pairs: list[tuple[Segment, Segment]],
                   single_member: bool = False) -> np.ndarray:
    probs = _pair_probabilities(ensemble, pairs)
    p = probs[0] if single_member else probs.mean(axis=0)
    return np.array([binary_entropy(float(x)) for x in p])


def pair_features(pairs: list[tuple[Segment, Segment]]) -> np.ndarray:
    """Per-pair feature vector: both segments' time-pooled [s; a] concatenated."""
    feats = []
    for seg_a, seg_b in pairs:
        pooled = [
            np.concatenate([seg.states, seg.actions], axis=1).mean(axis=0)
            for seg in (seg_a, seg_b)
        ]
        feats.append(np.concatenate(pooled))
    return np.asarray(feats)


def kmeans(points: np.ndarray, k: int, iters: int = 25,
           rng: np.random.Generator | None = None):
    """Lloyd's algorithm with distance-weighted seeding.

    Returns (assignments, centroids, inertia_history); empty clusters are
    re-seeded from the point farthest from its current centroid.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n < k:
        raise ValueError(f"cannot form {k} clusters from {n} points")
    rng = rng or np.random.default_rng(0)

    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    sq_dist = ((points - centroids[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = sq_dist.sum()
        if total <= 0.0:
            centroids[c] = points[rng.integers(n)]  # all coincident: any choice works
        else:
            centroids[c] = points[rng.choice(n, p=sq_dist / total)]
        sq_dist = np.minimum(sq_dist, ((points - centroids[c]) ** 2).sum(axis=1))

    inertia_history = []
    assignments = np.zeros(n, dtype=np.int64)
    for _ in range(iters):
        d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assignments = d2.argmin(axis=1)
        inertia_history.append(float(d2[np.arange(n), assignments].sum()))
        for c in range(k):
            mask = assignments == c
            if mask.any():
                centroids[c] = points[mask].mean(axis=0)
            else:
                farthest = int(d2[np.arange(n), assignments].argmax())
                centroids[c] = points[farthest]
                assignments[farthest] = c
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    assignments = d2.argmin(axis=1)
    inertia_history.append(float(d2[np.arange(n), assignments].sum()))
    return assignments, centroids, inertia_history


def _coverage_pick(pairs: list[tuple[Segment, Segment]], m: int,
                   rng: np.random.Generator) -> list[int]:
    """One candidate per k-means centroid, nearest first, no duplicates."""
    features = pair_features(pairs)
    _, centroids, _ = kmeans(features, m, rng=rng)
    chosen: list[int] = []
    taken = np.zeros(len(pairs), dtype=bool)
    for c in range(m):
        d2 = ((features - centroids[c]) ** 2).sum(axis=1)
        d2[taken] = np.inf
        idx = int(d2.argmin())
        chosen.append(idx)
        taken[idx] = True
    return chosen


def select_queries(strategy: str, buffer: ReplayBuffer, ensemble: RewardEnsemble | None,
                   m: int, segment_length: int, rng: np.random.Generator,
                   n: int | None = None, m_prime: int | None = None,
                   entropy_single_member: bool = False) -> QueryBatch:
    """Pick the M query pairs for one feedback session."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; known: {STRATEGIES}")
    if strategy == "uniform":
        pairs = buffer.sample_segment_pairs(m, segment_length, rng)
        return QueryBatch(pairs, strategy, m, None, list(range(m)), None)

    n = n if n is not None else 10 * m
    m_prime = m_prime if m_prime is not None else 5 * m
    if m > n or (strategy in ("entropy_coverage", "disagreement_coverage")
                 and not m <= m_prime <= n):
        raise ValueError(f"need M <= M' <= N, got M={m} M'={m_prime} N={n}")
    candidates = buffer.sample_segment_pairs(n, segment_length, rng)

    if strategy == "coverage":
        chosen = _coverage_pick(candidates, m, rng)
        return QueryBatch([candidates[i] for i in chosen], strategy, n, None, chosen, None)

    if ensemble is None:
        raise ValueError(f"strategy {strategy!r} needs a reward ensemble")
    if strategy.startswith("entropy"):
        scores = entropy_scores(ensemble, candidates, single_member=entropy_single_member)
    else:
        scores = disagreement_scores(ensemble, candidates)

    if strategy in ("entropy", "disagreement"):
        chosen = top_m_indices(scores, m).tolist()
        return QueryBatch([candidates[i] for i in chosen], strategy, n, None, chosen, scores)

    shortlist = top_m_indices(scores, m_prime).tolist()
    covered = _coverage_pick([candidates[i] for i in shortlist], m, rng)
    chosen = [shortlist[i] for i in covered]
    return QueryBatch([candidates[i] for i in chosen], strategy, n, m_prime, chosen, scores)
