"""Optimal variance filtering over scalar reward groups.

Selecting the size-k subset with maximum population variance reduces to a
scan over k+1 splits: an exchange argument shows an optimal subset is always
m smallest values plus (k - m) largest values for some m, so prefix sums over
the sorted list evaluate every candidate in O(G log G + k). A brute-force
oracle over all C(G, k) subsets is kept alongside for verification on small
instances.
"""

from dataclasses import dataclass
from itertools import combinations

import numpy as np

__all__ = [
    "RewardList",
    "GroupStats",
    "SelectionResult",
    "group_stats",
    "clustered_indices",
    "ovf_select",
    "ovf_brute_force",
    "uniform_subsample",
]


@dataclass(frozen=True)
class RewardList:
    """Scalar rewards for one group, with source trajectory indices."""

    values: np.ndarray
    source_indices: np.ndarray

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ValueError("rewards must be a flat vector")
        if not np.all(np.isfinite(values)):
            raise ValueError("rewards must be finite")
        src = np.ascontiguousarray(self.source_indices, dtype=np.int64)
        if src.shape != values.shape:
            raise ValueError("source_indices must align with values")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "source_indices", src)

    @classmethod
    def from_values(cls, values) -> "RewardList":
        values = np.asarray(values, dtype=np.float64)
        return cls(values, np.arange(values.size, dtype=np.int64))

    def __len__(self) -> int:
        return int(self.values.size)


@dataclass(frozen=True)
class GroupStats:
    mean: float
    std: float  # population convention (divide by count)
    count: int


@dataclass(frozen=True)
class SelectionResult:
    kept: tuple  # positions into the RewardList, ascending
    variance: float
    split: tuple | None  # (m smallest, k - m largest); None for the oracle


def as_reward_list(rewards) -> RewardList:
    if isinstance(rewards, RewardList):
        return rewards
    return RewardList.from_values(rewards)


def group_stats(rewards) -> GroupStats:
    rewards = as_reward_list(rewards)
    if len(rewards) == 0:
        raise ValueError("empty group")
    v = rewards.values
    mean = float(v.mean())
    std = float(np.sqrt(np.mean((v - mean) ** 2)))
    return GroupStats(mean=mean, std=std, count=len(rewards))


def clustered_indices(rewards, delta: float) -> np.ndarray:
    """Positions whose reward sits within delta group-stds of the group mean.

    With zero spread every reward is trivially clustered, so all positions are
    returned.
    """
    if delta < 0:
        raise ValueError("delta must be non-negative")
    rewards = as_reward_list(rewards)
    stats = group_stats(rewards)
    dev = np.abs(rewards.values - stats.mean)
    return np.flatnonzero(dev <= delta * stats.std).astype(np.int64)


def _population_variance(values: np.ndarray) -> float:
    return float(np.mean((values - values.mean()) ** 2))


def ovf_select(rewards, k: int) -> SelectionResult:
    """Exact maximum-population-variance subset of size k.

    Ordering is (value ascending, source index descending); a split m keeps
    the first m and last k - m positions of that ordering, so among equal
    extreme values the "largest" side prefers lower source indices. Ties
    between splits resolve to the smallest m.
    """
    rewards = as_reward_list(rewards)
    g = len(rewards)
    if g == 0:
        raise ValueError("empty group")
    if k <= 0:
        raise ValueError("empty selection")
    if k > g:
        raise ValueError("subset larger than group")

    order = np.lexsort((-rewards.source_indices, rewards.values))
    # Shift by the group mean before accumulating: variance is shift
    # invariant and the prefix sums cancel less.
    w = rewards.values[order] - rewards.values.mean()
    pref = np.concatenate(([0.0], np.cumsum(w)))
    pref_sq = np.concatenate(([0.0], np.cumsum(w * w)))

    best_m = 0
    best_var = -1.0
    for m in range(k + 1):
        hi = k - m
        s = pref[m] + (pref[g] - pref[g - hi])
        sq = pref_sq[m] + (pref_sq[g] - pref_sq[g - hi])
        var = max(sq / k - (s / k) ** 2, 0.0)
        if var > best_var:
            best_var = var
            best_m = m

    hi = k - best_m
    kept_positions = np.concatenate((order[:best_m], order[g - hi :]))
    kept = tuple(sorted(int(i) for i in kept_positions))
    variance = _population_variance(rewards.values[np.array(kept, dtype=np.int64)])
    return SelectionResult(kept=kept, variance=variance, split=(best_m, k - best_m))


def ovf_brute_force(rewards, k: int) -> SelectionResult:
    """Exhaustive reference implementation, limited to small groups.

    Ties in variance resolve to the lexicographically smallest sorted index
    tuple, which is the order combinations() enumerates.
    """
    rewards = as_reward_list(rewards)
    g = len(rewards)
    if g == 0:
        raise ValueError("empty group")
    if k <= 0:
        raise ValueError("empty selection")
    if k > g:
        raise ValueError("subset larger than group")
    if g > 12:
        raise ValueError("instance too large for oracle")

    best = None
    best_var = -1.0
    for subset in combinations(range(g), k):
        var = _population_variance(rewards.values[list(subset)])
        if var > best_var:
            best_var = var
            best = subset
    return SelectionResult(kept=best, variance=best_var, split=None)


def uniform_subsample(rewards, k: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random size-k position subset, drawn from the given stream."""
    rewards = as_reward_list(rewards)
    g = len(rewards)
    if g == 0:
        raise ValueError("empty group")
    if k <= 0:
        raise ValueError("empty selection")
    if k > g:
        raise ValueError("subset larger than group")
    if k == g:
        return np.arange(g, dtype=np.int64)
    picked = rng.choice(g, size=k, replace=False)
    return np.sort(picked).astype(np.int64)
