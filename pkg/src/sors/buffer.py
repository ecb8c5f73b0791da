"""FIFO store of whole episodes, ranked against each other by sparse return."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, NoRankablePairs
from .mdp import DEFAULT_TIE_TOL, Trajectory, sparse_return

MAX_PAIR_ATTEMPTS = 1000


@dataclass(frozen=True)
class BufferEntry:
    traj: Trajectory
    sparse_return: float
    index: int


@dataclass(frozen=True)
class LabeledPair:
    tau_i: Trajectory
    tau_j: Trajectory
    i_preferred: bool


class TrajectoryBuffer:
    """Keeps the most recent ``capacity`` episodes with their cached sparse returns."""

    def __init__(self, capacity: int = 200, gamma: float = 1.0):
        if capacity < 1:
            raise ContractViolation("capacity must be positive")
        self.capacity = capacity
        self.gamma = gamma
        self.entries: deque[BufferEntry] = deque(maxlen=capacity)
        self.appended = 0

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def append(self, traj: Trajectory) -> BufferEntry:
        entry = BufferEntry(traj, sparse_return(traj, self.gamma), self.appended)
        self.entries.append(entry)
        self.appended += 1
        return entry

    def trajectories(self):
        return [e.traj for e in self.entries]

    def returns(self) -> np.ndarray:
        return np.array([e.sparse_return for e in self.entries])


class HoldoutPool:
    """Held-out episodes, never trained on, stratified by sparse return.

    Keeps the ``per_return`` most recent episodes for each distinct return so
    that late, converged episodes cannot crowd out the rest of the return range.
    """

    def __init__(self, per_return: int = 5, gamma: float = 1.0, tol: float = DEFAULT_TIE_TOL):
        if per_return < 1:
            raise ContractViolation("per_return must be positive")
        self.per_return = per_return
        self.gamma = gamma
        self.tol = tol
        self.strata: dict[int, deque] = {}
        self.offered = 0

    def __len__(self):
        return sum(len(q) for q in self.strata.values())

    def __iter__(self):
        for key in sorted(self.strata):
            yield from self.strata[key]

    def offer(self, traj: Trajectory) -> BufferEntry:
        entry = BufferEntry(traj, sparse_return(traj, self.gamma), self.offered)
        self.offered += 1
        key = int(round(entry.sparse_return / max(self.tol, 1e-12)))
        self.strata.setdefault(key, deque(maxlen=self.per_return)).append(entry)
        return entry


def sample_pairs(entries, n: int, rng: np.random.Generator, tol: float = DEFAULT_TIE_TOL):
    """Draw ``n`` labelled pairs uniformly from ``entries`` (a buffer or a list of entries).

    Each pair has two distinct members whose sparse returns differ by more than
    ``tol``; tied draws are rejected and redrawn.
    """
    entries = list(entries)
    if n < 1:
        raise ContractViolation("n must be positive")
    if len(entries) < 2:
        raise NoRankablePairs("fewer than two trajectories stored")
    returns = np.array([e.sparse_return for e in entries])
    if returns.max() - returns.min() <= tol:
        raise NoRankablePairs("all stored sparse returns are tied")
    size = len(entries)
    pairs = []
    budget = MAX_PAIR_ATTEMPTS * n
    while len(pairs) < n:
        if budget <= 0:
            raise NoRankablePairs(f"no untied pair found within {MAX_PAIR_ATTEMPTS} draws per pair")
        draws = min(budget, max(4 * (n - len(pairs)), 32))
        budget -= draws
        i = rng.integers(size, size=draws)
        j = rng.integers(size - 1, size=draws)
        j += j >= i
        d = returns[i] - returns[j]
        for a, b, diff in zip(i.tolist(), j.tolist(), d.tolist()):
            if abs(diff) > tol:
                pairs.append(LabeledPair(entries[a].traj, entries[b].traj, diff > 0))
                if len(pairs) == n:
                    break
    return pairs


def holdout_split(entries, fraction: float, rng: np.random.Generator):
    """Random disjoint (train, eval) views; eval gets ``floor(fraction * n)`` entries."""
    entries = list(entries)
    if not 0.0 < fraction < 1.0:
        raise ContractViolation("fraction must lie in (0, 1)")
    if len(entries) < 2:
        raise ContractViolation("need at least two entries to split")
    n_eval = int(np.floor(fraction * len(entries)))
    order = rng.permutation(len(entries))
    eval_idx = set(order[:n_eval].tolist())
    train = [e for k, e in enumerate(entries) if k not in eval_idx]
    held = [e for k, e in enumerate(entries) if k in eval_idx]
    return train, held


def ranking_accuracy(entries, learned_returns, tol: float = DEFAULT_TIE_TOL) -> float:
    """Fraction of untied pairs whose learned-return order matches the sparse order.

    Learned ties count as misses. Returns NaN when no untied pair exists.
    """
    sparse = np.array([e.sparse_return for e in entries])
    learned = np.asarray(learned_returns, dtype=np.float64)
    if len(sparse) < 2:
        return float("nan")
    iu, ju = np.triu_indices(len(sparse), k=1)
    ds = sparse[iu] - sparse[ju]
    mask = np.abs(ds) > tol
    if not mask.any():
        return float("nan")
    dl = learned[iu] - learned[ju]
    return float(np.mean(np.sign(dl[mask]) == np.sign(ds[mask])))


def dump_episodes(entries, path) -> None:
    """Write one step per line: state features, action id, sparse reward; blank line between episodes."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in entries:
            t = e.traj
            for s, a, r in zip(t.states, t.actions.tolist(), t.sparse_rewards.tolist()):
                feats = " ".join(f"{v:.9g}" for v in np.atleast_1d(s))
                fh.write(f"{feats}\t{a}\t{r:.9g}\n")
            fh.write("\n")
