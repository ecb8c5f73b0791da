"""Exhaustive checks of return-order equivalence between reward functions on small
deterministic MDPs, and of the claim that equivalent rewards share their optimal policies."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .backends import enumerate_policies, greedy_action_sets, reward_table
from .errors import CapacityError, UnsupportedError
from .mdp import DEFAULT_TIE_TOL, MdpSpec

DEFAULT_ENUMERATION_CAP = 10**6


@dataclass
class TrajectorySet:
    """Every action sequence of length 1..H from every (s, a), stopping after a terminal state.

    Row ``k`` holds ``lengths[k]`` valid steps in ``states[k]`` / ``actions[k]``
    (the rest is padding of -1). ``complete`` marks trajectories that reached the
    horizon or a terminal state; only those enter the optimal Q-values.
    """

    horizon: int
    num_actions: int
    states: np.ndarray
    actions: np.ndarray
    lengths: np.ndarray
    complete: np.ndarray

    def __len__(self):
        return len(self.lengths)

    @property
    def start(self) -> np.ndarray:
        """Flat (s * |A| + a) index of each trajectory's first step."""
        return self.states[:, 0] * self.num_actions + self.actions[:, 0]

    def steps(self, k: int):
        n = self.lengths[k]
        return list(zip(self.states[k, :n].tolist(), self.actions[k, :n].tolist()))

    def returns(self, table: np.ndarray, gamma: float) -> np.ndarray:
        valid = self.actions >= 0
        per_step = np.where(valid, table[np.where(valid, self.states, 0), np.where(valid, self.actions, 0)], 0.0)
        return per_step @ (gamma ** np.arange(self.horizon, dtype=np.float64))


def count_trajectories(mdp: MdpSpec, horizon: int) -> int:
    terminal = mdp.terminal_mask()
    succ = np.argmax(mdp.transition, axis=2)
    n = np.ones((mdp.num_states, mdp.num_actions), dtype=object)
    for _ in range(horizon - 1):
        per_state = n.sum(axis=1)
        n = 1 + np.where(terminal[:, None], 0, per_state[succ])
    return int(n.sum())


def enumerate_trajectories(mdp: MdpSpec, horizon: int, cap: int = DEFAULT_ENUMERATION_CAP) -> TrajectorySet:
    if not mdp.deterministic:
        raise UnsupportedError("trajectory enumeration needs deterministic dynamics")
    if horizon < 1:
        raise ValueError("horizon must be positive")
    total = count_trajectories(mdp, horizon)
    if total > cap:
        raise CapacityError(f"{total} trajectories exceed the enumeration cap of {cap}")
    n_s, n_a = mdp.num_states, mdp.num_actions
    succ = np.argmax(mdp.transition, axis=2)
    terminal = mdp.terminal_mask()

    level_s = np.repeat(np.arange(n_s), n_a)[:, None]
    level_a = np.tile(np.arange(n_a), n_s)[:, None]
    levels = []
    for depth in range(1, horizon + 1):
        last_s, last_a = level_s[:, -1], level_a[:, -1]
        stops = terminal[last_s] | (depth == horizon)
        levels.append((level_s, level_a, stops))
        grow = ~terminal[last_s]
        if depth == horizon or not grow.any():
            break
        parents_s, parents_a = level_s[grow], level_a[grow]
        nxt = succ[parents_s[:, -1], parents_a[:, -1]]
        level_s = np.hstack([np.repeat(parents_s, n_a, axis=0), np.repeat(nxt, n_a)[:, None]])
        level_a = np.hstack([np.repeat(parents_a, n_a, axis=0), np.tile(np.arange(n_a), len(parents_a))[:, None]])

    states = np.full((total, horizon), -1, dtype=np.int64)
    actions = np.full((total, horizon), -1, dtype=np.int64)
    lengths = np.zeros(total, dtype=np.int64)
    complete = np.zeros(total, dtype=bool)
    row = 0
    for ls, la, stops in levels:
        k = len(ls)
        states[row:row + k, :ls.shape[1]] = ls
        actions[row:row + k, :la.shape[1]] = la
        lengths[row:row + k] = ls.shape[1]
        complete[row:row + k] = stops
        row += k
    assert row == total
    return TrajectorySet(horizon, n_a, states, actions, lengths, complete)


@dataclass
class Violation:
    """Two trajectories ordered differently by the two rewards."""

    i: int
    j: int
    returns_r1: tuple
    returns_r2: tuple
    steps_i: list = field(default_factory=list)
    steps_j: list = field(default_factory=list)


def _windows(a: np.ndarray, tol: float):
    """For sorted ``a``, index bounds [lo, hi] of entries within ``tol`` of each entry,
    using the same difference test as :func:`sors.mdp.compare_returns`."""
    n = len(a)
    lo = np.empty(n, dtype=np.int64)
    hi = np.empty(n, dtype=np.int64)
    left = 0
    right = 0
    for k in range(n):
        while a[k] - a[left] > tol:
            left += 1
        right = max(right, k)
        while right + 1 < n and a[k] - a[right + 1] >= -tol:
            right += 1
        lo[k], hi[k] = left, right
    return lo, hi


def _sliding_extremes(b: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    """Index of the min and max of ``b[lo[k]:hi[k]+1]`` for monotone windows."""
    n = len(b)
    arg_min = np.empty(n, dtype=np.int64)
    arg_max = np.empty(n, dtype=np.int64)
    qmin: deque = deque()
    qmax: deque = deque()
    pushed = 0
    for k in range(n):
        while pushed <= hi[k]:
            while qmin and b[qmin[-1]] >= b[pushed]:
                qmin.pop()
            qmin.append(pushed)
            while qmax and b[qmax[-1]] <= b[pushed]:
                qmax.pop()
            qmax.append(pushed)
            pushed += 1
        while qmin[0] < lo[k]:
            qmin.popleft()
        while qmax[0] < lo[k]:
            qmax.popleft()
        arg_min[k], arg_max[k] = qmin[0], qmax[0]
    return arg_min, arg_max


def returns_order_equivalent(r1: np.ndarray, r2: np.ndarray, tol: float = DEFAULT_TIE_TOL):
    """Whether two return vectors induce the same tolerance-aware order on every pair.

    Sorts by the first vector; each element's tie window under ``r1`` must be a
    tie window under ``r2`` and everything outside it must keep its side.
    Returns ``(equivalent, (i, j) or None)``.
    """
    r1 = np.asarray(r1, dtype=np.float64)
    r2 = np.asarray(r2, dtype=np.float64)
    n = len(r1)
    if n < 2:
        return True, None
    order = np.lexsort((r2, r1))
    a, b = r1[order], r2[order]
    lo, hi = _windows(a, tol)

    pref_arg = np.zeros(n, dtype=np.int64)  # argmax of b[:k+1]
    suff_arg = np.zeros(n, dtype=np.int64)  # argmin of b[k:]
    for k in range(1, n):
        pref_arg[k] = k if b[k] > b[pref_arg[k - 1]] else pref_arg[k - 1]
    suff_arg[n - 1] = n - 1
    for k in range(n - 2, -1, -1):
        suff_arg[k] = k if b[k] < b[suff_arg[k + 1]] else suff_arg[k + 1]
    win_min, win_max = _sliding_extremes(b, lo, hi)

    for k in range(n):
        bad = None
        if hi[k] + 1 < n:
            m = suff_arg[hi[k] + 1]
            if not b[k] - b[m] < -tol:
                bad = m
        if bad is None and lo[k] > 0:
            m = pref_arg[lo[k] - 1]
            if not b[k] - b[m] > tol:
                bad = m
        if bad is None and b[k] - b[win_min[k]] > tol:
            bad = win_min[k]
        if bad is None and b[k] - b[win_max[k]] < -tol:
            bad = win_max[k]
        if bad is not None:
            return False, (int(order[k]), int(order[bad]))
    return True, None


def total_order_equivalent(traj_set: TrajectorySet, r1, r2, gamma: float, tol: float = DEFAULT_TIE_TOL,
                           mdp: MdpSpec | None = None):
    """Return ``(equivalent, violation)`` for two rewards over every trajectory in the set."""
    t1, t2 = _tables(traj_set, r1, r2, mdp)
    R1, R2 = traj_set.returns(t1, gamma), traj_set.returns(t2, gamma)
    ok, pair = returns_order_equivalent(R1, R2, tol)
    if ok:
        return True, None
    i, j = pair
    return False, Violation(i, j, (float(R1[i]), float(R1[j])), (float(R2[i]), float(R2[j])),
                            traj_set.steps(i), traj_set.steps(j))


def _tables(traj_set, r1, r2, mdp):
    def table(r):
        if hasattr(r, "table"):
            return r.table
        if mdp is None:
            raise ValueError("an MDP is needed to tabulate non-table rewards")
        return reward_table(mdp, r)
    return table(r1), table(r2)


def finite_horizon_q(traj_set: TrajectorySet, table: np.ndarray, gamma: float) -> np.ndarray:
    """Q*(s, a) = max return over complete trajectories starting with (s, a)."""
    returns = traj_set.returns(table, gamma)
    q = np.full(table.size, -np.inf)
    done = traj_set.complete
    np.maximum.at(q, traj_set.start[done], returns[done])
    return q.reshape(table.shape)


def optimal_policy_set(mdp: MdpSpec, r, horizon: int, gamma: float | None = None, tol: float = DEFAULT_TIE_TOL,
                       traj_set: TrajectorySet | None = None) -> set:
    """Every deterministic policy whose action attains the per-state finite-horizon max within ``tol``."""
    gamma = mdp.gamma if gamma is None else gamma
    traj_set = traj_set or enumerate_trajectories(mdp, horizon)
    q = finite_horizon_q(traj_set, reward_table(mdp, r), gamma)
    return enumerate_policies(greedy_action_sets(q, tol))


class TheoremViolation(AssertionError):
    """Order-equivalent rewards produced different optimal-policy sets."""


@dataclass
class EquivalenceReport:
    equivalent: bool
    optimal_sets_equal: bool
    policies_r1: set
    policies_r2: set
    num_trajectories: int
    first_violation: Violation | None = None

    def __post_init__(self):
        if self.equivalent and self.first_violation is not None:
            raise ValueError("an equivalent report cannot carry a violation")

    def format(self) -> str:
        def fmt_policies(ps):
            return "; ".join(",".join(map(str, p)) for p in sorted(ps))

        lines = [
            f"equivalent: {str(self.equivalent).lower()}",
            f"optimal_sets_equal: {str(self.optimal_sets_equal).lower()}",
            f"trajectories: {self.num_trajectories}",
            f"optimal_policies_r1: {fmt_policies(self.policies_r1)}",
            f"optimal_policies_r2: {fmt_policies(self.policies_r2)}",
        ]
        v = self.first_violation
        if v is None:
            lines.append("violation: none")
        else:
            lines.append(f"violation: tau_i={v.steps_i} tau_j={v.steps_j}")
            lines.append(f"  returns_r1: {v.returns_r1[0]:.9g} {v.returns_r1[1]:.9g}")
            lines.append(f"  returns_r2: {v.returns_r2[0]:.9g} {v.returns_r2[1]:.9g}")
        return "\n".join(lines)


def verify_theorem(mdp: MdpSpec, r1, r2, horizon: int, gamma: float | None = None,
                   tol: float = DEFAULT_TIE_TOL) -> EquivalenceReport:
    gamma = mdp.gamma if gamma is None else gamma
    traj_set = enumerate_trajectories(mdp, horizon)
    equivalent, violation = total_order_equivalent(traj_set, r1, r2, gamma, tol, mdp)
    p1 = optimal_policy_set(mdp, r1, horizon, gamma, tol, traj_set)
    p2 = optimal_policy_set(mdp, r2, horizon, gamma, tol, traj_set)
    report = EquivalenceReport(equivalent, p1 == p2, p1, p2, len(traj_set), violation)
    if report.equivalent and not report.optimal_sets_equal:
        raise TheoremViolation("order-equivalent rewards yielded different optimal-policy sets")
    return report
