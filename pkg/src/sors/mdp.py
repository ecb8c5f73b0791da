"""Reward-free MDPs, trajectories, discounted returns and the return-induced order."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Protocol, runtime_checkable

import numpy as np

from .errors import ContractViolation

# Tie tolerance on returns used for ranking labels and order comparisons.
DEFAULT_TIE_TOL = 1e-9


@dataclass(frozen=True)
class MdpSpec:
    """A finite MDP without a reward: ``transition[s, a, s']`` is P(s' | s, a).

    Acting in a terminal state ends the episode after that step, so a terminal
    state's own (s, a) reward is still collected once.
    """

    transition: np.ndarray
    gamma: float
    initial_state: int = 0
    terminal_states: frozenset = frozenset()

    def __post_init__(self):
        t = np.asarray(self.transition, dtype=np.float64)
        if t.ndim != 3 or t.shape[0] != t.shape[2] or t.shape[0] < 1 or t.shape[1] < 1:
            raise ContractViolation(f"transition must have shape (S, A, S), got {t.shape}")
        if np.any(t < 0) or np.any(np.abs(t.sum(axis=2) - 1.0) > 1e-9):
            raise ContractViolation("every transition distribution must be non-negative and sum to 1")
        if not 0.0 < self.gamma <= 1.0:
            raise ContractViolation(f"gamma must lie in (0, 1], got {self.gamma}")
        n = t.shape[0]
        if not 0 <= self.initial_state < n:
            raise ContractViolation(f"initial state {self.initial_state} out of range")
        terminals = frozenset(int(s) for s in self.terminal_states)
        if any(not 0 <= s < n for s in terminals):
            raise ContractViolation("terminal state id out of range")
        t.setflags(write=False)
        object.__setattr__(self, "transition", t)
        object.__setattr__(self, "terminal_states", terminals)

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def deterministic(self) -> bool:
        return bool(np.all((self.transition == 0.0) | (self.transition == 1.0)))

    def next_state(self, s: int, a: int) -> int:
        """Successor under deterministic dynamics."""
        row = self.transition[s, a]
        if not np.any(row == 1.0):
            raise ContractViolation(f"transition from ({s}, {a}) is not a point mass")
        return int(np.argmax(row))

    def terminal_mask(self) -> np.ndarray:
        mask = np.zeros(self.num_states, dtype=bool)
        mask[list(self.terminal_states)] = True
        return mask

    @classmethod
    def from_successors(cls, successors, gamma, initial_state=0, terminal_states=()):
        """Build a deterministic spec from an (S, A) table of successor ids."""
        succ = np.asarray(successors, dtype=np.int64)
        s_count, a_count = succ.shape
        t = np.zeros((s_count, a_count, s_count))
        t[np.arange(s_count)[:, None], np.arange(a_count)[None, :], succ] = 1.0
        return cls(t, gamma, initial_state, frozenset(terminal_states))


@runtime_checkable
class RewardFn(Protocol):
    def __call__(self, state, action) -> float: ...


class TableReward:
    """Reward backed by an (S, A) table."""

    def __init__(self, table):
        self.table = np.array(table, dtype=np.float64)
        self.table.setflags(write=False)

    def __call__(self, state, action) -> float:
        return float(self.table[int(state), int(action)])

    def batch(self, states, actions) -> np.ndarray:
        return self.table[np.asarray(states, dtype=np.int64), np.asarray(actions, dtype=np.int64)]

    def scaled(self, factor: float) -> "TableReward":
        return TableReward(factor * self.table)


class FunctionReward:
    """Reward backed by an arbitrary deterministic callable."""

    def __init__(self, fn: Callable[[object, int], float]):
        self.fn = fn

    def __call__(self, state, action) -> float:
        return float(self.fn(state, action))


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One whole episode. ``states`` holds state ids or feature rows (one per step)."""

    states: np.ndarray
    actions: np.ndarray
    sparse_rewards: np.ndarray
    discrete_states: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        states = np.asarray(self.states)
        actions = np.asarray(self.actions, dtype=np.int64)
        rewards = np.asarray(self.sparse_rewards, dtype=np.float64)
        if len(actions) < 1:
            raise ContractViolation("a trajectory needs at least one step")
        if len(states) != len(actions) or len(rewards) != len(actions):
            raise ContractViolation("states, actions and rewards must have equal length")
        for arr in (states, actions, rewards):
            arr.setflags(write=False)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "actions", actions)
        object.__setattr__(self, "sparse_rewards", rewards)

    def __len__(self) -> int:
        return len(self.actions)

    @classmethod
    def from_steps(cls, steps):
        """Build from ``(state, action, sparse_reward)`` tuples."""
        steps = list(steps)
        if not steps:
            raise ContractViolation("a trajectory needs at least one step")
        states, actions, rewards = zip(*steps)
        return cls(np.asarray(states), np.asarray(actions), np.asarray(rewards, dtype=np.float64))

    def steps(self):
        return list(zip(self.states, self.actions.tolist(), self.sparse_rewards.tolist()))


def discount_weights(length: int, gamma: float) -> np.ndarray:
    return gamma ** np.arange(length, dtype=np.float64)


def rewards_along(traj: Trajectory, r) -> np.ndarray:
    """Per-step rewards of ``r`` along ``traj``, vectorised when ``r`` offers ``batch``."""
    if hasattr(r, "batch"):
        return np.asarray(r.batch(traj.states, traj.actions), dtype=np.float64)
    return np.array([r(s, a) for s, a in zip(traj.states, traj.actions.tolist())], dtype=np.float64)


def _check_gamma(gamma):
    if not 0.0 < gamma <= 1.0:
        raise ContractViolation(f"gamma must lie in (0, 1], got {gamma}")


def discounted_return(traj: Trajectory, r, gamma: float) -> float:
    """sum_t gamma^(t-1) r(s_t, a_t), with t counted from the trajectory's first step."""
    if len(traj) < 1:
        raise ContractViolation("empty trajectory")
    _check_gamma(gamma)
    rewards = rewards_along(traj, r)
    return float(np.dot(discount_weights(len(rewards), gamma), rewards))


def sparse_return(traj: Trajectory, gamma: float) -> float:
    _check_gamma(gamma)
    return float(np.dot(discount_weights(len(traj), gamma), traj.sparse_rewards))


class Ordering(enum.IntEnum):
    LESS = -1
    EQUAL = 0
    GREATER = 1


def compare_returns(ri: float, rj: float, tol: float = DEFAULT_TIE_TOL) -> Ordering:
    # Compare via the difference so that swapping arguments negates exactly.
    d = ri - rj
    if d < -tol:
        return Ordering.LESS
    if d > tol:
        return Ordering.GREATER
    return Ordering.EQUAL


def order_compare(tau_i: Trajectory, tau_j: Trajectory, r, gamma: float, tol: float = DEFAULT_TIE_TOL) -> Ordering:
    if tol < 0:
        raise ContractViolation("tolerance must be non-negative")
    return compare_returns(discounted_return(tau_i, r, gamma), discounted_return(tau_j, r, gamma), tol)


def parse_mdp_text(text: str):
    """Parse the line-oriented MDP format.

    Returns ``(mdp, rewards)`` where ``rewards`` maps each reward label seen
    (``R1``, ``R2``) to a :class:`TableReward`. Several ``T`` lines for one
    (s, a) without probabilities split the mass uniformly, which yields a
    stochastic spec.
    """
    from .errors import ConfigError

    header = None
    succ: dict[tuple[int, int], list[tuple[int, float | None]]] = {}
    terminals: set[int] = set()
    initial = 0
    reward_entries: dict[str, list[tuple[int, int, float, int]]] = {}

    def ints(tokens, lineno, count):
        try:
            return [int(tok) for tok in tokens[:count]]
        except ValueError:
            raise ConfigError(f"expected integer ids, got {' '.join(tokens)!r}", line=lineno) from None

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        kind = tok[0]
        if kind == "states":
            if len(tok) != 6 or tok[2] != "actions" or tok[4] != "gamma":
                raise ConfigError("header must read 'states N actions M gamma G'", line=lineno)
            try:
                header = (int(tok[1]), int(tok[3]), float(tok[5]))
            except ValueError:
                raise ConfigError("malformed header values", line=lineno) from None
            continue
        if header is None:
            raise ConfigError("the header line must come first", line=lineno)
        if kind == "T":
            if len(tok) not in (4, 5):
                raise ConfigError("expected 'T s a s2 [p]'", line=lineno)
            s, a, s2 = ints(tok[1:], lineno, 3)
            p = float(tok[4]) if len(tok) == 5 else None
            succ.setdefault((s, a), []).append((s2, p))
        elif kind == "terminal":
            if len(tok) != 2:
                raise ConfigError("expected 'terminal s'", line=lineno)
            terminals.add(ints(tok[1:], lineno, 1)[0])
        elif kind == "initial":
            if len(tok) != 2:
                raise ConfigError("expected 'initial s'", line=lineno)
            initial = ints(tok[1:], lineno, 1)[0]
        elif kind in ("R1", "R2"):
            if len(tok) != 4:
                raise ConfigError(f"expected '{kind} s a v'", line=lineno)
            s, a = ints(tok[1:], lineno, 2)
            try:
                v = float(tok[3])
            except ValueError:
                raise ConfigError(f"bad reward value {tok[3]!r}", line=lineno) from None
            reward_entries.setdefault(kind, []).append((s, a, v, lineno))
        else:
            raise ConfigError(f"unknown directive {kind!r}", line=lineno)

    if header is None:
        raise ConfigError("missing header line")
    n_s, n_a, gamma = header
    if n_s < 1 or n_a < 1:
        raise ConfigError("state and action counts must be positive")

    def in_range(s, a, lineno=None):
        if not (0 <= s < n_s and 0 <= a < n_a):
            raise ConfigError(f"state/action ({s}, {a}) out of range", line=lineno)

    t = np.zeros((n_s, n_a, n_s))
    for (s, a), outs in succ.items():
        in_range(s, a)
        for s2, p in outs:
            if not 0 <= s2 < n_s:
                raise ConfigError(f"successor state {s2} out of range")
            t[s, a, s2] += (1.0 / len(outs)) if p is None else p
    for s in range(n_s):
        for a in range(n_a):
            if (s, a) not in succ:
                if s in terminals:
                    t[s, a, s] = 1.0
                else:
                    raise ConfigError(f"no transition given for non-terminal ({s}, {a})")
    rewards = {}
    for label, entries in reward_entries.items():
        table = np.zeros((n_s, n_a))
        for s, a, v, lineno in entries:
            in_range(s, a, lineno)
            table[s, a] = v
        rewards[label] = TableReward(table)
    try:
        mdp = MdpSpec(t, gamma, initial, frozenset(terminals))
    except ContractViolation as exc:
        raise ConfigError(str(exc)) from None
    return mdp, rewards
