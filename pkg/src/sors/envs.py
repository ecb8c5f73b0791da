"""Small sparse-reward environments and the reward-delaying wrapper."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, UnsupportedError
from .mdp import MdpSpec, TableReward


@dataclass(frozen=True)
class Observation:
    features: np.ndarray
    state: int | None = None


@dataclass(frozen=True)
class StepResult:
    observation: Observation
    sparse_reward: float
    dense_reward_hand: float
    done: bool
    # done because of the step cap rather than a terminal state
    truncated: bool = False


class Env:
    """Common episode bookkeeping. Subclasses implement ``_reset`` and ``_transition``."""

    name = "env"
    num_actions: int
    feature_dim: int
    is_finite = False
    cap: int

    def __init__(self):
        self.steps = 0
        self.done = True

    def reset(self) -> Observation:
        self.steps = 0
        self.done = False
        self._reset()
        return self.observe()

    def step(self, action: int) -> StepResult:
        if self.done:
            raise ContractViolation("step() called on a finished episode; call reset() first")
        if not 0 <= action < self.num_actions:
            raise ContractViolation(f"action {action} out of range")
        sparse, hand, terminal = self._transition(int(action))
        self.steps += 1
        truncated = not terminal and self.steps >= self.cap
        self.done = terminal or truncated
        return StepResult(self.observe(), float(sparse), float(hand), self.done, truncated)

    def observe(self) -> Observation:
        raise NotImplementedError

    def _reset(self):
        raise NotImplementedError

    def _transition(self, action):
        raise NotImplementedError

    def as_mdp_spec(self, gamma: float = 1.0):
        raise UnsupportedError(f"{self.name} has continuous features and no finite MDP form")

    def describe(self) -> str:
        return self.name


class FiniteEnv(Env):
    is_finite = True
    num_states: int
    goal: int

    def __init__(self):
        super().__init__()
        self.state = 0

    def state_features(self, s: int) -> np.ndarray:
        raise NotImplementedError

    def successor(self, s: int, a: int) -> int:
        raise NotImplementedError

    def hand_dense(self, s: int) -> float:
        raise NotImplementedError

    def observe(self) -> Observation:
        return Observation(self.state_features(self.state), self.state)

    def _reset(self):
        self.state = 0

    def _transition(self, action):
        self.state = self.successor(self.state, action)
        reached = self.state == self.goal
        return (1.0 if reached else 0.0), self.hand_dense(self.state), reached

    def all_state_features(self) -> np.ndarray:
        return np.array([self.state_features(s) for s in range(self.num_states)])

    def as_mdp_spec(self, gamma: float = 1.0):
        """Deterministic spec plus the sparse reward (1 on entering the goal).

        The goal is terminal with zero reward; the step cap is not represented.
        """
        succ = np.zeros((self.num_states, self.num_actions), dtype=np.int64)
        reward = np.zeros((self.num_states, self.num_actions))
        for s in range(self.num_states):
            for a in range(self.num_actions):
                if s == self.goal:
                    succ[s, a] = s
                    continue
                s2 = self.successor(s, a)
                succ[s, a] = s2
                reward[s, a] = 1.0 if s2 == self.goal else 0.0
        mdp = MdpSpec.from_successors(succ, gamma, initial_state=0, terminal_states={self.goal})
        return mdp, TableReward(reward)


class DelayedChain(FiniteEnv):
    """States 0..n-1 on a line; action 0 moves left, 1 moves right; reward 1 on reaching n-1."""

    name = "delayed_chain"
    num_actions = 2
    feature_dim = 1

    def __init__(self, n: int = 10, cap: int | None = None):
        super().__init__()
        if n < 2:
            raise ContractViolation("chain needs at least two states")
        self.n = n
        self.num_states = n
        self.goal = n - 1
        self.cap = cap or 4 * n

    def successor(self, s, a):
        return max(s - 1, 0) if a == 0 else min(s + 1, self.n - 1)

    def state_features(self, s):
        return np.array([2.0 * s / (self.n - 1) - 1.0])

    def hand_dense(self, s):
        return -(self.goal - s) / (self.n - 1)

    def describe(self):
        return f"delayed_chain(n={self.n})"


class SparseGrid(FiniteEnv):
    """w x h grid from (0, 0) to the goal at (w-1, h-1); actions up, right, down, left."""

    name = "sparse_grid"
    num_actions = 4
    feature_dim = 2
    MOVES = ((0, -1), (1, 0), (0, 1), (-1, 0))

    def __init__(self, width: int = 5, height: int = 5, walls=(), cap: int | None = None):
        super().__init__()
        if width < 1 or height < 1 or width * height < 2:
            raise ContractViolation("grid needs at least two cells")
        self.width, self.height = width, height
        self.walls = frozenset((int(x), int(y)) for x, y in walls)
        if (0, 0) in self.walls or (width - 1, height - 1) in self.walls:
            raise ContractViolation("start and goal cells cannot be walls")
        self.num_states = width * height
        self.goal = self.num_states - 1
        self.cap = cap or 4 * width * height

    def cell(self, s):
        return s % self.width, s // self.width

    def successor(self, s, a):
        x, y = self.cell(s)
        dx, dy = self.MOVES[a]
        nx, ny = x + dx, y + dy
        if 0 <= nx < self.width and 0 <= ny < self.height and (nx, ny) not in self.walls:
            return ny * self.width + nx
        return s

    def state_features(self, s):
        x, y = self.cell(s)
        fx = 2.0 * x / (self.width - 1) - 1.0 if self.width > 1 else 0.0
        fy = 2.0 * y / (self.height - 1) - 1.0 if self.height > 1 else 0.0
        return np.array([fx, fy])

    def hand_dense(self, s):
        x, y = self.cell(s)
        gx, gy = self.cell(self.goal)
        return -(abs(gx - x) + abs(gy - y)) / (self.width + self.height - 2)

    def describe(self):
        return f"sparse_grid({self.width}x{self.height})"


class PointMass(Env):
    """2-D point with velocity in [-1, 1]^2; five discrete accelerations (none, +x, -x, +y, -y)."""

    name = "point_mass"
    num_actions = 5
    feature_dim = 4
    ACCELS = np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])

    def __init__(self, goal=(0.5, 0.5), goal_radius: float = 0.1, cap: int | None = None,
                 dt: float = 0.1, accel: float = 2.0, max_speed: float = 1.0):
        super().__init__()
        self.goal = np.array(goal, dtype=np.float64)
        self.goal_radius = goal_radius
        self.cap = cap or 200
        self.dt, self.accel, self.max_speed = dt, accel, max_speed
        self.pos = np.zeros(2)
        self.vel = np.zeros(2)

    def observe(self):
        return Observation(np.concatenate([self.pos, self.vel / self.max_speed]))

    def _reset(self):
        self.pos = np.zeros(2)
        self.vel = np.zeros(2)

    def _transition(self, action):
        vel = np.clip(self.vel + self.accel * self.dt * self.ACCELS[action], -self.max_speed, self.max_speed)
        pos = self.pos + self.dt * vel
        hit = np.abs(pos) > 1.0
        pos = np.clip(pos, -1.0, 1.0)
        vel[hit] = 0.0
        self.pos, self.vel = pos, vel
        dist = float(np.linalg.norm(self.pos - self.goal))
        reached = dist <= self.goal_radius
        return (1.0 if reached else 0.0), -dist, reached


class DelayedRewards:
    """Accumulates the sparse reward and emits the sum every ``period`` steps or at episode end."""

    def __init__(self, env: Env, period: int):
        if period < 1:
            raise ContractViolation("delay period must be at least 1")
        self.env = env
        self.period = period
        self.accumulator = 0.0
        self.steps_since_emit = 0

    def __getattr__(self, item):
        # Only reached for attributes not defined on the wrapper.
        return getattr(self.env, item)

    @property
    def name(self):
        return self.env.name

    @property
    def done(self):
        return self.env.done

    def reset(self):
        self.accumulator = 0.0
        self.steps_since_emit = 0
        return self.env.reset()

    def step(self, action):
        res = self.env.step(action)
        self.accumulator += res.sparse_reward
        self.steps_since_emit += 1
        emitted = 0.0
        if self.steps_since_emit == self.period or res.done:
            emitted = self.accumulator
            self.accumulator = 0.0
            self.steps_since_emit = 0
        return StepResult(res.observation, emitted, res.dense_reward_hand, res.done, res.truncated)

    def as_mdp_spec(self, gamma: float = 1.0):
        """The undelayed sparse reward; for the shipped goal-terminated tasks both agree on returns."""
        return self.env.as_mdp_spec(gamma)

    def describe(self):
        return f"{self.env.describe()}+delay{self.period}"


def delay_rewards(env: Env, period: int) -> DelayedRewards:
    return DelayedRewards(env, period)


ENVIRONMENTS = {"delayed_chain": DelayedChain, "sparse_grid": SparseGrid, "point_mass": PointMass}


def make_env(name: str, delay: int = 20, **params) -> Env:
    try:
        cls = ENVIRONMENTS[name]
    except KeyError:
        raise ContractViolation(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}") from None
    env = cls(**params)
    return env if delay == 1 else DelayedRewards(env, delay)
