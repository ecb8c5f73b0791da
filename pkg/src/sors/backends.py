"""Base RL algorithms: exact value iteration, tabular soft Q-learning and a neural
entropy-regularised Q-learner with a target network."""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ContractViolation, ConvergenceError
from .mdp import MdpSpec, TableReward
from .mlp import adam_init, adam_step, backward, forward, forward_cache, init_mlp, mlp_from_bytes, mlp_to_bytes

_QTABLE_MAGIC = b"QTB1"


def reward_table(mdp: MdpSpec, r) -> np.ndarray:
    """Evaluate ``r`` on every (state, action) of a finite MDP."""
    if isinstance(r, TableReward):
        if r.table.shape != (mdp.num_states, mdp.num_actions):
            raise ContractViolation("reward table shape does not match the MDP")
        return r.table
    return np.array([[r(s, a) for a in range(mdp.num_actions)] for s in range(mdp.num_states)], dtype=np.float64)


def logsumexp(x, axis=-1):
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def soft_value(q, alpha):
    """alpha * log sum_a exp(q / alpha) along the last axis."""
    return alpha * logsumexp(np.asarray(q) / alpha, axis=-1)


def boltzmann(q, alpha) -> np.ndarray:
    z = np.asarray(q, dtype=np.float64) / alpha
    z = np.exp(z - z.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def greedy_action_sets(q: np.ndarray, tie_tol: float):
    best = q.max(axis=1, keepdims=True)
    return tuple(frozenset(np.flatnonzero(row >= b - tie_tol).tolist()) for row, b in zip(q, best[:, 0]))


def enumerate_policies(action_sets) -> set:
    """All deterministic policies (tuples of actions) drawing each state's action from its set."""
    return set(itertools.product(*[sorted(s) for s in action_sets]))


@dataclass
class ValueIterationResult:
    q: np.ndarray
    optimal_actions: tuple
    residual: float
    iterations: int

    def policies(self) -> set:
        return enumerate_policies(self.optimal_actions)


def bellman_backup(mdp: MdpSpec, rewards: np.ndarray, q: np.ndarray) -> np.ndarray:
    v = q.max(axis=1)
    v = np.where(mdp.terminal_mask(), 0.0, v)
    cont = np.where(mdp.terminal_mask(), 0.0, 1.0)[:, None]
    return rewards + mdp.gamma * cont * (mdp.transition @ v)


def value_iteration(mdp: MdpSpec, r, tol: float = 1e-10, tie_tol: float = 1e-9,
                    max_iterations: int = 100_000) -> ValueIterationResult:
    """Iterate the optimality operator until the sup-norm Bellman residual is at most ``tol``.

    Returns Q* and, per state, every action within ``tie_tol`` of the best.
    """
    rewards = reward_table(mdp, r)
    q = np.zeros_like(rewards)
    for it in range(1, max_iterations + 1):
        nxt = bellman_backup(mdp, rewards, q)
        residual = float(np.max(np.abs(nxt - q)))
        if residual <= tol:
            return ValueIterationResult(q, greedy_action_sets(q, tie_tol), residual, it)
        q = nxt
    raise ConvergenceError(f"value iteration did not converge in {max_iterations} sweeps (residual {residual:.3g})")


class TabularTransition(NamedTuple):
    state: int
    action: int
    next_state: int
    terminal: bool


def soft_q_step(table: np.ndarray, transition: TabularTransition, reward_value: float, lr: float,
                gamma: float, alpha: float) -> np.ndarray:
    """Q(s,a) <- (1-lr) Q(s,a) + lr * (r + gamma * alpha * logsumexp(Q(s',.)/alpha)); in place."""
    if not 0.0 <= lr <= 1.0:
        raise ContractViolation("lr must lie in [0, 1]")
    if alpha <= 0:
        raise ContractViolation("alpha must be positive")
    s, a, s2, terminal = transition
    target = reward_value
    if not terminal:
        target += gamma * float(soft_value(table[s2], alpha))
    table[s, a] = (1.0 - lr) * table[s, a] + lr * target
    return table


def qtable_to_bytes(table: np.ndarray) -> bytes:
    rows, cols = table.shape
    return _QTABLE_MAGIC + struct.pack("<II", rows, cols) + np.ascontiguousarray(table, dtype="<f8").tobytes()


def qtable_from_bytes(blob: bytes) -> np.ndarray:
    if blob[:4] != _QTABLE_MAGIC:
        raise ContractViolation("not a Q-table snapshot")
    rows, cols = struct.unpack_from("<II", blob, 4)
    return np.frombuffer(blob, dtype="<f8", count=rows * cols, offset=12).reshape(rows, cols).astype(np.float64)


@dataclass
class ReplayBatch:
    states: np.ndarray
    state_ids: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    next_ids: np.ndarray
    terminal: np.ndarray
    # Environment-emitted rewards, consumed only by the sparse / hand-dense baselines.
    sparse: np.ndarray
    hand: np.ndarray

    def __len__(self):
        return len(self.actions)


class ReplayBuffer:
    """Ring buffer of transitions. The learned reward is never stored; it is recomputed at update time."""

    def __init__(self, capacity: int, feature_dim: int):
        self.capacity = capacity
        self.size = 0
        self.cursor = 0
        self.states = np.zeros((capacity, feature_dim))
        self.next_states = np.zeros((capacity, feature_dim))
        self.state_ids = np.zeros(capacity, dtype=np.int64)
        self.next_ids = np.zeros(capacity, dtype=np.int64)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.terminal = np.zeros(capacity, dtype=bool)
        self.sparse = np.zeros(capacity)
        self.hand = np.zeros(capacity)

    def __len__(self):
        return self.size

    def add(self, obs, action, result) -> None:
        k = self.cursor
        self.states[k] = obs.features
        self.next_states[k] = result.observation.features
        self.state_ids[k] = -1 if obs.state is None else obs.state
        self.next_ids[k] = -1 if result.observation.state is None else result.observation.state
        self.actions[k] = action
        self.terminal[k] = result.done and not result.truncated
        self.sparse[k] = result.sparse_reward
        self.hand[k] = result.dense_reward_hand
        self.cursor = (k + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def take(self, idx) -> ReplayBatch:
        return ReplayBatch(self.states[idx], self.state_ids[idx], self.actions[idx], self.next_states[idx],
                           self.next_ids[idx], self.terminal[idx], self.sparse[idx], self.hand[idx])

    def sample(self, rng: np.random.Generator, n: int) -> ReplayBatch:
        return self.take(rng.integers(self.size, size=n))


def _sample_action(probs: np.ndarray, rng: np.random.Generator) -> int:
    u = rng.random()
    a = int(np.searchsorted(np.cumsum(probs), u, side="right"))
    return min(a, len(probs) - 1)


class TabularSoftQ:
    """Soft Q-learning on a table, trained from uniformly replayed minibatches."""

    def __init__(self, num_states: int, num_actions: int, gamma: float, alpha: float = 0.01, lr: float = 0.5,
                 batch_size: int = 32, replay_capacity: int = 100_000, feature_dim: int = 1):
        if alpha <= 0:
            raise ContractViolation("alpha must be positive")
        self.q = np.zeros((num_states, num_actions))
        self.gamma, self.alpha, self.lr, self.batch_size = gamma, alpha, lr, batch_size
        self.replay = ReplayBuffer(replay_capacity, feature_dim)
        self.updates = 0

    def q_values(self, obs) -> np.ndarray:
        return self.q[obs.state]

    def act(self, obs, greedy: bool, rng: np.random.Generator) -> int:
        q = self.q_values(obs)
        if greedy:
            return int(np.argmax(q))
        return _sample_action(boltzmann(q, self.alpha), rng)

    def observe(self, obs, action, result) -> None:
        self.replay.add(obs, action, result)

    def update(self, reward_source, rng: np.random.Generator) -> None:
        if self.replay.size == 0:
            return
        batch = self.replay.sample(rng, self.batch_size)
        self.update_on(batch, reward_source.rewards(batch))

    def update_on(self, batch: ReplayBatch, rewards: np.ndarray) -> None:
        """Synchronous minibatch backup: targets use the pre-update table; duplicate
        (s, a) entries in a batch are averaged. A batch of one equals :func:`soft_q_step`."""
        n_a = self.q.shape[1]
        cont = np.where(batch.terminal, 0.0, self.gamma)
        targets = rewards + cont * soft_value(self.q[batch.next_ids], self.alpha)
        flat = batch.state_ids * n_a + batch.actions
        keys, inverse = np.unique(flat, return_inverse=True)
        mean_target = np.bincount(inverse, weights=targets) / np.bincount(inverse)
        q_flat = self.q.reshape(-1)
        q_flat[keys] = (1.0 - self.lr) * q_flat[keys] + self.lr * mean_target
        self.updates += 1

    def snapshot(self) -> bytes:
        return qtable_to_bytes(self.q)


@dataclass
class NeuralQState:
    online: object
    target: object
    optimizer: object
    alpha: float
    target_period: int = 100
    updates: int = 0


def init_neural_q(feature_dim: int, num_actions: int, rng: np.random.Generator, hidden=(64, 64),
                  lr: float = 3e-4, alpha: float = 0.01, target_period: int = 100) -> NeuralQState:
    sizes = [feature_dim, *hidden, num_actions]
    online = init_mlp(sizes, ["relu"] * len(hidden) + ["identity"], rng)
    return NeuralQState(online, online.copy(), adam_init(online, lr=lr), alpha, target_period)


def neural_q_loss_grad(state: NeuralQState, batch: ReplayBatch, rewards: np.ndarray, gamma: float):
    """Squared soft-Bellman residual against the target network and its gradient."""
    next_q = forward(state.target, batch.next_states)
    cont = np.where(batch.terminal, 0.0, gamma)
    targets = rewards + cont * soft_value(next_q, state.alpha)
    q, cache = forward_cache(state.online, batch.states)
    rows = np.arange(len(batch))
    err = q[rows, batch.actions] - targets
    loss = 0.5 * float(np.mean(err * err))
    upstream = np.zeros_like(q)
    upstream[rows, batch.actions] = err / len(batch)
    grads, _ = backward(state.online, cache, upstream)
    return loss, grads, targets


def neural_q_update(state: NeuralQState, minibatch: ReplayBatch, reward_fn, gamma: float) -> NeuralQState:
    """One Adam step on the minibatch; rewards come from ``reward_fn`` at call time."""
    if len(minibatch) == 0:
        raise ContractViolation("empty minibatch")
    rewards = reward_fn.rewards(minibatch) if hasattr(reward_fn, "rewards") else np.asarray(reward_fn(minibatch))
    _, grads, _ = neural_q_loss_grad(state, minibatch, rewards, gamma)
    adam_step(state.online, grads, state.optimizer)
    state.updates += 1
    if state.updates % state.target_period == 0:
        state.target = state.online.copy()
    return state


class NeuralSoftQ:
    """Entropy-regularised Q-learning with an MLP over state features."""

    def __init__(self, feature_dim: int, num_actions: int, gamma: float, rng: np.random.Generator,
                 alpha: float = 0.01, lr: float = 3e-4, hidden=(64, 64), batch_size: int = 100,
                 target_period: int = 100, replay_capacity: int = 100_000):
        self.state = init_neural_q(feature_dim, num_actions, rng, hidden, lr, alpha, target_period)
        self.gamma, self.batch_size = gamma, batch_size
        self.replay = ReplayBuffer(replay_capacity, feature_dim)

    @property
    def alpha(self):
        return self.state.alpha

    @property
    def updates(self):
        return self.state.updates

    def q_values(self, obs) -> np.ndarray:
        return forward(self.state.online, obs.features)

    def act(self, obs, greedy: bool, rng: np.random.Generator) -> int:
        q = self.q_values(obs)
        if greedy:
            return int(np.argmax(q))
        return _sample_action(boltzmann(q, self.alpha), rng)

    def observe(self, obs, action, result) -> None:
        self.replay.add(obs, action, result)

    def update(self, reward_source, rng: np.random.Generator) -> None:
        if self.replay.size == 0:
            return
        neural_q_update(self.state, self.replay.sample(rng, self.batch_size), reward_source, self.gamma)

    def snapshot(self) -> bytes:
        return mlp_to_bytes(self.state.online)

    @staticmethod
    def load_params(blob: bytes):
        return mlp_from_bytes(blob)[0]
