"""Learned dense reward: an ensemble of tanh networks with a unit-norm output weight,
fit to sparse-return rankings with a pairwise logistic loss."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .mdp import Trajectory, discount_weights
from .mlp import AdamState, MlpParams, adam_init, adam_step, backward, forward, forward_cache, init_mlp, \
    mlp_from_bytes, mlp_to_bytes

_ENS_MAGIC = b"ENS1"


def pair_probability(return_i: float, return_j: float) -> float:
    """P(tau_i preferred over tau_j) = exp(R_i) / (exp(R_i) + exp(R_j)), evaluated stably.

    The two orientations are computed so that ``p(a, b) + p(b, a) == 1`` exactly.
    """
    if not (np.isfinite(return_i) and np.isfinite(return_j)):
        raise ContractViolation("returns must be finite")
    d = float(return_i) - float(return_j)
    if d >= 0.0:
        return 1.0 / (1.0 + np.exp(-d))
    return 1.0 - 1.0 / (1.0 + np.exp(d))


def one_hot(actions, num_actions: int) -> np.ndarray:
    out = np.zeros((len(actions), num_actions))
    out[np.arange(len(actions)), actions] = 1.0
    return out


def model_inputs(traj: Trajectory, num_actions: int) -> np.ndarray:
    """Rows of [state features, one-hot action], cached on the trajectory."""
    key = ("inputs", num_actions)
    cached = traj._cache.get(key)
    if cached is None:
        states = np.asarray(traj.states, dtype=np.float64)
        if states.ndim == 1:
            states = states[:, None]
        cached = np.hstack([states, one_hot(traj.actions, num_actions)])
        cached.setflags(write=False)
        traj._cache[key] = cached
    return cached


@dataclass
class RewardNet:
    trunk: MlpParams
    w: np.ndarray

    def features(self, x) -> np.ndarray:
        return forward(self.trunk, x)

    def reward(self, x) -> np.ndarray:
        return forward(self.trunk, x) @ self.w

    def arrays(self) -> list:
        return self.trunk.arrays() + [self.w]

    def copy(self) -> "RewardNet":
        return RewardNet(self.trunk.copy(), self.w.copy())


def init_reward_net(input_dim: int, rng: np.random.Generator, hidden=(64, 64), num_features: int = 4) -> RewardNet:
    sizes = [input_dim, *hidden, num_features]
    trunk = init_mlp(sizes, ["tanh"] * (len(sizes) - 1), rng)
    w = rng.standard_normal(num_features)
    return RewardNet(trunk, w / np.linalg.norm(w))


class _PairBatch:
    """Stacked model inputs for a batch of labelled pairs."""

    def __init__(self, pairs, num_actions, gamma, discounted):
        if not pairs:
            raise ContractViolation("empty pair batch")
        trajs = []
        for p in pairs:
            pref, other = (p.tau_i, p.tau_j) if p.i_preferred else (p.tau_j, p.tau_i)
            trajs.extend((pref, other))
        self.inputs = np.vstack([model_inputs(t, num_actions) for t in trajs])
        lengths = np.array([len(t) for t in trajs])
        self.segments = np.repeat(np.arange(len(trajs)), lengths)
        self.weights = np.concatenate([
            discount_weights(n, gamma) if discounted else np.ones(n) for n in lengths
        ])
        self.n_traj = len(trajs)
        self.n_pairs = len(pairs)


def _member_loss_grad(net: RewardNet, batch: _PairBatch, want_grad=True):
    phi, cache = forward_cache(net.trunk, batch.inputs)
    step_reward = phi @ net.w
    returns = np.bincount(batch.segments, weights=batch.weights * step_reward, minlength=batch.n_traj)
    margin = returns[0::2] - returns[1::2]
    loss = float(np.mean(np.logaddexp(0.0, -margin)))
    if not want_grad:
        return loss, None
    # d loss / d margin = -sigmoid(-margin) / B
    d_margin = -np.exp(-np.logaddexp(0.0, margin)) / batch.n_pairs
    d_returns = np.empty(batch.n_traj)
    d_returns[0::2] = d_margin
    d_returns[1::2] = -d_margin
    d_step = d_returns[batch.segments] * batch.weights
    grad_w = phi.T @ d_step
    trunk_grads, _ = backward(net.trunk, cache, np.outer(d_step, net.w))
    return loss, trunk_grads.arrays() + [grad_w]


def pair_loss(net: RewardNet, pairs, num_actions: int, gamma: float, discounted: bool = True) -> float:
    """Mean negative log-likelihood of the pair labels under learned returns."""
    return _member_loss_grad(net, _PairBatch(pairs, num_actions, gamma, discounted), want_grad=False)[0]


def pair_loss_grad(net: RewardNet, pairs, num_actions: int, gamma: float, discounted: bool = True):
    """Loss and gradients in :meth:`RewardNet.arrays` order (trunk arrays, then ``w``)."""
    return _member_loss_grad(net, _PairBatch(pairs, num_actions, gamma, discounted))


class RewardEnsemble:
    """Independently initialised reward nets whose outputs are averaged."""

    def __init__(self, members, num_actions: int, gamma: float, lr: float = 1e-3, discounted: bool = True):
        if not members:
            raise ContractViolation("an ensemble needs at least one member")
        dims = {m.trunk.in_dim for m in members}
        if len(dims) != 1:
            raise ContractViolation("ensemble members must share the input width")
        self.members = list(members)
        self.optimizers = [adam_init(m.arrays(), lr=lr) for m in self.members]
        self.num_actions = num_actions
        self.gamma = gamma
        self.discounted = discounted
        # Bumped on every update so callers can cache evaluations.
        self.version = 0

    @classmethod
    def create(cls, state_dim: int, num_actions: int, gamma: float, rng: np.random.Generator, size: int = 4,
               hidden=(64, 64), num_features: int = 4, lr: float = 1e-3, discounted: bool = True):
        members = [init_reward_net(state_dim + num_actions, rng, hidden, num_features) for _ in range(size)]
        return cls(members, num_actions, gamma, lr, discounted)

    @property
    def input_dim(self) -> int:
        return self.members[0].trunk.in_dim

    def rewards(self, inputs) -> np.ndarray:
        """Ensemble-mean reward for a batch of model-input rows."""
        inputs = np.asarray(inputs, dtype=np.float64)
        total = np.zeros(inputs.shape[:-1])
        for m in self.members:
            total = total + m.reward(inputs)
        return total / len(self.members)

    def dense_reward(self, state_features, action_features) -> float:
        x = np.concatenate([np.atleast_1d(np.asarray(state_features, dtype=np.float64)),
                            np.atleast_1d(np.asarray(action_features, dtype=np.float64))])
        if x.shape[0] != self.input_dim:
            raise ContractViolation(f"input width {x.shape[0]} != model width {self.input_dim}")
        return float(self.rewards(x))

    def state_action_rewards(self, states, actions) -> np.ndarray:
        states = np.asarray(states, dtype=np.float64)
        if states.ndim == 1:
            states = states[:, None]
        return self.rewards(np.hstack([states, one_hot(np.asarray(actions, dtype=np.int64), self.num_actions)]))

    def learned_returns(self, trajs) -> np.ndarray:
        """Discounted (or plain, per ``discounted``) ensemble return of each trajectory."""
        if not trajs:
            return np.zeros(0)
        inputs = np.vstack([model_inputs(t, self.num_actions) for t in trajs])
        lengths = np.array([len(t) for t in trajs])
        seg = np.repeat(np.arange(len(trajs)), lengths)
        weights = np.concatenate([discount_weights(n, self.gamma) if self.discounted else np.ones(n)
                                  for n in lengths])
        return np.bincount(seg, weights=weights * self.rewards(inputs), minlength=len(trajs))

    def update(self, pair_batches) -> float:
        """One Adam step per member on its own batch, then project ``w`` back to the unit sphere.

        Returns the mean pre-step loss across members.
        """
        if len(pair_batches) != len(self.members):
            raise ContractViolation("need one pair batch per ensemble member")
        losses = []
        for net, opt, pairs in zip(self.members, self.optimizers, pair_batches):
            loss, grads = pair_loss_grad(net, pairs, self.num_actions, self.gamma, self.discounted)
            adam_step(net.arrays(), grads, opt)
            norm = np.linalg.norm(net.w)
            # Skip a no-op projection so a zero step leaves w bit-identical.
            if abs(norm - 1.0) > 1e-12:
                net.w /= norm
            losses.append(loss)
        self.version += 1
        return float(np.mean(losses))

    def as_reward_fn(self) -> "EnsembleReward":
        return EnsembleReward(self)


class EnsembleReward:
    """Adapts an ensemble to the ``(state_features, action) -> reward`` interface."""

    def __init__(self, ensemble: RewardEnsemble):
        self.ensemble = ensemble

    def __call__(self, state, action) -> float:
        return float(self.ensemble.state_action_rewards(np.atleast_1d(state)[None, :], [action])[0])

    def batch(self, states, actions) -> np.ndarray:
        return self.ensemble.state_action_rewards(states, actions)


def update_ensemble(ensemble: RewardEnsemble, pair_batches) -> RewardEnsemble:
    ensemble.update(pair_batches)
    return ensemble


def ensemble_to_bytes(ensemble: RewardEnsemble) -> bytes:
    parts = [_ENS_MAGIC, struct.pack("<I", len(ensemble.members))]
    for m in ensemble.members:
        parts.append(mlp_to_bytes(m.trunk))
        parts.append(struct.pack("<I", len(m.w)))
        parts.append(np.ascontiguousarray(m.w, dtype="<f8").tobytes())
    return b"".join(parts)


def ensemble_from_bytes(blob: bytes, num_actions: int, gamma: float, lr: float = 1e-3,
                        discounted: bool = True) -> RewardEnsemble:
    if blob[:4] != _ENS_MAGIC:
        raise ContractViolation("not an ensemble snapshot")
    (count,) = struct.unpack_from("<I", blob, 4)
    offset = 8
    members = []
    for _ in range(count):
        trunk, offset = mlp_from_bytes(blob, offset)
        (f,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        w = np.frombuffer(blob, dtype="<f8", count=f, offset=offset).astype(np.float64)
        offset += 8 * f
        members.append(RewardNet(trunk, w))
    return RewardEnsemble(members, num_actions, gamma, lr, discounted)
