"""The alternating training loop: gather experience, periodically refit the learned
reward on sparse-return rankings, periodically update the policy against it."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .buffer import HoldoutPool, TrajectoryBuffer, ranking_accuracy, sample_pairs
from .errors import ContractViolation, NoRankablePairs
from .mdp import Trajectory
from .reward_model import RewardEnsemble

log = logging.getLogger(__name__)

MODES = ("sors", "sparse", "hand_dense")


@dataclass(frozen=True)
class SorsConfig:
    total_steps: int = 100_000
    reward_period: int = 1000
    reward_updates: int = 100
    policy_period: int = 1
    policy_updates: int = 1
    initial_random_steps: int = 2000
    buffer_capacity: int = 200
    pair_batch_size: int = 10
    holdout_fraction: float = 0.2
    holdout_per_return: int = 5
    eval_period: int = 1000
    eval_episodes: int = 1
    gamma: float = 0.95
    mode: str = "sors"
    seed: int = 0

    def __post_init__(self):
        for name in ("total_steps", "reward_period", "reward_updates", "policy_period", "policy_updates",
                     "buffer_capacity", "pair_batch_size", "eval_period", "eval_episodes"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"{name} must be positive")
        if self.initial_random_steps < 0 or self.total_steps < self.initial_random_steps:
            raise ContractViolation("need 0 <= initial_random_steps <= total_steps")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ContractViolation("holdout_fraction must lie in (0, 1)")
        if not 0.0 < self.gamma <= 1.0:
            raise ContractViolation("gamma must lie in (0, 1]")
        if self.mode not in MODES:
            raise ContractViolation(f"mode must be one of {MODES}")


@dataclass(frozen=True)
class EvalRecord:
    step: int
    sparse_return: float
    learned_return: float


@dataclass(frozen=True)
class RewardPhaseRecord:
    step: int
    mean_loss: float
    holdout_accuracy: float
    skipped: bool


@dataclass
class RunLog:
    evaluations: list = field(default_factory=list)
    reward_phases: list = field(default_factory=list)
    policy_phases: int = 0
    episodes: int = 0
    final_holdout_accuracy: float = float("nan")
    wall_clock: float = field(default=0.0, compare=False)

    def add_eval(self, rec: EvalRecord):
        if self.evaluations and rec.step <= self.evaluations[-1].step:
            raise ContractViolation("evaluation steps must increase")
        self.evaluations.append(rec)


class SparseRewards:
    """Rewards exactly as the (possibly delayed) environment emitted them."""

    def rewards(self, batch):
        return batch.sparse


class HandDenseRewards:
    def rewards(self, batch):
        return batch.hand


class LearnedRewards:
    """Ensemble-mean reward recomputed on every call.

    With a finite state space the (S, A) table is cached until the ensemble's
    version changes, which gives identical values at lower cost.
    """

    def __init__(self, ensemble: RewardEnsemble, state_features: np.ndarray | None = None):
        self.ensemble = ensemble
        self.state_features = state_features
        self._table = None
        self._version = -1

    def table(self) -> np.ndarray:
        if self._version != self.ensemble.version:
            n_s = len(self.state_features)
            n_a = self.ensemble.num_actions
            states = np.repeat(self.state_features, n_a, axis=0)
            actions = np.tile(np.arange(n_a), n_s)
            self._table = self.ensemble.state_action_rewards(states, actions).reshape(n_s, n_a)
            self._version = self.ensemble.version
        return self._table

    def rewards(self, batch):
        if self.state_features is not None and np.all(batch.state_ids >= 0):
            return self.table()[batch.state_ids, batch.actions]
        return self.ensemble.state_action_rewards(batch.states, batch.actions)


class EpisodeRecorder:
    def __init__(self):
        self.states, self.ids, self.actions, self.rewards = [], [], [], []

    def add(self, obs, action, sparse_reward):
        self.states.append(obs.features)
        self.ids.append(-1 if obs.state is None else obs.state)
        self.actions.append(action)
        self.rewards.append(sparse_reward)

    def finish(self) -> Trajectory:
        traj = Trajectory(np.array(self.states), np.array(self.actions), np.array(self.rewards),
                          np.array(self.ids))
        self.__init__()
        return traj


def _rollout(env, choose, on_step=None):
    obs = env.reset()
    rec = EpisodeRecorder()
    total = 0.0
    while True:
        a = choose(obs)
        res = env.step(a)
        rec.add(obs, a, res.sparse_reward)
        total += res.sparse_reward
        if on_step is not None:
            on_step(obs, a, res)
        obs = res.observation
        if res.done:
            return total, rec.finish()


def collect_initial(env, buffer: TrajectoryBuffer, steps: int, rng: np.random.Generator, on_step=None,
                    store=None) -> int:
    """Run a uniform-random policy for ``steps`` interactions, storing completed episodes.

    A trailing unfinished episode is dropped (its transitions still reach
    ``on_step``). ``store`` overrides ``buffer.append`` as the episode sink.
    Returns the number of completed episodes.
    """
    store = store or buffer.append
    if steps <= 0:
        return 0
    stored = 0
    obs = env.reset()
    rec = EpisodeRecorder()
    for _ in range(steps):
        a = int(rng.integers(env.num_actions))
        res = env.step(a)
        rec.add(obs, a, res.sparse_reward)
        if on_step is not None:
            on_step(obs, a, res)
        obs = res.observation
        if res.done:
            store(rec.finish())
            stored += 1
            obs = env.reset()
    return stored


def evaluate(backend, env, episodes: int, rng: np.random.Generator | None = None, ensemble=None, gamma=1.0):
    """Greedy rollouts scored with the environment's own sparse reward (undiscounted sum).

    Returns ``(mean_return, per_episode_returns, mean_learned_return)``; the
    learned return is NaN without an ensemble.
    """
    if episodes < 1:
        raise ContractViolation("episodes must be positive")
    returns, learned = [], []
    for _ in range(episodes):
        total, traj = _rollout(env, lambda o: backend.act(o, True, rng))
        returns.append(total)
        if ensemble is not None:
            learned.append(float(ensemble.learned_returns([traj])[0]))
    mean_learned = float(np.mean(learned)) if learned else float("nan")
    return float(np.mean(returns)), returns, mean_learned


def holdout_accuracy(ensemble, held) -> float:
    held = list(held)
    if len(held) < 2:
        return float("nan")
    return ranking_accuracy(held, ensemble.learned_returns([e.traj for e in held]))


def _reward_phase(ensemble, buffer, held, cfg, rng):
    try:
        losses = [ensemble.update([sample_pairs(buffer, cfg.pair_batch_size, rng) for _ in ensemble.members])
                  for _ in range(cfg.reward_updates)]
    except NoRankablePairs as exc:
        log.debug("reward phase skipped: %s", exc)
        return float("nan"), holdout_accuracy(ensemble, held), True
    return float(np.mean(losses)), holdout_accuracy(ensemble, held), False


def run(config: SorsConfig, env, backend, ensemble: RewardEnsemble | None, eval_env=None,
        reward_source=None) -> RunLog:
    """Run the alternating loop for ``config.total_steps`` interactions (initial random steps included)."""
    started = time.perf_counter()
    streams = np.random.SeedSequence(config.seed).spawn(5)
    act_rng, update_rng, pair_rng, holdout_rng, eval_rng = (np.random.default_rng(s) for s in streams)
    if eval_env is None:
        raise ContractViolation("an evaluation environment instance is required")
    shaping = config.mode == "sors"
    if shaping and ensemble is None:
        raise ContractViolation("sors mode needs a reward ensemble")
    if reward_source is None:
        if shaping:
            feats = env.all_state_features() if getattr(env, "is_finite", False) else None
            reward_source = LearnedRewards(ensemble, feats)
        elif config.mode == "sparse":
            reward_source = SparseRewards()
        else:
            reward_source = HandDenseRewards()

    buffer = TrajectoryBuffer(config.buffer_capacity, config.gamma)
    held = HoldoutPool(config.holdout_per_return, config.gamma)
    runlog = RunLog()

    def store(traj):
        # Each episode is routed once: a held-out episode is never trained on.
        if holdout_rng.random() < config.holdout_fraction:
            held.offer(traj)
        else:
            buffer.append(traj)
        runlog.episodes += 1

    def tick(i):
        # Phases are gated on the global interaction count, random warm-up included,
        # so N steps always attempt floor(N / period) phases of each kind.
        if shaping and i % config.reward_period == 0:
            loss, acc, skipped = _reward_phase(ensemble, buffer, held, config, pair_rng)
            runlog.reward_phases.append(RewardPhaseRecord(i, loss, acc, skipped))
        if i % config.policy_period == 0:
            for _ in range(config.policy_updates):
                backend.update(reward_source, update_rng)
            runlog.policy_phases += 1
        if i % config.eval_period == 0:
            ret, _, learned = evaluate(backend, eval_env, config.eval_episodes, eval_rng,
                                       ensemble if shaping else None, config.gamma)
            runlog.add_eval(EvalRecord(i, ret, learned))
            if i % (config.eval_period * 10) == 0:
                log.info("step %d return %.3f", i, ret)

    counter = 0

    def warmup_step(obs, a, res):
        nonlocal counter
        backend.observe(obs, a, res)
        counter += 1
        tick(counter)

    collect_initial(env, buffer, config.initial_random_steps, act_rng, warmup_step, store)

    obs = env.reset()
    rec = EpisodeRecorder()
    for i in range(config.initial_random_steps + 1, config.total_steps + 1):
        a = backend.act(obs, False, act_rng)
        res = env.step(a)
        backend.observe(obs, a, res)
        rec.add(obs, a, res.sparse_reward)
        obs = res.observation
        if res.done:
            store(rec.finish())
            obs = env.reset()
        tick(i)
    if shaping:
        runlog.final_holdout_accuracy = holdout_accuracy(ensemble, held)
    runlog.wall_clock = time.perf_counter() - started
    return runlog


