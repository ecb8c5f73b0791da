import numpy as np
import pytest
from hypothesis import given, strategies as st

from sors.backends import (NeuralSoftQ, ReplayBatch, ReplayBuffer, TabularSoftQ, TabularTransition, boltzmann,
                           init_neural_q, neural_q_loss_grad, neural_q_update, qtable_from_bytes, qtable_to_bytes,
                           soft_q_step, value_iteration)
from sors.envs import DelayedChain, Observation, StepResult
from sors.errors import ContractViolation, ConvergenceError
from sors.mdp import MdpSpec, TableReward
from sors.mlp import forward


def chain3(gamma=0.9):
    mdp, reward = DelayedChain(3).as_mdp_spec(gamma)
    return mdp, reward


def random_finite_mdp(g):
    n_s, n_a = int(g.integers(2, 6)), int(g.integers(1, 4))
    t = g.random((n_s, n_a, n_s)) ** 3
    t /= t.sum(axis=2, keepdims=True)
    return MdpSpec(t, float(g.uniform(0.5, 0.95))), TableReward(g.normal(size=(n_s, n_a)))


class TestValueIteration:
    def test_three_state_chain(self):
        mdp, r = chain3(0.9)
        res = value_iteration(mdp, r, tol=1e-12)
        # right is the toward-goal action; d steps to the goal gives gamma^(d-1)
        assert res.q[1, 1] == pytest.approx(1.0, abs=1e-8)
        assert res.q[0, 1] == pytest.approx(0.9, abs=1e-8)
        assert res.policies() == {(1, 1, 0), (1, 1, 1)}  # goal state's action is irrelevant

    def test_scaling(self):
        g = np.random.default_rng(0)
        for _ in range(20):
            mdp, r = random_finite_mdp(g)
            a, b = value_iteration(mdp, r, tol=1e-11), value_iteration(mdp, r.scaled(2.0), tol=1e-11)
            np.testing.assert_allclose(b.q, 2 * a.q, atol=1e-8)
            assert a.optimal_actions == b.optimal_actions

    def test_zero_reward_all_optimal(self):
        mdp, _ = chain3()
        res = value_iteration(mdp, TableReward(np.zeros((3, 2))))
        assert len(res.policies()) == 2 ** 3

    def test_residual_bound(self):
        g = np.random.default_rng(1)
        mdp, r = random_finite_mdp(g)
        res = value_iteration(mdp, r, tol=1e-9)
        assert res.residual <= 1e-9
        table = r.table
        v = res.q.max(axis=1)
        backup = table + mdp.gamma * mdp.transition @ v
        assert np.max(np.abs(backup - res.q)) <= 1e-9

    def test_iteration_cap(self):
        with pytest.raises(ConvergenceError):
            value_iteration(MdpSpec.from_successors([[0]], 0.999), TableReward([[1.0]]), max_iterations=5)


class TestSoftQStep:
    def test_terminal(self):
        q = np.zeros((2, 2))
        soft_q_step(q, TabularTransition(0, 1, 1, True), 1.0, 1.0, 0.9, 0.1)
        assert q[0, 1] == 1.0

    def test_lr_zero(self):
        q = np.arange(4.0).reshape(2, 2)
        soft_q_step(q, TabularTransition(0, 0, 1, False), 5.0, 0.0, 0.9, 0.1)
        assert q.tolist() == [[0.0, 1.0], [2.0, 3.0]]

    def test_small_alpha_max_backup(self):
        q = np.array([[0.0, 0.0], [0.0, 2.0]])
        soft_q_step(q, TabularTransition(0, 0, 1, False), 0.0, 1.0, 1.0, 1e-6)
        assert q[0, 0] == pytest.approx(2.0, abs=1e-4)

    def test_soft_value_formula(self):
        q = np.array([[0.0, 0.0], [0.3, -0.4]])
        soft_q_step(q, TabularTransition(0, 1, 1, False), 0.5, 0.5, 0.8, 0.7)
        target = 0.5 + 0.8 * 0.7 * np.log(np.exp(0.3 / 0.7) + np.exp(-0.4 / 0.7))
        assert q[0, 1] == pytest.approx(0.5 * target, rel=1e-12)

    def test_rejects_bad_lr(self):
        with pytest.raises(ContractViolation):
            soft_q_step(np.zeros((1, 1)), TabularTransition(0, 0, 0, True), 0.0, 1.5, 0.9, 0.1)

    def test_batch_of_one_matches_step(self, rng):
        agent = TabularSoftQ(3, 2, 0.9, alpha=0.2, lr=0.4)
        agent.q[...] = rng.normal(size=(3, 2))
        ref = agent.q.copy()
        batch = ReplayBatch(np.zeros((1, 1)), np.array([1]), np.array([0]), np.zeros((1, 1)), np.array([2]),
                            np.array([False]), np.zeros(1), np.zeros(1))
        agent.update_on(batch, np.array([0.7]))
        soft_q_step(ref, TabularTransition(1, 0, 2, False), 0.7, 0.4, 0.9, 0.2)
        np.testing.assert_allclose(agent.q, ref, rtol=0, atol=1e-15)


class TestAct:
    def test_uniform_on_ties(self):
        agent = TabularSoftQ(1, 2, 0.9, alpha=1.0)
        g = np.random.default_rng(0)
        obs = Observation(np.zeros(1), 0)
        draws = np.array([agent.act(obs, False, g) for _ in range(10_000)])
        counts = np.bincount(draws, minlength=2)
        chi2 = float(np.sum((counts - 5000) ** 2 / 5000))
        assert chi2 < 10.83  # p > 0.001 at 1 dof

    def test_greedy(self):
        agent = TabularSoftQ(1, 2, 0.9, alpha=1.0)
        agent.q[0] = [0.0, 10.0]
        assert agent.act(Observation(np.zeros(1), 0), True, None) == 1
        agent.q[0] = [1.0, 1.0]
        assert agent.act(Observation(np.zeros(1), 0), True, None) == 0

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=6), st.floats(1e-3, 10))
    def test_boltzmann_normalized(self, q, alpha):
        p = boltzmann(np.array(q), alpha)
        assert abs(p.sum() - 1.0) <= 1e-12 and np.all(p >= 0)

    def test_boltzmann_frequencies(self):
        agent = TabularSoftQ(1, 3, 0.9, alpha=0.5)
        agent.q[0] = [0.0, 0.5, 1.0]
        g = np.random.default_rng(4)
        obs = Observation(np.zeros(1), 0)
        counts = np.bincount([agent.act(obs, False, g) for _ in range(20_000)], minlength=3)
        expected = boltzmann(agent.q[0], 0.5) * 20_000
        assert float(np.sum((counts - expected) ** 2 / expected)) < 13.8  # p ~ 0.001, 2 dof


def transition_batch(g, n, dim=3, terminal=True):
    return ReplayBatch(g.normal(size=(n, dim)), np.full(n, -1), g.integers(2, size=n), g.normal(size=(n, dim)),
                       np.full(n, -1), np.full(n, terminal), np.zeros(n), np.zeros(n))


class TestNeural:
    def test_converges_to_constant_reward(self):
        g = np.random.default_rng(0)
        state = init_neural_q(3, 2, g, hidden=(32,), lr=1e-2)
        batch = transition_batch(g, 16)
        reward = lambda b: np.full(len(b), 0.7)
        for _ in range(1500):
            neural_q_update(state, batch, reward, 0.9)
        q = forward(state.online, batch.states)[np.arange(16), batch.actions]
        assert np.max(np.abs(q - 0.7)) < 1e-3

    def test_lr_zero(self, rng):
        state = init_neural_q(3, 2, rng, lr=0.0)
        before = [a.copy() for a in state.online.arrays()]
        neural_q_update(state, transition_batch(rng, 8, terminal=False), lambda b: np.ones(len(b)), 0.9)
        assert all(np.array_equal(a, b) for a, b in zip(state.online.arrays(), before))

    def test_relabeling(self, rng):
        state = init_neural_q(3, 2, rng)
        batch = transition_batch(rng, 8, terminal=False)

        class Live:
            scale = 1.0

            def rewards(self, b):
                return self.scale * b.states[:, 0]

        live = Live()
        _, _, t1 = neural_q_loss_grad(state, batch, live.rewards(batch), 0.9)
        live.scale = 3.0
        _, _, t2 = neural_q_loss_grad(state, batch, live.rewards(batch), 0.9)
        assert not np.allclose(t1, t2)

    def test_target_copy_period(self, rng):
        state = init_neural_q(3, 2, rng, lr=1e-2, target_period=3)
        batch = transition_batch(rng, 4, terminal=False)
        original = [a.copy() for a in state.target.arrays()]
        for k in range(1, 4):
            neural_q_update(state, batch, lambda b: np.ones(len(b)), 0.9)
            same = all(np.array_equal(a, b) for a, b in zip(state.target.arrays(), original))
            assert same == (k < 3)
        assert all(np.array_equal(a, b) for a, b in zip(state.target.arrays(), state.online.arrays()))

    def test_loss_decreases_on_frozen_batch(self):
        wins = 0
        for seed in range(10):
            g = np.random.default_rng(seed)
            state = init_neural_q(3, 2, g, lr=1e-3, target_period=10**9)
            batch = transition_batch(g, 32, terminal=False)
            rewards = g.normal(size=32)
            losses = []
            for _ in range(11):
                loss, _, _ = neural_q_loss_grad(state, batch, rewards, 0.9)
                losses.append(loss)
                neural_q_update(state, batch, lambda b: rewards, 0.9)
            wins += all(b < a for a, b in zip(losses, losses[1:]))
        assert wins >= 9

    def test_empty_minibatch(self, rng):
        state = init_neural_q(3, 2, rng)
        with pytest.raises(ContractViolation):
            neural_q_update(state, transition_batch(rng, 0), lambda b: np.zeros(0), 0.9)

    def test_snapshot_round_trip(self, rng):
        agent = NeuralSoftQ(3, 2, 0.9, rng)
        params = NeuralSoftQ.load_params(agent.snapshot())
        x = rng.normal(size=(5, 3))
        np.testing.assert_array_equal(forward(params, x), forward(agent.state.online, x))


class TestReplay:
    def test_no_reward_stored_and_ring(self):
        buf = ReplayBuffer(3, 1)
        for k in range(5):
            obs = Observation(np.array([float(k)]), k)
            nxt = Observation(np.array([k + 1.0]), k + 1)
            buf.add(obs, k % 2, StepResult(nxt, 1.0, -1.0, k == 4, False))
        assert len(buf) == 3
        batch = buf.take(np.arange(3))
        assert sorted(batch.state_ids.tolist()) == [2, 3, 4]

    def test_truncation_is_not_terminal(self):
        buf = ReplayBuffer(2, 1)
        o = Observation(np.zeros(1), 0)
        buf.add(o, 0, StepResult(o, 0.0, 0.0, True, True))
        buf.add(o, 0, StepResult(o, 1.0, 0.0, True, False))
        assert buf.take(np.arange(2)).terminal.tolist() == [False, True]

    def test_qtable_round_trip(self, rng):
        q = rng.normal(size=(4, 3))
        np.testing.assert_array_equal(qtable_from_bytes(qtable_to_bytes(q)), q)


def test_tabular_learns_chain():
    env = DelayedChain(5)
    agent = TabularSoftQ(5, 2, 0.9, alpha=0.01, lr=0.5)
    g = np.random.default_rng(0)
    from sors.loop import SparseRewards
    for _ in range(30):
        obs = env.reset()
        while not env.done:
            a = int(g.integers(2))
            res = env.step(a)
            agent.observe(obs, a, res)
            obs = res.observation
    for _ in range(500):
        agent.update(SparseRewards(), g)
    mdp, r = env.as_mdp_spec(0.9)
    vi = value_iteration(mdp, r)
    for s in range(4):
        assert int(np.argmax(agent.q[s])) in vi.optimal_actions[s]
