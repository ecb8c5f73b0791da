import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sors.buffer import LabeledPair
from sors.errors import ContractViolation
from sors.mdp import Trajectory
from sors.reward_model import (RewardEnsemble, RewardNet, ensemble_from_bytes, ensemble_to_bytes,
                               init_reward_net, pair_loss, pair_loss_grad, pair_probability, update_ensemble)
from oracles import central_difference, logistic, relative_error

N_ACTIONS = 2


def random_traj(g, dim=2, max_len=6):
    n = int(g.integers(1, max_len + 1))
    return Trajectory(g.uniform(-1, 1, size=(n, dim)), g.integers(N_ACTIONS, size=n), np.zeros(n))


def random_pairs(g, count, dim=2):
    return [LabeledPair(random_traj(g, dim), random_traj(g, dim), bool(g.integers(2))) for _ in range(count)]


def small_net(g, dim=2):
    return init_reward_net(dim + N_ACTIONS, g, hidden=(5, 4), num_features=3)


def identity_net():
    """A one-feature net whose per-step reward equals the first input feature."""
    g = np.random.default_rng(0)
    net = init_reward_net(1 + N_ACTIONS, g, hidden=(), num_features=1)
    net.trunk.weights[0][...] = 0.0
    net.trunk.weights[0][0, 0] = 1.0
    net.trunk.activations[0] = "identity"
    net.w[...] = 1.0
    return net


def one_step(value):
    return Trajectory(np.array([[value]]), np.array([0]), np.zeros(1))


class TestPairProbability:
    def test_equal(self):
        assert pair_probability(3.2, 3.2) == 0.5

    def test_ln3(self):
        assert abs(pair_probability(math.log(3), 0.0) - 0.75) < 1e-12

    def test_saturation(self):
        assert abs(pair_probability(1000.0, 0.0) - 1.0) < 1e-12
        assert pair_probability(0.0, 1e6) == 0.0

    @pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
    def test_non_finite(self, bad):
        with pytest.raises(ContractViolation):
            pair_probability(bad, 0.0)

    @given(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6))
    def test_complement_exact(self, a, b):
        assert pair_probability(a, b) + pair_probability(b, a) == 1.0

    @given(st.floats(-30, 30), st.floats(-30, 30), st.floats(-100, 100))
    def test_translation_invariance(self, a, b, c):
        assert pair_probability(a + c, b + c) == pytest.approx(pair_probability(a, b), abs=1e-12)

    @given(st.floats(-30, 30))
    def test_matches_exp_ratio(self, d):
        assert pair_probability(d, 0.0) == pytest.approx(math.exp(d) / (math.exp(d) + 1.0), rel=1e-12)


class TestPairLoss:
    def test_equal_returns_ln2(self):
        net = identity_net()
        for label in (True, False):
            pair = LabeledPair(one_step(0.4), one_step(0.4), label)
            assert pair_loss(net, [pair], N_ACTIONS, 0.9) == pytest.approx(math.log(2), abs=1e-12)

    def test_saturated(self):
        net = identity_net()
        assert pair_loss(net, [LabeledPair(one_step(1000.0), one_step(0.0), True)], N_ACTIONS, 0.9) < 1e-12

    def test_contradicted_ln3(self):
        net = identity_net()
        pair = LabeledPair(one_step(math.log(3)), one_step(0.0), False)
        assert pair_loss(net, [pair], N_ACTIONS, 0.9) == pytest.approx(-math.log(0.25), abs=1e-12)

    def test_empty_batch(self, rng):
        with pytest.raises(ContractViolation):
            pair_loss(small_net(rng), [], N_ACTIONS, 0.9)

    def test_matches_reference_nll(self, rng):
        """Loss against a direct per-pair evaluation of the logistic likelihood."""
        net = small_net(rng)
        pairs = random_pairs(rng, 8)
        gamma = 0.8

        def ret(t):
            x = np.hstack([t.states, np.eye(N_ACTIONS)[t.actions]])
            return float(np.sum(gamma ** np.arange(len(t)) * net.reward(x)))

        ref = np.mean([-math.log(logistic(ret(p.tau_i) - ret(p.tau_j)) if p.i_preferred
                                  else logistic(ret(p.tau_j) - ret(p.tau_i))) for p in pairs])
        assert pair_loss(net, pairs, N_ACTIONS, gamma) == pytest.approx(ref, rel=1e-12)

    @given(st.integers(0, 2**31))
    def test_swap_invariance(self, seed):
        g = np.random.default_rng(seed)
        net = small_net(g)
        pairs = random_pairs(g, 5)
        swapped = [LabeledPair(p.tau_j, p.tau_i, not p.i_preferred) for p in pairs]
        assert pair_loss(net, pairs, N_ACTIONS, 0.9) == pytest.approx(pair_loss(net, swapped, N_ACTIONS, 0.9),
                                                                      rel=1e-12, abs=1e-15)

    @pytest.mark.parametrize("discounted", [True, False])
    def test_finite_differences(self, discounted):
        g = np.random.default_rng(3)
        for _ in range(5):
            net = small_net(g)
            pairs = random_pairs(g, 4)
            _, grads = pair_loss_grad(net, pairs, N_ACTIONS, 0.9, discounted)
            num = central_difference(lambda: pair_loss(net, pairs, N_ACTIONS, 0.9, discounted), net.arrays())
            assert relative_error(grads, num) < 1e-5


class TestEnsemble:
    def test_zero_trunk(self, rng):
        ens = RewardEnsemble.create(2, N_ACTIONS, 0.9, rng, size=1)
        for arr in ens.members[0].trunk.arrays():
            arr[...] = 0.0
        assert ens.dense_reward([0.3, -0.2], [1.0, 0.0]) == 0.0

    def test_opposite_members_cancel(self, rng):
        net = init_reward_net(4, rng)
        neg = RewardNet(net.trunk.copy(), -net.w)
        ens = RewardEnsemble([net, neg], N_ACTIONS, 0.9)
        assert ens.dense_reward([0.5, 0.1], [0.0, 1.0]) == pytest.approx(0.0, abs=1e-15)

    def test_dim_mismatch(self, rng):
        ens = RewardEnsemble.create(2, N_ACTIONS, 0.9, rng)
        with pytest.raises(ContractViolation):
            ens.dense_reward([0.5], [1.0, 0.0])

    @given(st.integers(0, 2**31))
    def test_bounded_by_two(self, seed):
        g = np.random.default_rng(seed)
        ens = RewardEnsemble.create(3, N_ACTIONS, 0.9, g)
        for arr in ens.members[0].trunk.arrays():
            arr *= 50.0
        x = g.uniform(-10, 10, size=(50, 3))
        assert np.all(np.abs(ens.state_action_rewards(x, g.integers(2, size=50))) <= 2.0)

    def test_permutation_invariant(self, rng):
        ens = RewardEnsemble.create(2, N_ACTIONS, 0.9, rng)
        rev = RewardEnsemble(ens.members[::-1], N_ACTIONS, 0.9)
        x = rng.normal(size=(10, 2 + N_ACTIONS))
        np.testing.assert_allclose(ens.rewards(x), rev.rewards(x), rtol=0, atol=1e-15)

    def test_unit_norm_after_update(self, rng):
        ens = RewardEnsemble.create(2, N_ACTIONS, 0.9, rng, hidden=(8,), lr=0.05)
        for _ in range(20):
            update_ensemble(ens, [random_pairs(rng, 4) for _ in ens.members])
            for m in ens.members:
                assert abs(np.linalg.norm(m.w) - 1.0) < 1e-9

    def test_lr_zero_keeps_outputs(self, rng):
        ens = RewardEnsemble.create(2, N_ACTIONS, 0.9, rng, lr=0.0)
        x = rng.normal(size=(10, 2 + N_ACTIONS))
        before = ens.rewards(x)
        update_ensemble(ens, [random_pairs(rng, 4) for _ in ens.members])
        np.testing.assert_array_equal(ens.rewards(x), before)

    def test_one_batch_per_member(self, rng):
        ens = RewardEnsemble.create(2, N_ACTIONS, 0.9, rng)
        with pytest.raises(ContractViolation):
            ens.update([random_pairs(rng, 2)])

    def test_learns_separable_pairs(self):
        """50 pairs where the return-1 side always has a larger mean first feature."""
        g = np.random.default_rng(11)
        pool = []
        for _ in range(50):
            n = int(g.integers(2, 6))
            good = Trajectory(np.column_stack([g.uniform(0.2, 1, n), g.uniform(-1, 1, n)]),
                              g.integers(2, size=n), np.zeros(n))
            bad = Trajectory(np.column_stack([g.uniform(-1, -0.2, n), g.uniform(-1, 1, n)]),
                             g.integers(2, size=n), np.zeros(n))
            pool.append(LabeledPair(good, bad, True) if g.random() < 0.5 else LabeledPair(bad, good, False))
        ens = RewardEnsemble.create(2, N_ACTIONS, 0.9, g, hidden=(16, 16), lr=1e-2)
        for _ in range(200):
            ens.update([[pool[k] for k in g.integers(50, size=10)] for _ in ens.members])
        correct = 0
        for p in pool:
            ri, rj = ens.learned_returns([p.tau_i, p.tau_j])
            correct += (pair_probability(ri, rj) > 0.5) == p.i_preferred
        assert correct / len(pool) >= 0.95

    def test_learned_returns_discounting(self, rng):
        ens = RewardEnsemble.create(2, N_ACTIONS, 0.5, rng)
        t = random_traj(rng, max_len=5)
        x = np.hstack([t.states, np.eye(N_ACTIONS)[t.actions]])
        per_step = ens.rewards(x)
        assert ens.learned_returns([t])[0] == pytest.approx(np.sum(0.5 ** np.arange(len(t)) * per_step), rel=1e-12)
        flat = RewardEnsemble(ens.members, N_ACTIONS, 0.5, discounted=False)
        assert flat.learned_returns([t])[0] == pytest.approx(per_step.sum(), rel=1e-12)

    def test_snapshot_round_trip(self, rng):
        ens = RewardEnsemble.create(3, N_ACTIONS, 0.9, rng, size=3)
        back = ensemble_from_bytes(ensemble_to_bytes(ens), N_ACTIONS, 0.9)
        x = rng.normal(size=(6, 3 + N_ACTIONS))
        np.testing.assert_array_equal(back.rewards(x), ens.rewards(x))
