import os
import sys
import json
import tempfile
import unittest
from dataclasses import replace

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), os.pardir, "scripts"))

from ddqn_agent import (AgentConfig, GreedyPolicy, QNetwork, ReplayBuffer, TabularTransition,  # noqa: E402
                        Transition, TransitionBatch, double_dqn_target, double_dqn_targets, epsilon_after,
                        load_checkpoint, loss_and_grads, q_forward, save_checkpoint, select_action, sgd_step,
                        single_net_targets, tabular_q_update, td_loss, train)
from jppo_env import EnvConfig, JPPOEnv  # noqa: E402
from jppo_errors import ConfigError, JPPOError, ShapeMismatchError  # noqa: E402


def handset_net():
    """[3, 1, 50] network whose values on the all-ones state are 0.25 k + 1."""
    return QNetwork([[[1.0], [2.0], [-1.0]], 0.1 * np.arange(50)[None, :]], [[0.5], np.ones(50)])


class TwoArmBandit:
    """One-step episodes with a constant state; arm 0 pays 1.0 and arm 1 pays 0.2."""

    num_users = 1
    state_dim = 3
    num_actions = 2

    def reset(self, seed=None):
        return np.ones((1, 3))

    def step(self, actions):
        reward = 1.0 if actions[0] == 0 else 0.2
        outcome = type("Outcome", (), {})()
        outcome.reward = reward
        outcome.next_state = np.ones(3)
        outcome.terminal = True
        return [outcome]


class TestAgentConfig(unittest.TestCase):

    def test_defaults(self):
        cfg = AgentConfig()
        self.assertEqual(cfg.discount, 0.5)
        self.assertEqual(cfg.hidden_sizes, (64, 64))
        self.assertEqual(cfg.effective_learn_start, 64)
        self.assertEqual(AgentConfig(learn_start=500).effective_learn_start, 500)

    def test_validation(self):
        for kwargs in ({"discount": 1.0}, {"learning_rate": 0.0}, {"epsilon_min": 0.5, "epsilon_start": 0.1},
                       {"batch_size": 0}, {"hidden_sizes": (64, 0)}, {"epsilon_decay": 1.5}):
            with self.subTest(kwargs=kwargs):
                with self.assertRaises(ConfigError):
                    AgentConfig(**kwargs)

    def test_epsilon_schedule(self):
        cfg = AgentConfig()
        self.assertEqual(epsilon_after(0, cfg), 1.0)
        self.assertAlmostEqual(epsilon_after(100, cfg), 0.995 ** 100, places=12)
        self.assertEqual(epsilon_after(10000, cfg), 0.05)


class TestQNetwork(unittest.TestCase):

    def test_handset_forward(self):
        q = q_forward(handset_net(), np.ones(3))
        np.testing.assert_allclose(q, 0.25 * np.arange(50) + 1.0, rtol=0, atol=1e-12)

    def test_greedy_picks_highest_and_breaks_ties_low(self):
        rng = np.random.default_rng(0)
        self.assertEqual(select_action(handset_net(), np.ones(3), 0.0, rng), 49)
        self.assertEqual(select_action(QNetwork.zeros([3, 4, 50]), np.ones(3), 0.0, rng), 0)

    def test_uniform_exploration(self):
        rng = np.random.default_rng(1)
        counts = np.bincount([select_action(handset_net(), np.ones(3), 1.0, rng) for _ in range(100000)],
                             minlength=50)
        self.assertLess(np.max(np.abs(counts / 100000 - 0.02)), 0.002)

    def test_shape_errors(self):
        net = QNetwork.initialize([3, 8, 50], np.random.default_rng(0))
        with self.assertRaises(ShapeMismatchError):
            q_forward(net, np.ones(4))
        with self.assertRaises(ShapeMismatchError):
            QNetwork([np.ones((3, 4)), np.ones((5, 2))], [np.zeros(4), np.zeros(2)])
        with self.assertRaises(ShapeMismatchError):
            sgd_step(net, [(np.zeros((3, 8)), np.zeros(8))], 0.1)

    def test_non_finite_parameters_rejected(self):
        with self.assertRaises(JPPOError):
            QNetwork([np.full((3, 2), np.nan)], [np.zeros(2)])

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(3)
        net = QNetwork.initialize([3, 6, 5, 7], rng)
        states = rng.normal(size=(10, 3))
        actions = rng.integers(7, size=10)
        targets = rng.normal(size=10)
        _, grads = loss_and_grads(net, states, actions, targets)
        h = 1e-7
        for layer in range(3):
            for kind, analytic in (("weights", grads[layer][0]), ("biases", grads[layer][1])):
                params = getattr(net, kind)[layer]
                for idx in np.ndindex(params.shape):
                    saved = params[idx]
                    params[idx] = saved + h
                    up = loss_and_grads(net, states, actions, targets)[0]
                    params[idx] = saved - h
                    down = loss_and_grads(net, states, actions, targets)[0]
                    params[idx] = saved
                    numeric = (up - down) / (2 * h)
                    err = abs(analytic[idx] - numeric) / max(abs(analytic[idx]), abs(numeric), 1e-3)
                    self.assertLessEqual(err, 1e-4, msg=f"layer {layer} {kind}{idx}")

    def test_sgd_step_is_pure(self):
        net = QNetwork.initialize([3, 4, 50], np.random.default_rng(0))
        before = net.copy()
        grads = [(np.ones_like(w), np.ones_like(b)) for w, b in zip(net.weights, net.biases)]
        updated = sgd_step(net, grads, 0.1)
        self.assertTrue(net.same_parameters(before))
        np.testing.assert_allclose(updated.weights[0], net.weights[0] - 0.1)


class TestTargets(unittest.TestCase):

    def _batch(self, rng, size, terminal_prob=0.2):
        return TransitionBatch(rng.normal(size=(size, 3)), rng.integers(50, size=size), rng.normal(size=size),
                               rng.normal(size=(size, 3)), rng.random(size) < terminal_prob)

    def test_double_target_reduces_to_single_net_target(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            net = QNetwork.initialize([3, 8, 50], rng)
            batch = self._batch(rng, 50)
            np.testing.assert_array_equal(double_dqn_targets(batch, net, net, 0.5),
                                          single_net_targets(batch, net, 0.5))

    def test_double_target_does_not_exceed_max_target(self):
        rng = np.random.default_rng(1)
        current = QNetwork.initialize([3, 16, 50], rng)
        target = QNetwork.initialize([3, 16, 50], rng)
        batch = self._batch(rng, 2000, terminal_prob=0.0)
        double = double_dqn_targets(batch, current, target, 0.9)
        single = single_net_targets(batch, target, 0.9)
        self.assertTrue(np.all(double <= single))
        self.assertLess(double.mean(), single.mean())

    def test_single_transition_target(self):
        current = handset_net()
        target = QNetwork([[[0.0], [0.0], [0.0]], np.zeros((1, 50))], [[0.0], np.arange(50.0)[::-1]])
        t = Transition(np.ones(3), 3, 1.0, np.ones(3), False)
        # current argmax is 49; target values there are 0
        self.assertEqual(double_dqn_target(t, current, target, 0.5), 1.0)
        self.assertEqual(double_dqn_target(replace(t, terminal=True), current, current, 0.5), 1.0)

    def test_td_loss_is_batch_mean(self):
        net = QNetwork.zeros([3, 2, 50])
        transitions = [Transition(np.zeros(3), a, r, np.zeros(3), True) for a, r in ((0, 1.0), (1, 3.0))]
        loss, _ = td_loss(transitions, net, net, 0.5)
        self.assertEqual(loss, 5.0)
        with self.assertRaises(ValueError):
            td_loss([], net, net, 0.5)

    def test_transition_validation(self):
        with self.assertRaises(ValueError):
            Transition(np.zeros(3), 50, 0.0, np.zeros(3), False)
        with self.assertRaises(ValueError):
            Transition(np.array([np.nan, 0, 0]), 1, 0.0, np.zeros(3), False)


class TestTabularUpdate(unittest.TestCase):

    def test_two_state_chain_converges(self):
        chain = {("A", 0): (0.0, "A"), ("A", 1): (1.0, "B"), ("B", 0): (2.0, "A"), ("B", 1): (0.0, "B")}
        q = {"A": [0.0, 0.0], "B": [0.0, 0.0]}
        for _ in range(200):
            for (s, a), (r, s2) in chain.items():
                q = tabular_q_update(q, TabularTransition(s, a, r, s2, False), 1.0, 0.5)
        np.testing.assert_allclose(q["A"], [4 / 3, 8 / 3], atol=1e-12)
        np.testing.assert_allclose(q["B"], [10 / 3, 5 / 3], atol=1e-12)

    def test_update_does_not_mutate_input(self):
        q = {"A": [0.0, 0.0]}
        updated = tabular_q_update(q, TabularTransition("A", 1, 2.0, "A", True), 0.5, 0.9)
        self.assertEqual(q["A"], [0.0, 0.0])
        self.assertEqual(updated["A"], [0.0, 1.0])

    def test_unknown_keys(self):
        with self.assertRaises(KeyError):
            tabular_q_update({"A": [0.0]}, TabularTransition("B", 0, 0.0, "A", False), 0.5, 0.9)
        with self.assertRaises(KeyError):
            tabular_q_update({"A": [0.0]}, TabularTransition("A", 3, 0.0, "A", False), 0.5, 0.9)


class TestReplayBuffer(unittest.TestCase):

    def _t(self, i):
        return Transition(np.full(3, float(i)), i % 50, float(i), np.full(3, float(i + 1)), False)

    def test_ring_overwrites_oldest(self):
        buffer = ReplayBuffer(3, 3)
        for i in range(5):
            buffer.add(self._t(i))
        self.assertEqual(buffer.size, 3)
        self.assertEqual([t.reward for t in buffer.transitions()], [2.0, 3.0, 4.0])

    def test_sample_without_replacement(self):
        buffer = ReplayBuffer(10, 3)
        for i in range(10):
            buffer.add(self._t(i))
        batch = buffer.sample(10, np.random.default_rng(0))
        self.assertEqual(sorted(batch.rewards.tolist()), [float(i) for i in range(10)])
        with self.assertRaises(ValueError):
            buffer.sample(11, np.random.default_rng(0))


class TestTraining(unittest.TestCase):

    def test_bandit_learns_better_arm(self):
        cfg = AgentConfig(discount=0.0, hidden_sizes=(16,), learning_rate=1e-2, batch_size=16,
                          buffer_capacity=500, epsilon_decay=0.99)
        wins = 0
        for seed in range(10):
            result = train(TwoArmBandit(), cfg, 500, seed=seed)
            if GreedyPolicy(result.net)(np.ones(3)) == 0:
                wins += 1
        self.assertEqual(wins, 10)

    def _short_run(self, seed, callback=None, sync=2):
        env = JPPOEnv(EnvConfig(horizon=8))
        cfg = AgentConfig(batch_size=8, buffer_capacity=100, hidden_sizes=(8,), target_sync_every=sync)
        return train(env, cfg, 5, seed=seed, on_episode_end=callback)

    def test_training_is_deterministic(self):
        a, b = self._short_run(7), self._short_run(7)
        self.assertEqual(a.metrics, b.metrics)
        self.assertTrue(a.net.same_parameters(b.net))
        self.assertNotEqual(a.metrics, self._short_run(8).metrics)

    def test_target_network_only_changes_at_sync(self):
        seen = []
        self._short_run(1, lambda ep, net, target, eps, buf: seen.append((ep, net.copy(), target.copy())))
        held = seen[0][2]
        for episode, net, target in seen:
            if (episode + 1) % 2 == 0:
                self.assertTrue(target.same_parameters(net))
                held = target
            else:
                self.assertTrue(target.same_parameters(held))

    def test_episode_metrics(self):
        result = self._short_run(0)
        self.assertEqual(len(result.metrics), 5)
        first = result.metrics[0]
        self.assertEqual(first["episode"], 0)
        self.assertEqual(first["epsilon"], 1.0)
        self.assertEqual(first["buffer_size"], 8)
        self.assertIn("mean_fidelity", first)
        self.assertIn("violations_energy", first)
        self.assertGreater(result.updates, 0)


class TestCheckpoint(unittest.TestCase):

    def test_round_trip_is_exact(self):
        rng = np.random.default_rng(0)
        net = QNetwork.initialize([3, 8, 50], rng)
        target = QNetwork.initialize([3, 8, 50], rng)
        with tempfile.TemporaryDirectory() as tmp:
            path = save_checkpoint(os.path.join(tmp, "checkpoint.json"), net, target, {"seed": 3})
            loaded, loaded_target, metadata = load_checkpoint(path)
        self.assertTrue(loaded.same_parameters(net))
        self.assertTrue(loaded_target.same_parameters(target))
        self.assertEqual(metadata, {"seed": 3})

    def test_rejects_foreign_files(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "other.json")
            with open(path, "w") as f:
                json.dump({"format": "something-else", "version": 1}, f)
            with self.assertRaises(JPPOError):
                load_checkpoint(path)


if __name__ == "__main__":
    unittest.main()
