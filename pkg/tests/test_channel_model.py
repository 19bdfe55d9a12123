import os
import sys
import math
import unittest
from dataclasses import replace

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), os.pardir, "scripts"))

from channel_model import (ChannelParams, FadingProcess, ber, ber_rayleigh_average, link_ber, link_state,  # noqa: E402
                           normalized_snr, rate, sample_fading, snr, snr_from_normalized)
from jppo_errors import ConfigError  # noqa: E402


class TestChannelParams(unittest.TestCase):

    def test_defaults_give_unit_path_gain_over_noise(self):
        params = ChannelParams()
        self.assertAlmostEqual(params.path_gain / params.noise_power_w, 1.0, places=12)

    def test_rejects_bad_values(self):
        for kwargs in ({"bandwidth_hz": 0.0}, {"noise_power_w": -1.0}, {"pathloss_exp": 1.5},
                       {"bits_per_token": 0}, {"fading": "sometimes"}, {"ber_model": "qpsk"},
                       {"fixed_gain": -0.1}):
            with self.subTest(kwargs=kwargs):
                with self.assertRaises(ConfigError) as ctx:
                    ChannelParams(**kwargs)
                self.assertTrue(ctx.exception.field.startswith("channel."))


class TestLinkFunctions(unittest.TestCase):

    def setUp(self):
        self.params = ChannelParams()

    def test_snr_is_power_times_gain_under_defaults(self):
        self.assertAlmostEqual(snr(2.5, 1.0, self.params), 2.5, places=9)
        self.assertAlmostEqual(snr(4.0, 0.5, self.params), 2.0, places=9)

    def test_snr_rejects_non_positive_power_and_negative_gain(self):
        with self.assertRaises(ValueError):
            snr(0.0, 1.0, self.params)
        with self.assertRaises(ValueError):
            snr(1.0, -0.5, self.params)

    def test_zero_gain_is_allowed(self):
        self.assertEqual(snr(1.0, 0.0, self.params), 0.0)

    def test_rate_at_unit_snr_is_bandwidth(self):
        self.assertAlmostEqual(rate(1.0, self.params), 1e6, places=3)
        self.assertEqual(rate(0.0, self.params), 0.0)

    def test_rate_is_positive_for_tiny_snr(self):
        self.assertGreater(rate(1e-300, self.params), 0.0)

    def test_ber_reference_values(self):
        self.assertEqual(ber(0.0), 0.5)
        self.assertAlmostEqual(ber(1.0), 0.0786496035, places=9)
        self.assertLess(ber(25.0), 1e-11)

    def test_ber_of_infinite_snr_is_zero(self):
        self.assertEqual(ber(math.inf), 0.0)

    def test_ber_rejects_negative_snr(self):
        with self.assertRaises(ValueError):
            ber(-1.0)

    def test_ber_strictly_falls_with_power(self):
        values = [link_ber(0.5 * (k + 1), 0.4, self.params) for k in range(10)]
        for a, b in zip(values, values[1:]):
            self.assertLess(b, a)

    def test_rayleigh_average_ignores_instantaneous_gain(self):
        params = replace(self.params, ber_model="rayleigh_average")
        self.assertEqual(link_ber(2.0, 0.1, params), link_ber(2.0, 3.0, params))
        self.assertAlmostEqual(link_ber(1.0, 0.1, params), 0.5 * (1 - math.sqrt(0.5)), places=12)
        self.assertEqual(ber_rayleigh_average(0.0), 0.5)

    def test_link_state_composes_all_terms(self):
        link = link_state(4.0, 1.0, self.params)
        self.assertAlmostEqual(link.snr, 4.0, places=9)
        self.assertAlmostEqual(link.rate_bps, 1e6 * math.log2(5.0), places=3)
        self.assertAlmostEqual(link.ber, ber(link.snr), places=15)
        self.assertFalse(link.in_outage)
        self.assertTrue(link_state(1.0, 0.0, self.params).in_outage)

    def test_normalized_snr_round_trip(self):
        for value in (0.0, 0.01, 1.0, 2.5, 40.0):
            self.assertAlmostEqual(snr_from_normalized(normalized_snr(value)), value, places=9)
        self.assertEqual(normalized_snr(math.inf), 1.0)
        self.assertEqual(snr_from_normalized(1.0), math.inf)


class TestFadingProcess(unittest.TestCase):

    def _sequence(self, params, seed, episodes=2, steps=5):
        process = FadingProcess(params, np.random.default_rng(seed))
        out = []
        for _ in range(episodes):
            process.start_episode()
            out.append([process.next_gain() for _ in range(steps)])
        return out

    def test_same_seed_same_sequence(self):
        params = ChannelParams()
        self.assertEqual(self._sequence(params, 3), self._sequence(params, 3))
        self.assertNotEqual(self._sequence(params, 3), self._sequence(params, 4))

    def test_per_episode_holds_gain_within_episode(self):
        seq = self._sequence(ChannelParams(fading="per_episode"), 1)
        for episode in seq:
            self.assertEqual(len(set(episode)), 1)
        self.assertNotEqual(seq[0][0], seq[1][0])

    def test_fixed_gain(self):
        seq = self._sequence(ChannelParams(fading="fixed", fixed_gain=0.7), 1)
        self.assertEqual({g for episode in seq for g in episode}, {0.7})

    def test_gain_is_unit_mean_exponential(self):
        rng = np.random.default_rng(0)
        draws = np.array([sample_fading(rng) for _ in range(20000)])
        self.assertTrue(np.all(draws >= 0))
        self.assertAlmostEqual(draws.mean(), 1.0, delta=0.03)
        self.assertAlmostEqual(np.mean(draws > 1.0), math.exp(-1.0), delta=0.02)


if __name__ == "__main__":
    unittest.main()
