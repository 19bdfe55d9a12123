import os
import sys
import unittest

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), os.pardir, "scripts"))

from fidelity_model import (FidelityModelConfig, FidelityWeights, SyntheticScorer, combine,  # noqa: E402
                            f1_representation, f2_completeness, f3_understanding, token_retention)
from jppo_errors import ConfigError  # noqa: E402

KAPPAS = [0.2, 0.25, 1 / 3, 0.5, 1.0]


class TestWeights(unittest.TestCase):

    def test_weights_must_sum_to_one(self):
        FidelityWeights(0.5, 0.25, 0.25)
        with self.assertRaises(ConfigError) as ctx:
            FidelityWeights(0.5, 0.3, 0.3)
        self.assertEqual(ctx.exception.field, "fidelity.weights")

    def test_weights_must_lie_in_unit_interval(self):
        with self.assertRaises(ConfigError):
            FidelityWeights(1.2, -0.1, -0.1)

    def test_model_config_validation(self):
        with self.assertRaises(ConfigError):
            FidelityModelConfig(token_basis="some")
        with self.assertRaises(ConfigError):
            FidelityModelConfig(beta1=0.0)
        with self.assertRaises(ConfigError):
            FidelityModelConfig(retention_exp=0.5)


class TestComponents(unittest.TestCase):

    def setUp(self):
        self.cfg = FidelityModelConfig()

    def test_quarter_ratio_on_clean_link(self):
        f1 = f1_representation(0.25, self.cfg)
        self.assertAlmostEqual(f1, 2 ** -0.2, places=12)
        self.assertAlmostEqual(f2_completeness(0.25, 0.0, self.cfg), 1 - 0.75 ** 6, places=12)
        self.assertAlmostEqual(f3_understanding(f1, 0.0, self.cfg), 2 ** -0.1, places=12)

    def test_all_token_basis_uses_kappa(self):
        cfg = FidelityModelConfig(token_basis="all")
        self.assertEqual(token_retention(0.25, cfg), 0.25)
        self.assertAlmostEqual(f2_completeness(0.5, 0.1, cfg), 0.45, places=12)

    def test_ber_reduces_completeness_and_understanding(self):
        self.assertAlmostEqual(f2_completeness(1.0, 0.5, self.cfg), 0.5, places=12)
        self.assertAlmostEqual(f3_understanding(1.0, 0.5, self.cfg), 0.5 ** 0.5, places=12)

    def test_domain_checks(self):
        with self.assertRaises(ValueError):
            f1_representation(0.0, self.cfg)
        with self.assertRaises(ValueError):
            f2_completeness(0.5, 0.6, self.cfg)
        with self.assertRaises(ValueError):
            f3_understanding(1.5, 0.1, self.cfg)
        with self.assertRaises(ValueError):
            combine(0.5, 1.2, 0.5, FidelityWeights())


class TestCombine(unittest.TestCase):

    def test_combine_is_weighted_sum(self):
        w = FidelityWeights()
        report = combine(0.9, 0.6, 0.3, w)
        self.assertAlmostEqual(report.f, 0.4 * 0.9 + 0.3 * 0.6 + 0.3 * 0.3, places=12)
        self.assertEqual((report.f1, report.f2, report.f3), (0.9, 0.6, 0.3))
        self.assertIs(report.weights, w)

    def test_combine_is_linear_and_bounded(self):
        rng = np.random.default_rng(0)
        w = FidelityWeights(0.2, 0.5, 0.3)
        for _ in range(200):
            a, b = rng.random(3), rng.random(3)
            t = rng.random()
            mixed = combine(*(t * a + (1 - t) * b), w).f
            self.assertAlmostEqual(mixed, t * combine(*a, w).f + (1 - t) * combine(*b, w).f, places=12)
            self.assertGreaterEqual(mixed, 0.0)
            self.assertLessEqual(mixed, 1.0)


class TestSyntheticScorer(unittest.TestCase):

    def setUp(self):
        self.scorer = SyntheticScorer()

    def test_perfect_request_scores_exactly_one(self):
        self.assertEqual(self.scorer.score(1.0, 0.0).f, 1.0)

    def test_reference_value(self):
        self.assertAlmostEqual(self.scorer.score(0.25, 0.0).f, 0.87473656811, places=9)

    def test_monotone_in_ber(self):
        for kappa in KAPPAS:
            values = [self.scorer.score(kappa, b).f for b in np.linspace(0, 0.5, 26)]
            for a, b in zip(values, values[1:]):
                self.assertLessEqual(b, a)

    def test_monotone_in_kappa(self):
        for ber in (0.0, 0.05, 0.2, 0.5):
            values = [self.scorer.score(k, ber).f for k in KAPPAS]
            for a, b in zip(values, values[1:]):
                self.assertGreaterEqual(b, a)

    def test_default_config_keeps_quarter_ratio_above_fidelity_floor(self):
        self.assertGreater(self.scorer.score(0.25, 0.02).f, 0.75)
        self.assertLess(self.scorer.score(0.2, 0.3).f, 0.75)


if __name__ == "__main__":
    unittest.main()
