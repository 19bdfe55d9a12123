import os
import sys
import json
import tempfile
import unittest
from dataclasses import replace

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), os.pardir, "scripts"))

from property_suite import (MUTATIONS, PROFILES, PROPERTIES, Context, GoldenCase, Impl, check_golden,  # noqa: E402
                            load_golden_cases, run_all, run_mutations, run_property, write_reports)


class TestQuickProfile(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.report = run_all("quick", seed=0)

    def test_every_property_passes(self):
        failed = [f"{p.name}: {p.detail}" for p in self.report.properties if not p.passed]
        self.assertEqual(failed, [])
        self.assertEqual(len(self.report.properties), len(PROPERTIES))

    def test_every_mutation_is_detected(self):
        missed = [m.mutation for m in self.report.mutations if not m.detected]
        self.assertEqual(missed, [])
        self.assertEqual(len(self.report.mutations), len(MUTATIONS) + 1)

    def test_every_golden_case_holds(self):
        failed = [f"{g.identifier}: {g.detail}" for g in self.report.golden if not g.passed]
        self.assertEqual(failed, [])
        self.assertTrue(self.report.passed)

    def test_reports(self):
        with tempfile.TemporaryDirectory() as tmp:
            text_path, json_path = write_reports(self.report, tmp)
            with open(text_path, encoding="utf-8") as f:
                text = f.read()
            with open(json_path, encoding="utf-8") as f:
                data = json.load(f)
        self.assertIn("checks passed: PASS", text)
        self.assertTrue(data["passed"])
        self.assertEqual(data["profile"], "quick")

    def test_unknown_profile(self):
        with self.assertRaises(ValueError):
            run_all("thorough")


class TestSingleChecks(unittest.TestCase):

    def setUp(self):
        self.tol = PROFILES["quick"]

    def test_context_stream_depends_only_on_name_and_seed(self):
        a = Context(Impl(), self.tol, 3, "channel.rate").rng.random(4)
        b = Context(Impl(), self.tol, 3, "channel.rate").rng.random(4)
        c = Context(Impl(), self.tol, 3, "channel.snr_linear").rng.random(4)
        self.assertEqual(list(a), list(b))
        self.assertNotEqual(list(a), list(c))

    def test_rate_mutation_fails_its_property(self):
        mutated = replace(Impl(), rate=lambda s, p: p.bandwidth_hz * s)
        self.assertFalse(run_property("channel.rate", mutated, self.tol, 0).passed)
        self.assertTrue(run_property("channel.rate", Impl(), self.tol, 0).passed)

    def test_selected_mutations(self):
        results = run_mutations(self.tol, 0, mutations=MUTATIONS[:2])
        self.assertEqual([m.detected for m in results], [True, True, True])

    def test_crashing_property_is_a_failure(self):
        broken = replace(Impl(), kappa_of_level=lambda level: 1 / 0)
        result = run_property("service.kappa_levels", broken, self.tol, 0)
        self.assertFalse(result.passed)
        self.assertIn("ZeroDivisionError", result.detail)


class TestGolden(unittest.TestCase):

    def test_registry_loads(self):
        cases = load_golden_cases()
        self.assertGreaterEqual(len(cases), 15)
        self.assertEqual(len({c.identifier for c in cases}), len(cases))

    def test_wrong_expected_value_fails(self):
        case = GoldenCase("unit_snr_off", "BER at unit SNR, perturbed", {"snr": 1.0},
                          {"ber": 0.0786496 + 1e-3}, "trivial", "channel")
        self.assertFalse(check_golden(case).passed)
        case = replace(case, expected={"ber": 0.0786496035})
        self.assertTrue(check_golden(case).passed)

    def _case(self, identifier):
        return next(c for c in load_golden_cases() if c.identifier == identifier)

    def test_frozen_cases_hold(self):
        for identifier in ("env_reset_seed0_state", "env_step_seed0_action_3_7", "service_table_snr_4"):
            result = check_golden(self._case(identifier))
            self.assertTrue(result.passed, f"{identifier}: {result.detail}")

    def test_frozen_table_catches_compute_profile_change(self):
        case = self._case("service_table_snr_4")
        self.assertEqual(len(case.expected["long_energy_total_j"]), 50)
        changed = replace(case, inputs={"snr": 4.0, "compute": {"llm_fixed_overhead_s": 42.0}})
        self.assertFalse(check_golden(changed).passed)

    def test_frozen_step_catches_seed_change(self):
        case = self._case("env_step_seed0_action_3_7")
        self.assertFalse(check_golden(replace(case, inputs=dict(case.inputs, seed=1))).passed)
        reset = self._case("env_reset_seed0_state")
        self.assertFalse(check_golden(replace(reset, inputs={"seed": 1})).passed)

    def test_violated_tags_compare_exactly(self):
        case = self._case("env_step_seed0_action_3_7")
        changed = replace(case, expected=dict(case.expected, violated=["latency"]))
        result = check_golden(changed)
        self.assertFalse(result.passed)
        self.assertIn("violated", result.detail)

    def test_unknown_derivation(self):
        case = GoldenCase("x", "", {}, {"y": 1.0}, "trivial", "no_such_thing")
        result = check_golden(case)
        self.assertFalse(result.passed)
        self.assertIn("no_such_thing", result.detail)

    def test_bad_provenance_rejected(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "golden.json")
            with open(path, "w", encoding="utf-8") as f:
                json.dump({"format": "jppo-golden", "version": 1, "cases": [
                    {"identifier": "x", "description": "", "inputs": {"snr": 1.0}, "expected": {"ber": 0.1},
                     "provenance": "folklore", "derivation": "channel"}]}, f)
            with self.assertRaises(ValueError):
                load_golden_cases(path)


if __name__ == "__main__":
    unittest.main()
