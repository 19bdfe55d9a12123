import os
import sys
import math
import unittest
from unittest import mock

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), os.pardir, "scripts"))

from fidelity_model import FidelityModelConfig, token_retention  # noqa: E402
from jppo_errors import BridgeError, BridgeResponseError, BridgeTimeoutError, ConfigError  # noqa: E402
from llm_bridge import TOKEN_ENV_VAR, BridgeConfig, BridgeFidelityScorer, LLMBridge, RecordedSession  # noqa: E402

FIXTURES = os.path.join(os.path.dirname(os.path.abspath(__file__)), "fixtures")
PROMPT = "Answer using the table below. " * 10 + "Q: which site has the lowest load?"


def make_config(**overrides):
    values = dict(compress_endpoint_url="http://localhost:8100/compress",
                  score_endpoint_url="http://localhost:8100/score")
    values.update(overrides)
    return BridgeConfig(**values)


def make_bridge(session, **overrides):
    sleeps = []
    bridge = LLMBridge(make_config(**overrides), session=session, sleep=sleeps.append)
    return bridge, sleeps


class TestBridgeConfig(unittest.TestCase):

    def test_rejects_malformed_urls(self):
        for bad in ("", "not a url", "localhost:8100/compress"):
            with self.subTest(url=bad):
                with self.assertRaises(ConfigError) as ctx:
                    make_config(compress_endpoint_url=bad)
                self.assertEqual(ctx.exception.field, "bridge.compress_endpoint_url")

    def test_rejects_bad_timeouts_and_retries(self):
        with self.assertRaises(ConfigError):
            make_config(timeout_s=0)
        with self.assertRaises(ConfigError):
            make_config(max_retries=-1)
        with self.assertRaises(ConfigError):
            make_config(max_retries=11)

    def test_token_from_environment(self):
        with mock.patch.dict(os.environ, {TOKEN_ENV_VAR: "abc"}):
            bridge, _ = make_bridge(RecordedSession({}))
        self.assertEqual(bridge.headers["Authorization"], "Bearer abc")

    def test_explicit_token_wins(self):
        with mock.patch.dict(os.environ, {TOKEN_ENV_VAR: "abc"}):
            self.assertEqual(make_config(auth_token="xyz").resolved_token(), "xyz")

    def test_no_token_no_header(self):
        with mock.patch.dict(os.environ, {}, clear=True):
            bridge, _ = make_bridge(RecordedSession({}))
        self.assertNotIn("Authorization", bridge.headers)


class TestCompress(unittest.TestCase):

    def test_recorded_compression(self):
        session = RecordedSession.from_file(os.path.join(FIXTURES, "bridge_session.json"))
        bridge, _ = make_bridge(session)
        result = bridge.compress(PROMPT, 0.25)
        self.assertEqual(result.original_tokens, 100)
        self.assertEqual(result.compressed_tokens, 25)
        self.assertEqual(result.achieved_kappa, 0.25)
        self.assertTrue(result.within_band)
        self.assertEqual(session.calls[0]["json"], {"text": PROMPT, "target_ratio": 0.25})
        self.assertEqual(session.calls[0]["timeout"], 30.0)

    def test_no_compression_skips_the_network(self):
        session = RecordedSession({})
        bridge, _ = make_bridge(session)
        result = bridge.compress("three word prompt", 1.0)
        self.assertEqual(result.compressed_text, "three word prompt")
        self.assertEqual(result.achieved_kappa, 1.0)
        self.assertEqual(session.calls, [])

    def test_out_of_band_ratio_is_flagged_not_rejected(self):
        session = RecordedSession({"/compress": [{"text": "x", "original_tokens": 100, "compressed_tokens": 40}]})
        bridge, _ = make_bridge(session)
        with self.assertLogs("llm_bridge", level="WARNING"):
            result = bridge.compress(PROMPT, 0.25)
        self.assertFalse(result.within_band)
        self.assertEqual(result.achieved_kappa, 0.4)

    def test_argument_checks(self):
        bridge, _ = make_bridge(RecordedSession({}))
        with self.assertRaises(ValueError):
            bridge.compress("   ", 0.5)
        with self.assertRaises(ValueError):
            bridge.compress(PROMPT, 0.0)
        with self.assertRaises(ValueError):
            bridge.compress(PROMPT, 1.5)

    def test_retries_after_timeout_and_server_error(self):
        session = RecordedSession.from_file(os.path.join(FIXTURES, "bridge_flaky.json"))
        bridge, sleeps = make_bridge(session)
        result = bridge.compress(PROMPT, 0.25)
        self.assertEqual(result.compressed_tokens, 20)
        self.assertEqual(len(session.calls), 3)
        self.assertEqual(sleeps, [0.5, 1.0])

    def test_gives_up_after_max_retries(self):
        session = RecordedSession({"/compress": [{"error": "timeout"}] * 5})
        bridge, sleeps = make_bridge(session, max_retries=1)
        with self.assertRaises(BridgeTimeoutError):
            bridge.compress(PROMPT, 0.5)
        self.assertEqual(len(session.calls), 2)
        self.assertEqual(len(sleeps), 1)

    def test_connection_failure(self):
        session = RecordedSession({"/compress": [{"error": "connection"}]})
        bridge, _ = make_bridge(session, max_retries=0)
        with self.assertRaises(BridgeError):
            bridge.compress(PROMPT, 0.5)

    def test_client_error_is_not_retried(self):
        session = RecordedSession({"/compress": [{"status": 422, "body": {"detail": "bad"}}, {"text": "x"}]})
        bridge, _ = make_bridge(session)
        with self.assertRaises(BridgeResponseError):
            bridge.compress(PROMPT, 0.5)
        self.assertEqual(len(session.calls), 1)

    def test_malformed_and_inconsistent_bodies(self):
        for body in ({"text": "x"}, "not json", {"text": "x", "original_tokens": 10, "compressed_tokens": 20},
                     {"text": 3, "original_tokens": 10, "compressed_tokens": 5}):
            with self.subTest(body=body):
                bridge, _ = make_bridge(RecordedSession({"/compress": [body]}))
                with self.assertRaises(BridgeResponseError):
                    bridge.compress(PROMPT, 0.5)


class TestScore(unittest.TestCase):

    def test_score_passes_through(self):
        session = RecordedSession({"/score": [{"score": 0.7}]})
        bridge, _ = make_bridge(session)
        self.assertEqual(bridge.score_similarity("a", "b"), 0.7)
        self.assertEqual(session.calls[0]["json"], {"a": "a", "b": "b"})

    def test_out_of_range_score_is_clamped(self):
        bridge, _ = make_bridge(RecordedSession({"/score": [{"score": 1.3}, {"score": -0.2}]}))
        with self.assertLogs("llm_bridge", level="WARNING"):
            self.assertEqual(bridge.score_similarity("a", "b"), 1.0)
            self.assertEqual(bridge.score_similarity("a", "b"), 0.0)

    def test_nan_and_missing_scores_are_rejected(self):
        for body in ({"score": math.nan}, {"value": 0.5}, {"score": "high"}):
            with self.subTest(body=body):
                bridge, _ = make_bridge(RecordedSession({"/score": [body]}))
                with self.assertRaises(BridgeResponseError):
                    bridge.score_similarity("a", "b")

    def test_empty_text(self):
        bridge, _ = make_bridge(RecordedSession({}))
        with self.assertRaises(ValueError):
            bridge.score_similarity("", "b")


class TestBridgeFidelityScorer(unittest.TestCase):

    def setUp(self):
        self.session = RecordedSession.from_file(os.path.join(FIXTURES, "bridge_session.json"))
        self.bridge, _ = make_bridge(self.session)
        self.prompts = []
        self.scorer = BridgeFidelityScorer(self.bridge, PROMPT, "Site B.", self._respond)

    def _respond(self, prompt_text):
        self.prompts.append(prompt_text)
        return "Site B has the lowest load."

    def test_scores_combine_with_completeness_term(self):
        report = self.scorer.score(0.25, 0.1)
        self.assertEqual(report.f1, 0.9)
        self.assertEqual(report.f3, 0.8)
        self.assertAlmostEqual(report.f2, token_retention(0.25, FidelityModelConfig()) * 0.9, places=12)
        self.assertAlmostEqual(report.f, 0.4 * 0.9 + 0.3 * report.f2 + 0.3 * 0.8, places=12)

    def test_service_called_once_per_ratio(self):
        first = self.scorer.score(0.25, 0.0)
        second = self.scorer.score(0.25, 0.2)
        self.assertEqual(len(self.session.calls), 3)
        self.assertEqual(len(self.prompts), 1)
        self.assertEqual(first.f1, second.f1)
        self.assertLess(second.f2, first.f2)

    def test_uncompressed_prompt_only_scores_the_response(self):
        session = RecordedSession({"/score": [{"score": 0.95}]})
        bridge, _ = make_bridge(session)
        report = BridgeFidelityScorer(bridge, PROMPT, "Site B.", self._respond).score(1.0, 0.0)
        self.assertEqual(report.f1, 1.0)
        self.assertEqual(report.f3, 0.95)
        self.assertEqual(len(session.calls), 1)
        self.assertEqual(self.prompts, [PROMPT])

    def test_reference_response_required(self):
        with self.assertRaises(ValueError):
            BridgeFidelityScorer(self.bridge, PROMPT, "", self._respond)


if __name__ == "__main__":
    unittest.main()
