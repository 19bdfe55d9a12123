import os
import sys
import tempfile
import unittest
from dataclasses import replace

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), os.pardir, "scripts"))

from config_loader import RunConfig, dump_config, load_config, load_config_dict, load_config_text  # noqa: E402
from jppo_errors import ConfigError  # noqa: E402
from llm_bridge import BridgeConfig  # noqa: E402

CONFIGS = os.path.join(os.path.dirname(os.path.abspath(__file__)), os.pardir, "configs")


class TestShippedConfigs(unittest.TestCase):

    def test_default_file_equals_built_in_defaults(self):
        self.assertEqual(load_config(os.path.join(CONFIGS, "default.yaml")), RunConfig())

    def test_quick_config(self):
        config = load_config(os.path.join(CONFIGS, "quick.yaml"))
        self.assertEqual(config.episodes, 300)
        self.assertEqual(config.env.horizon, 20)
        self.assertEqual(config.agent.hidden_sizes, (32, 32))
        self.assertEqual(config.oracle.mc_samples, 2000)
        self.assertEqual(config.env.constraints, RunConfig().env.constraints)

    def test_fixed_channel_config(self):
        config = load_config(os.path.join(CONFIGS, "fixed_channel.yaml"))
        self.assertEqual(config.env.channel.fading, "fixed")
        self.assertEqual(config.oracle.bins, 1)

    def test_empty_document_gives_defaults(self):
        self.assertEqual(load_config_text(""), RunConfig())


class TestStrictness(unittest.TestCase):

    def test_unknown_key_names_field_and_line(self):
        text = "seed: 1\nchannel:\n  bandwith_hz: 1.0e6\n"
        with self.assertRaises(ConfigError) as ctx:
            load_config_text(text, source="run.yaml")
        self.assertEqual(ctx.exception.field, "channel.bandwith_hz")
        self.assertEqual(ctx.exception.line, 3)
        self.assertIn("run.yaml", str(ctx.exception))
        self.assertIn("line 3", str(ctx.exception))

    def test_wrong_type(self):
        with self.assertRaises(ConfigError) as ctx:
            load_config_text("agent:\n  batch_size: 3.5\n")
        self.assertEqual(ctx.exception.field, "agent.batch_size")
        self.assertEqual(ctx.exception.line, 2)

    def test_booleans_are_not_numbers(self):
        with self.assertRaises(ConfigError):
            load_config_text("horizon: true\n")

    def test_exponent_without_decimal_point_is_a_float(self):
        config = load_config_text("channel:\n  noise_power_w: 1e-6\n  bandwidth_hz: 2e6\n")
        self.assertEqual(config.env.channel.noise_power_w, 1e-6)
        self.assertEqual(config.env.channel.bandwidth_hz, 2e6)
        self.assertIsInstance(config.env.channel.noise_power_w, float)

    def test_non_numeric_string_is_rejected(self):
        with self.assertRaises(ConfigError) as ctx:
            load_config_text("channel:\n  noise_power_w: tiny\n")
        self.assertEqual(ctx.exception.field, "channel.noise_power_w")
        self.assertEqual(ctx.exception.line, 2)
        with self.assertRaises(ConfigError):
            load_config_text("channel:\n  noise_power_w: .inf\n")

    def test_value_errors_carry_line(self):
        text = "seed: 0\nconstraints:\n  fidelity_min: 1.5\n"
        with self.assertRaises(ConfigError) as ctx:
            load_config_text(text)
        self.assertEqual(ctx.exception.field, "constraints.fidelity_min")
        self.assertEqual(ctx.exception.line, 3)

    def test_prompt_list_entries(self):
        text = ("service:\n  prompts:\n    - name: only\n      len_instruction: 4\n"
                "      len_demos: 10\n      len_question: 2\n      wieght: 1.0\n")
        with self.assertRaises(ConfigError) as ctx:
            load_config_text(text)
        self.assertEqual(ctx.exception.field, "service.prompts[0].wieght")
        self.assertEqual(ctx.exception.line, 7)

    def test_incomplete_prompt(self):
        with self.assertRaises(ConfigError):
            load_config_text("service:\n  prompts:\n    - name: only\n      len_demos: 10\n")

    def test_invalid_yaml(self):
        with self.assertRaises(ConfigError) as ctx:
            load_config_text("seed: [0\n")
        self.assertIsNotNone(ctx.exception.line)

    def test_missing_file(self):
        with self.assertRaises(ConfigError):
            load_config("/nonexistent/run.yaml")


class TestRoundTrip(unittest.TestCase):

    def test_to_dict_round_trip(self):
        config = load_config(os.path.join(CONFIGS, "quick.yaml")).with_overrides(seed=7, episodes=12)
        self.assertEqual(load_config_dict(config.to_dict()), config)

    def test_dump_and_reload(self):
        config = RunConfig().with_overrides(seed=3)
        with tempfile.TemporaryDirectory() as tmp:
            reloaded = load_config(dump_config(config, os.path.join(tmp, "config.yaml")))
        self.assertEqual(reloaded, config)

    def test_bridge_token_is_not_persisted(self):
        bridge = BridgeConfig("http://localhost:8100/compress", "http://localhost:8100/score", auth_token="secret")
        data = replace(RunConfig(), bridge=bridge).to_dict()
        self.assertIsNone(data["bridge"]["auth_token"])
        self.assertEqual(load_config_dict(data).bridge, replace(bridge, auth_token=None))

    def test_overrides(self):
        config = RunConfig().with_overrides(seed=9, episodes=5)
        self.assertEqual(config.env.seed, 9)
        self.assertEqual(config.episodes, 5)
        with self.assertRaises(ConfigError):
            RunConfig(episodes=0)


if __name__ == "__main__":
    unittest.main()
