"""
Strict YAML configuration for simulator runs.

Unknown keys and wrongly typed values are errors that name the dotted field
path and the line in the file. Missing keys take the documented defaults.
"""

import math
import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import yaml

from channel_model import ChannelParams
from ddqn_agent import AgentConfig
from fidelity_model import FidelityModelConfig, FidelityWeights
from jppo_env import DEFAULT_PROMPTS, EnvConfig, RewardConfig
from jppo_errors import ConfigError
from llm_bridge import BridgeConfig
from policy_oracle import OracleSettings
from service_costs import ComputeProfile, Constraints, PromptProfile

logger = logging.getLogger(__name__)

INT = "int"
FLOAT = "float"
STR = "str"
OPT_INT = "optional int"
OPT_STR = "optional str"

PROMPT_SCHEMA = {"name": STR, "len_instruction": INT, "len_demos": INT, "len_question": INT, "weight": FLOAT}

SCHEMA = {
    "seed": INT,
    "num_users": INT,
    "horizon": INT,
    "episodes": INT,
    "channel": {
        "bandwidth_hz": FLOAT, "distance_m": FLOAT, "pathloss_exp": FLOAT, "noise_power_w": FLOAT,
        "bits_per_token": INT, "fading": STR, "fixed_gain": FLOAT, "ber_model": STR,
    },
    "service": {
        "reference_power_level": INT,
        "prompts": [PROMPT_SCHEMA],
        "compute": {
            "slm_time_per_token_s": FLOAT, "llm_time_per_token_s": FLOAT, "llm_fixed_overhead_s": FLOAT,
            "output_tokens": INT, "slm_gpu_count": INT, "slm_gpu_power_w": FLOAT,
            "llm_gpu_count": INT, "llm_gpu_power_w": FLOAT,
        },
    },
    "fidelity": {
        "weights": {"w1": FLOAT, "w2": FLOAT, "w3": FLOAT},
        "beta1": FLOAT, "retention_exp": FLOAT, "beta3": FLOAT, "gamma3": FLOAT, "token_basis": STR,
    },
    "constraints": {"energy_max_j": FLOAT, "power_max_w": FLOAT, "latency_max_s": FLOAT, "fidelity_min": FLOAT},
    "reward": {"w_fidelity": FLOAT, "w_ber": FLOAT, "w_power": FLOAT, "violation_penalty": FLOAT},
    "agent": {
        "learning_rate": FLOAT, "discount": FLOAT, "epsilon_start": FLOAT, "epsilon_decay": FLOAT,
        "epsilon_min": FLOAT, "batch_size": INT, "buffer_capacity": INT, "target_sync_every": INT,
        "hidden_sizes": [INT], "learn_start": OPT_INT,
    },
    "oracle": {"bins": INT, "snr_min": FLOAT, "snr_max": FLOAT, "mc_samples": INT, "workers": INT},
    "bridge": {
        "compress_endpoint_url": STR, "score_endpoint_url": STR, "timeout_s": FLOAT,
        "max_retries": INT, "auth_token": OPT_STR,
    },
}


@dataclass(frozen=True)
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    oracle: OracleSettings = field(default_factory=OracleSettings)
    episodes: int = 10000
    bridge: Optional[BridgeConfig] = None

    def __post_init__(self):
        if isinstance(self.episodes, bool) or int(self.episodes) != self.episodes or self.episodes < 1:
            raise ConfigError(f"episodes must be a positive integer, got {self.episodes!r}", field="episodes")

    def with_overrides(self, seed=None, episodes=None):
        env = self.env if seed is None else replace(self.env, seed=int(seed))
        return RunConfig(env=env, agent=self.agent, oracle=self.oracle,
                         episodes=self.episodes if episodes is None else int(episodes), bridge=self.bridge)

    def to_dict(self):
        """YAML-shaped snapshot that load_config_dict turns back into an equal RunConfig."""
        e = self.env
        data = {
            "seed": e.seed,
            "num_users": e.num_users,
            "horizon": e.horizon,
            "episodes": self.episodes,
            "channel": _fields(e.channel, SCHEMA["channel"]),
            "service": {
                "reference_power_level": e.reference_power_level,
                "prompts": [_fields(p, PROMPT_SCHEMA) for p in e.prompt_distribution],
                "compute": _fields(e.compute, SCHEMA["service"]["compute"]),
            },
            "fidelity": dict(weights=_fields(e.weights, SCHEMA["fidelity"]["weights"]),
                             **_fields(e.fidelity_cfg, {k: v for k, v in SCHEMA["fidelity"].items()
                                                        if k != "weights"})),
            "constraints": _fields(e.constraints, SCHEMA["constraints"]),
            "reward": _fields(e.reward_cfg, SCHEMA["reward"]),
            "agent": _fields(self.agent, SCHEMA["agent"]),
            "oracle": _fields(self.oracle, SCHEMA["oracle"]),
        }
        data["agent"]["hidden_sizes"] = list(self.agent.hidden_sizes)
        if self.bridge is not None:
            bridge = _fields(self.bridge, SCHEMA["bridge"])
            # never persist the secret
            bridge["auth_token"] = None
            data["bridge"] = bridge
        return data


def _fields(obj, schema):
    return {name: getattr(obj, name) for name in schema}


def _line_map(text):
    """Map dotted key paths to 1-based line numbers using the composed YAML tree."""
    lines = {}

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for key_node, value_node in node.value:
                child = f"{path}.{key_node.value}" if path else str(key_node.value)
                lines[child] = key_node.start_mark.line + 1
                walk(value_node, child)
        elif isinstance(node, yaml.SequenceNode):
            for i, item in enumerate(node.value):
                child = f"{path}[{i}]"
                lines[child] = item.start_mark.line + 1
                walk(item, child)

    root = yaml.compose(text)
    if root is not None:
        walk(root, "")
    return lines


def _lookup_line(lines, path):
    while path:
        if path in lines:
            return lines[path]
        cut = max(path.rfind("."), path.rfind("["))
        if cut <= 0:
            return None
        path = path[:cut]
    return None


def _check_value(value, kind, path, lines):
    def fail(expected):
        raise ConfigError(f"Expected {expected}, got {type(value).__name__} {value!r}",
                          field=path, line=_lookup_line(lines, path))

    if kind == INT:
        if isinstance(value, bool) or not isinstance(value, int):
            fail("an integer")
    elif kind == FLOAT:
        if isinstance(value, str):
            # YAML 1.1 reads exponents without a decimal point (1e-6) as strings
            try:
                value = float(value)
            except ValueError:
                fail("a number")
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            fail("a number")
        if not math.isfinite(value):
            fail("a finite number")
        return float(value)
    elif kind == STR:
        if not isinstance(value, str):
            fail("a string")
    elif kind == OPT_INT:
        if value is not None and (isinstance(value, bool) or not isinstance(value, int)):
            fail("an integer or null")
    elif kind == OPT_STR:
        if value is not None and not isinstance(value, str):
            fail("a string or null")
    return value


def _validate(data, schema, path, lines):
    """Type-check data against schema; returns a cleaned copy."""
    if isinstance(schema, dict):
        if not isinstance(data, dict):
            raise ConfigError(f"Expected a mapping, got {type(data).__name__}", field=path or None,
                              line=_lookup_line(lines, path))
        cleaned = {}
        for key, value in data.items():
            child = f"{path}.{key}" if path else str(key)
            if key not in schema:
                raise ConfigError(f"Unknown key '{key}'", field=child, line=_lookup_line(lines, child))
            cleaned[key] = _validate(value, schema[key], child, lines)
        return cleaned
    if isinstance(schema, list):
        if not isinstance(data, list):
            raise ConfigError(f"Expected a list, got {type(data).__name__}", field=path,
                              line=_lookup_line(lines, path))
        return [_validate(item, schema[0], f"{path}[{i}]", lines) for i, item in enumerate(data)]
    return _check_value(data, schema, path, lines)


def _build(data):
    channel = ChannelParams(**data.get("channel", {}))
    service = data.get("service", {})
    prompts = tuple(PromptProfile(**p) for p in service["prompts"]) if "prompts" in service else DEFAULT_PROMPTS
    compute = ComputeProfile(**service.get("compute", {}))
    fidelity = dict(data.get("fidelity", {}))
    weights = FidelityWeights(**fidelity.pop("weights", {}))
    fidelity_cfg = FidelityModelConfig(**fidelity)
    env_kwargs = {k: data[k] for k in ("seed", "num_users", "horizon") if k in data}
    if "reference_power_level" in service:
        env_kwargs["reference_power_level"] = service["reference_power_level"]
    env = EnvConfig(
        channel=channel,
        prompt_distribution=prompts,
        compute=compute,
        constraints=Constraints(**data.get("constraints", {})),
        weights=weights,
        fidelity_cfg=fidelity_cfg,
        reward_cfg=RewardConfig(**data.get("reward", {})),
        **env_kwargs,
    )
    agent_data = dict(data.get("agent", {}))
    if "hidden_sizes" in agent_data:
        agent_data["hidden_sizes"] = tuple(agent_data["hidden_sizes"])
    bridge = BridgeConfig(**data["bridge"]) if data.get("bridge") else None
    kwargs = {"episodes": data["episodes"]} if "episodes" in data else {}
    return RunConfig(env=env, agent=AgentConfig(**agent_data), oracle=OracleSettings(**data.get("oracle", {})),
                     bridge=bridge, **kwargs)


def load_config_dict(data, lines=None):
    """Build a RunConfig from an already parsed mapping."""
    lines = lines or {}
    cleaned = _validate(data or {}, SCHEMA, "", lines)
    try:
        return _build(cleaned)
    except ConfigError as e:
        if e.line is None and e.field:
            e.line = _lookup_line(lines, e.field)
        raise
    except TypeError as e:
        # a required dataclass field left out, e.g. a prompt without len_demos
        raise ConfigError(f"Incomplete section: {e}") from e


def load_config_text(text, source="<string>"):
    try:
        data = yaml.safe_load(text)
        lines = _line_map(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ConfigError(f"{source}: invalid YAML: {getattr(e, 'problem', e)}",
                          line=mark.line + 1 if mark else None) from e
    try:
        return load_config_dict(data, lines)
    except ConfigError as e:
        raise ConfigError(f"{source}: {e.args[0]}", field=e.field, line=e.line) from e


def load_config(path):
    """Read and validate a YAML run configuration."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"Cannot read config file {path}: {e}") from e
    config = load_config_text(text, source=str(path))
    logger.debug("Loaded config from %s", path)
    return config


def dump_config(config, path):
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(config.to_dict(), f, sort_keys=False)
    return path
