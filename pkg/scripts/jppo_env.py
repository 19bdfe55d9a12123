"""
JPPO decision process: N users, each issuing one LLM service request per step.

The agent picks a (compression level, power level) pair per user; the
environment evaluates link, cost and fidelity for the request, checks the
energy / power / latency / fidelity constraints and emits a shaped reward.
"""

import math
import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from channel_model import ChannelParams, FadingProcess, link_ber, link_state, normalized_snr, snr
from fidelity_model import FidelityModelConfig, FidelityWeights, SyntheticScorer
from jppo_errors import ConfigError, EnvStateError, InfeasibleConfigError, OutageError, ShapeMismatchError
from service_costs import (ALL_ACTIONS, NUM_ACTIONS, NUM_POWER_LEVELS, Action, ComputeProfile, Constraints,
                           PromptProfile, encode_times, energy_encode, outage_cost, total_cost)

logger = logging.getLogger(__name__)

STATE_DIM = 3
VIOLATION_TAGS = ("energy", "power", "latency", "fidelity")

DEFAULT_PROMPTS = (
    PromptProfile(len_instruction=8, len_demos=24, len_question=12, name="short", weight=0.2),
    PromptProfile(len_instruction=36, len_demos=320, len_question=32, name="long", weight=0.8),
)


@dataclass(frozen=True)
class RewardConfig:
    w_fidelity: float = 10.0
    w_ber: float = 2.0
    w_power: float = 1.0
    violation_penalty: float = 5.0

    def __post_init__(self):
        if not (math.isfinite(self.w_fidelity) and self.w_fidelity > 0):
            raise ConfigError(f"w_fidelity must be positive, got {self.w_fidelity!r}", field="reward.w_fidelity")
        for name in ("w_ber", "w_power"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ConfigError(f"{name} must be non-negative, got {value!r}", field=f"reward.{name}")
        if not (math.isfinite(self.violation_penalty) and self.violation_penalty > 0):
            raise ConfigError(f"violation_penalty must be positive, got {self.violation_penalty!r}",
                              field="reward.violation_penalty")


@dataclass(frozen=True)
class EnvConfig:
    num_users: int = 1
    channel: ChannelParams = ChannelParams()
    prompt_distribution: tuple = DEFAULT_PROMPTS
    compute: ComputeProfile = ComputeProfile()
    constraints: Constraints = Constraints()
    weights: FidelityWeights = FidelityWeights()
    fidelity_cfg: FidelityModelConfig = FidelityModelConfig()
    reward_cfg: RewardConfig = RewardConfig()
    seed: int = 0
    horizon: int = 50
    reference_power_level: int = 4

    def __post_init__(self):
        if isinstance(self.num_users, bool) or int(self.num_users) != self.num_users or self.num_users < 1:
            raise ConfigError(f"num_users must be a positive integer, got {self.num_users!r}", field="num_users")
        if isinstance(self.horizon, bool) or int(self.horizon) != self.horizon or self.horizon < 1:
            raise ConfigError(f"horizon must be a positive integer, got {self.horizon!r}", field="horizon")
        if not self.prompt_distribution:
            raise ConfigError("Prompt distribution must not be empty", field="service.prompts")
        object.__setattr__(self, "prompt_distribution", tuple(self.prompt_distribution))
        if not 0 <= self.reference_power_level < NUM_POWER_LEVELS:
            raise ConfigError(f"reference_power_level must be in [0, {NUM_POWER_LEVELS - 1}]",
                              field="service.reference_power_level")

    @property
    def prompt_probabilities(self):
        weights = np.array([p.weight for p in self.prompt_distribution], dtype=float)
        return weights / weights.sum()

    @property
    def reference_action(self):
        return Action(0, int(self.reference_power_level))


@dataclass(frozen=True)
class RequestEvaluation:
    link: object
    cost: object
    fidelity: object
    violated: frozenset
    reward: float


@dataclass
class StepOutcome:
    next_state: np.ndarray
    reward: float
    cost: object
    fidelity: object
    violated: frozenset
    link: object = None
    action: Optional[Action] = None
    prompt: Optional[PromptProfile] = None
    terminal: bool = False

    def metric_values(self):
        """Numeric per-step values aggregated into per-episode metrics."""
        values = {
            "fidelity": self.fidelity.f,
            "ber": self.link.ber,
            "power_w": self.action.power_w,
            "latency_s": self.cost.time_total_s,
            "energy_j": self.cost.energy_total_j,
        }
        for tag in VIOLATION_TAGS:
            values[f"violation_{tag}"] = 1.0 if tag in self.violated else 0.0
        return values

    def to_record(self, episode, step, user):
        record = {
            "episode": episode,
            "step": step,
            "user": user,
            "compression_level": self.action.compression_level,
            "power_level": self.action.power_level,
            "prompt": self.prompt.name,
            "kappa": self.cost.kappa,
            "power_w": self.action.power_w,
            "fading_gain": self.link.fading_gain,
            "snr": self.link.snr,
            "ber": self.link.ber,
            "f1": self.fidelity.f1,
            "f2": self.fidelity.f2,
            "f3": self.fidelity.f3,
            "f": self.fidelity.f,
            "energy_j": self.cost.energy_total_j,
            "latency_s": self.cost.time_total_s,
            "reward": self.reward,
        }
        for tag in VIOLATION_TAGS:
            record[f"violated_{tag}"] = tag in self.violated
        return record


def violations(cost, power_w, fidelity, constraints):
    tags = set()
    if cost.energy_total_j > constraints.energy_max_j:
        tags.add("energy")
    if power_w > constraints.power_max_w:
        tags.add("power")
    if cost.time_total_s > constraints.latency_max_s:
        tags.add("latency")
    if fidelity.f <= constraints.fidelity_min:
        tags.add("fidelity")
    return frozenset(tags)


def shaped_reward(fidelity_value, ber_value, power_w, violated, config):
    rc = config.reward_cfg
    return (rc.w_fidelity * fidelity_value
            - rc.w_ber * ber_value
            - rc.w_power * (power_w / config.constraints.power_max_w)
            - rc.violation_penalty * len(violated))


def evaluate_request(config, profile, action, g, scorer=None):
    """Evaluate one request without touching any episode state."""
    scorer = scorer or SyntheticScorer(config.weights, config.fidelity_cfg)
    link = link_state(action.power_w, g, config.channel)
    try:
        cost = total_cost(profile, action, link, config.compute, config.channel)
    except OutageError:
        logger.debug("Outage for action %s at g=%r", action, g)
        cost = outage_cost(profile, action, config.compute, config.channel)
    fidelity = scorer.score(action.kappa, link.ber)
    violated = violations(cost, action.power_w, fidelity, config.constraints)
    reward = shaped_reward(fidelity.f, link.ber, action.power_w, violated, config)
    return RequestEvaluation(link=link, cost=cost, fidelity=fidelity, violated=violated, reward=reward)


def observe(config, last_fidelity, g):
    """State row for a user whose next request sees fading gain g."""
    p_ref = config.reference_action.power_w
    gamma_ref = snr(p_ref, g, config.channel)
    return np.array([last_fidelity, normalized_snr(gamma_ref), link_ber(p_ref, g, config.channel)], dtype=float)


def feasible_actions(config):
    """Actions that can meet the constraints for at least one prompt under best-case fading.

    Best case means zero transmission time and energy, so only the encode
    costs, the power level and the thresholds matter.

    Raises:
        InfeasibleConfigError: no action survives the screening
    """
    c = config.constraints
    feasible = set()
    for action in ALL_ACTIONS:
        if action.power_w > c.power_max_w:
            continue
        for profile in config.prompt_distribution:
            t_slm, t_llm = encode_times(profile, action.kappa, config.compute)
            energy = energy_encode(t_slm, t_llm, config.compute)
            if energy <= c.energy_max_j and t_slm + t_llm <= c.latency_max_s:
                feasible.add(action)
                break
    if not feasible:
        raise InfeasibleConfigError(
            "No action meets the energy, power and latency thresholds even with an ideal channel")
    return frozenset(feasible)


def _as_action(a):
    if isinstance(a, Action):
        return a
    return Action.from_index(a)


class JPPOEnv:
    """Multi-user environment with one pending request per user.

    State is an array of shape (num_users, 3): the fidelity of the user's last
    request, then the normalized SNR and BER the next request will see at the
    reference power.
    """

    num_actions = NUM_ACTIONS
    state_dim = STATE_DIM

    def __init__(self, config, scorer=None):
        self.config = config
        self.scorer = scorer or SyntheticScorer(config.weights, config.fidelity_cfg)
        self.num_users = config.num_users
        self._fading = None
        self._prompt_rngs = None
        self._pending = None
        self._state = None
        self._t = None
        self._done = True
        self._seed(config.seed)

    def _seed(self, seed):
        children = np.random.SeedSequence(seed).spawn(2 * self.num_users)
        self._fading = [FadingProcess(self.config.channel, np.random.default_rng(children[2 * n]))
                        for n in range(self.num_users)]
        self._prompt_rngs = [np.random.default_rng(children[2 * n + 1]) for n in range(self.num_users)]

    def _draw(self, user):
        g = self._fading[user].next_gain()
        probs = self.config.prompt_probabilities
        idx = int(self._prompt_rngs[user].choice(len(probs), p=probs))
        return g, self.config.prompt_distribution[idx]

    def reset(self, seed=None):
        """Start an episode. A seed restarts every random stream; None continues them."""
        if seed is not None:
            self._seed(seed)
        reference = self.config.reference_action
        self._pending = []
        rows = []
        for n in range(self.num_users):
            self._fading[n].start_episode()
            g, profile = self._draw(n)
            self._pending.append((g, profile))
            f_ref = evaluate_request(self.config, profile, reference, g, self.scorer).fidelity.f
            rows.append(observe(self.config, f_ref, g))
        self._state = np.vstack(rows)
        self._t = 0
        self._done = False
        return self._state.copy()

    @property
    def state(self):
        if self._state is None:
            raise EnvStateError("Environment has not been reset")
        return self._state.copy()

    def step(self, actions):
        """Apply one action per user and return one StepOutcome per user."""
        if self._state is None:
            raise EnvStateError("step() called before reset()")
        if self._done:
            raise EnvStateError("Episode finished; call reset() before stepping again")
        if np.ndim(actions) == 0:
            actions = [actions]
        if len(actions) != self.num_users:
            raise ShapeMismatchError(f"Expected {self.num_users} actions, got {len(actions)}")
        actions = [_as_action(a) for a in actions]

        self._t += 1
        terminal = self._t >= self.config.horizon
        outcomes = []
        rows = []
        for n, action in enumerate(actions):
            g, profile = self._pending[n]
            ev = evaluate_request(self.config, profile, action, g, self.scorer)
            if ev.link.in_outage:
                logger.warning("User %d in outage at step %d (g=%r)", n, self._t, g)
            next_g, next_profile = self._draw(n)
            self._pending[n] = (next_g, next_profile)
            next_row = observe(self.config, ev.fidelity.f, next_g)
            rows.append(next_row)
            outcomes.append(StepOutcome(
                next_state=next_row.copy(),
                reward=ev.reward,
                cost=ev.cost,
                fidelity=ev.fidelity,
                violated=ev.violated,
                link=ev.link,
                action=action,
                prompt=profile,
                terminal=terminal,
            ))
        self._state = np.vstack(rows)
        self._done = terminal
        return outcomes


@dataclass
class RolloutStep:
    episode: int
    step: int
    user: int
    state: np.ndarray
    outcome: StepOutcome


class RandomPolicy:
    """Uniform random joint actions from its own seeded source."""

    def __init__(self, seed=0):
        self.rng = np.random.default_rng(seed)

    def __call__(self, state_row):
        return int(self.rng.integers(NUM_ACTIONS))


class FixedPolicy:
    def __init__(self, action):
        self.action = _as_action(action)

    def __call__(self, state_row):
        return self.action.joint_index


def rollout(config, policy, episodes, seed, scorer=None):
    """Run greedy evaluation episodes with ``policy(state_row) -> joint index``.

    Random streams depend only on (config, seed), never on the actions, so two
    policies rolled out with the same seed face identical channels and prompts.
    """
    env = JPPOEnv(config, scorer=scorer)
    steps: List[RolloutStep] = []
    for episode in range(episodes):
        states = env.reset(seed=seed if episode == 0 else None)
        for t in range(config.horizon):
            actions = [policy(states[n]) for n in range(env.num_users)]
            outcomes = env.step(actions)
            for n, outcome in enumerate(outcomes):
                steps.append(RolloutStep(episode, t, n, states[n].copy(), outcome))
            states = np.vstack([o.next_state for o in outcomes])
    return steps


def summarize_rollout(steps):
    """Mean metrics over a rollout."""
    if not steps:
        return {}
    count = len(steps)
    rewards = [s.outcome.reward for s in steps]
    summary = {
        "steps": count,
        "mean_reward": float(np.mean(rewards)),
        "mean_fidelity": float(np.mean([s.outcome.fidelity.f for s in steps])),
        "mean_ber": float(np.mean([s.outcome.link.ber for s in steps])),
        "mean_power_w": float(np.mean([s.outcome.action.power_w for s in steps])),
        "mean_latency_s": float(np.mean([s.outcome.cost.time_total_s for s in steps])),
        "mean_energy_j": float(np.mean([s.outcome.cost.energy_total_j for s in steps])),
        "violation_rate": sum(1 for s in steps if s.outcome.violated) / count,
    }
    for tag in VIOLATION_TAGS:
        summary[f"violations_{tag}"] = sum(1 for s in steps if tag in s.outcome.violated)
    return summary
