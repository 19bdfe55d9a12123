"""
Brute-force policy oracle.

For every SNR bin (SNR measured at the reference power, which is what the
agent observes) the expected per-request reward of all 50 joint actions is
computed and the best action kept. Cost and fidelity are re-derived here in
vectorised form, independently of the environment's per-request path, so
agreement between the two checks both.
"""

import csv
import math
import logging
import concurrent.futures
from dataclasses import dataclass, field
from typing import List

import numpy as np
from scipy.special import erfc

from channel_model import snr_from_normalized
from jppo_env import rollout, summarize_rollout
from jppo_errors import ConfigError
from service_costs import NUM_ACTIONS, NUM_POWER_LEVELS, Action

logger = logging.getLogger(__name__)

DEFAULT_BINS = 16
DEFAULT_SNR_MIN = 0.01
DEFAULT_SNR_MAX = 20.0
DEFAULT_MC_SAMPLES = 20000
_CHUNK = 2048

TABLE_COLUMNS = ["bin", "snr_lo", "snr_hi", "probability", "compression_level", "power_level", "kappa",
                 "power_w", "expected_reward", "std_error", "mean_fidelity", "mean_ber", "mean_latency_s"]

_INDEX = np.arange(NUM_ACTIONS)
ACTION_KAPPA = 1.0 / (_INDEX // NUM_POWER_LEVELS + 1)
ACTION_POWER = 0.5 * (_INDEX % NUM_POWER_LEVELS + 1)


@dataclass(frozen=True)
class OracleSettings:
    bins: int = DEFAULT_BINS
    snr_min: float = DEFAULT_SNR_MIN
    snr_max: float = DEFAULT_SNR_MAX
    mc_samples: int = DEFAULT_MC_SAMPLES
    workers: int = 4

    def __post_init__(self):
        for name in ("bins", "mc_samples", "workers"):
            value = getattr(self, name)
            if isinstance(value, bool) or int(value) != value or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}", field=f"oracle.{name}")
        if not 0 < self.snr_min < self.snr_max < math.inf:
            raise ConfigError("oracle SNR range needs 0 < snr_min < snr_max", field="oracle.snr_min")


@dataclass(frozen=True)
class FadingBin:
    """Fading gains in [g_lo, g_hi), distributed as Exp(1) restricted to the bin."""

    g_lo: float
    g_hi: float

    @property
    def probability(self):
        return math.exp(-self.g_lo) * -math.expm1(-(self.g_hi - self.g_lo))

    def sample(self, rng, size):
        """Inverse-CDF draw from the truncated exponential, taken relative to g_lo."""
        u = rng.random(size)
        return self.g_lo - np.log1p(-u * -math.expm1(-(self.g_hi - self.g_lo)))


@dataclass(frozen=True)
class ExpectedReward:
    mean: float
    std_error: float
    samples: int


def snr_scale(config):
    """Reference SNR per unit fading gain."""
    ch = config.channel
    return config.reference_action.power_w * ch.distance_m ** (-ch.pathloss_exp) / ch.noise_power_w


def snr_bin_edges(bins, snr_min=DEFAULT_SNR_MIN, snr_max=DEFAULT_SNR_MAX):
    """[0, log-spaced interior edges, inf]; one bin gives [0, inf]."""
    if bins < 1:
        raise ValueError("At least one SNR bin is required")
    if bins == 1:
        return np.array([0.0, math.inf])
    interior = np.logspace(math.log10(snr_min), math.log10(snr_max), bins - 1)
    return np.concatenate([[0.0], interior, [math.inf]])


def derive_request_table(config, gains):
    """Every cost, fidelity and reward term for all prompts and actions.

    Args:
        config: EnvConfig
        gains: 1-D array of fading gains

    Returns:
        dict of arrays shaped (len(gains), num_prompts, 50)
    """
    ch, cp, con = config.channel, config.compute, config.constraints
    g = np.asarray(gains, dtype=float)[:, None, None]
    lengths = np.array([p.total_tokens for p in config.prompt_distribution], dtype=float)[None, :, None]
    kappa = ACTION_KAPPA[None, None, :]
    power = ACTION_POWER[None, None, :]

    tokens = np.maximum(1.0, np.ceil(kappa * lengths - 1e-9))
    bits = tokens * ch.bits_per_token
    t_slm = np.where(kappa < 1.0, cp.slm_time_per_token_s * lengths, 0.0) + 0.0 * g
    t_llm = cp.llm_fixed_overhead_s + cp.llm_time_per_token_s * (tokens + cp.output_tokens) + 0.0 * g
    e_enc = (t_slm * cp.slm_gpu_count * cp.slm_gpu_power_w
             + t_llm * cp.llm_gpu_count * cp.llm_gpu_power_w)

    gamma = power * g * ch.distance_m ** (-ch.pathloss_exp) / ch.noise_power_w + 0.0 * lengths
    with np.errstate(divide="ignore", invalid="ignore"):
        rate = ch.bandwidth_hz * np.log1p(gamma) / math.log(2.0)
        t_tx = np.where(rate > 0, bits / rate, np.inf)
    e_tx = t_tx * power
    if ch.ber_model == "rayleigh_average":
        mean_gamma = power * ch.distance_m ** (-ch.pathloss_exp) / ch.noise_power_w + 0.0 * gamma
        ber = 0.5 * (1.0 - np.sqrt(mean_gamma / (1.0 + mean_gamma)))
    else:
        ber = 0.5 * erfc(np.sqrt(gamma))
    ber = np.clip(ber, 0.0, 0.5)

    fc, w = config.fidelity_cfg, config.weights
    if fc.token_basis == "all":
        retention = kappa + 0.0 * ber
    else:
        retention = 1.0 - (1.0 - kappa) ** fc.retention_exp
    f1 = kappa ** fc.beta1 + 0.0 * ber
    f2 = retention * (1.0 - ber)
    f3 = f1 ** fc.beta3 * (1.0 - ber) ** fc.gamma3
    f = w.w1 * f1 + w.w2 * f2 + w.w3 * f3

    energy = e_enc + e_tx
    latency = t_slm + t_llm + t_tx
    violations = ((energy > con.energy_max_j).astype(float)
                  + (power > con.power_max_w)
                  + (latency > con.latency_max_s)
                  + (f <= con.fidelity_min))
    rc = config.reward_cfg
    reward = (rc.w_fidelity * f - rc.w_ber * ber - rc.w_power * (power / con.power_max_w)
              - rc.violation_penalty * violations)
    return {
        "snr": gamma, "rate_bps": rate, "ber": ber, "tx_bits": bits + 0.0 * g,
        "time_slm_s": t_slm, "time_llm_s": t_llm, "time_tx_s": t_tx, "time_total_s": latency,
        "energy_encode_j": e_enc, "energy_tx_j": e_tx, "energy_total_j": energy,
        "f1": f1, "f2": f2, "f3": f3, "f": f, "violations": violations, "reward": reward,
    }


def _prompt_average(table, probs):
    """Exact expectation over the prompt distribution: (S, P, 50) -> (S, 50)."""
    return np.tensordot(table, probs, axes=([1], [0]))


def evaluate_gains(config, gains):
    """Prompt-averaged reward, fidelity, BER and latency for each gain sample and action."""
    probs = config.prompt_probabilities
    reward, fid, ber, lat = [], [], [], []
    for start in range(0, len(gains), _CHUNK):
        t = derive_request_table(config, gains[start:start + _CHUNK])
        reward.append(_prompt_average(t["reward"], probs))
        fid.append(_prompt_average(t["f"], probs))
        ber.append(_prompt_average(t["ber"], probs))
        lat.append(_prompt_average(t["time_total_s"], probs))
    return np.vstack(reward), np.vstack(fid), np.vstack(ber), np.vstack(lat)


@dataclass
class BinEvaluation:
    rewards: np.ndarray
    std_errors: np.ndarray
    fidelity: np.ndarray
    ber: np.ndarray
    latency: np.ndarray
    samples: int


def evaluate_bin(config, fading, mc_samples, rng):
    """Expected reward of all 50 actions for gains drawn from a bin (or one fixed gain).

    All actions share the same gain draws.
    """
    if isinstance(fading, FadingBin):
        if mc_samples < 1:
            raise ValueError("mc_samples must be at least 1")
        gains = fading.sample(rng, mc_samples)
    else:
        gains = np.array([float(fading)])
    reward, fid, ber, lat = evaluate_gains(config, gains)
    n = len(gains)
    stderr = reward.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros(NUM_ACTIONS)
    with np.errstate(invalid="ignore"):
        latency = lat.mean(axis=0)
    return BinEvaluation(reward.mean(axis=0), stderr, fid.mean(axis=0), ber.mean(axis=0), latency, n)


def expected_reward(action, fading, config, mc_samples=DEFAULT_MC_SAMPLES, rng=None):
    """Expected reward of one action.

    Args:
        action: Action or joint index
        fading: FadingBin for Monte Carlo, or a fixed gain (exact, mc_samples ignored)
        config: EnvConfig
        mc_samples: Number of fading draws
        rng: numpy Generator (default seeded from config.seed)
    """
    action = action if isinstance(action, Action) else Action.from_index(action)
    if config.channel.fading == "fixed" and isinstance(fading, FadingBin):
        fading = config.channel.fixed_gain
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    ev = evaluate_bin(config, fading, mc_samples, rng)
    i = action.joint_index
    return ExpectedReward(float(ev.rewards[i]), float(ev.std_errors[i]), ev.samples)


@dataclass
class PolicyTable:
    snr_bin_edges: np.ndarray
    best_actions: List[Action]
    expected_rewards: np.ndarray
    std_errors: np.ndarray
    probabilities: np.ndarray
    mean_fidelity: np.ndarray = None
    mean_ber: np.ndarray = None
    mean_latency_s: np.ndarray = None
    reward_table: np.ndarray = field(default=None, repr=False)

    def __len__(self):
        return len(self.best_actions)

    @property
    def expected_optimum(self):
        """Mean per-request reward of the table policy over the fading distribution."""
        return float(np.dot(self.probabilities, self.expected_rewards) / self.probabilities.sum())

    @property
    def expected_power_w(self):
        powers = np.array([a.power_w for a in self.best_actions])
        return float(np.dot(self.probabilities, powers) / self.probabilities.sum())

    def bin_index(self, snr_value):
        i = int(np.searchsorted(self.snr_bin_edges, snr_value, side="right")) - 1
        return min(max(i, 0), len(self.best_actions) - 1)

    def action_for_snr(self, snr_value):
        return self.best_actions[self.bin_index(snr_value)]

    def __call__(self, state_row):
        """Policy interface: state row [fidelity, normalized SNR, BER] -> joint index."""
        return self.action_for_snr(snr_from_normalized(state_row[1])).joint_index

    def save(self, path):
        """Write the table as tab-separated text."""
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=TABLE_COLUMNS, delimiter="\t", lineterminator="\n")
            writer.writeheader()
            for b, action in enumerate(self.best_actions):
                writer.writerow({
                    "bin": b,
                    "snr_lo": repr(float(self.snr_bin_edges[b])),
                    "snr_hi": repr(float(self.snr_bin_edges[b + 1])),
                    "probability": repr(float(self.probabilities[b])),
                    "compression_level": action.compression_level,
                    "power_level": action.power_level,
                    "kappa": repr(action.kappa),
                    "power_w": repr(action.power_w),
                    "expected_reward": repr(float(self.expected_rewards[b])),
                    "std_error": repr(float(self.std_errors[b])),
                    "mean_fidelity": repr(float(self.mean_fidelity[b])),
                    "mean_ber": repr(float(self.mean_ber[b])),
                    "mean_latency_s": repr(float(self.mean_latency_s[b])),
                })
        return path

    @classmethod
    def load(cls, path):
        with open(path, newline="", encoding="utf-8") as f:
            rows = list(csv.DictReader(f, delimiter="\t"))
        if not rows:
            raise ValueError(f"{path}: empty policy table")
        missing = set(TABLE_COLUMNS) - set(rows[0])
        if missing:
            raise ValueError(f"{path}: missing columns {', '.join(sorted(missing))}")
        edges = [float(rows[0]["snr_lo"])] + [float(r["snr_hi"]) for r in rows]
        col = lambda name: np.array([float(r[name]) for r in rows])  # noqa: E731
        return cls(
            snr_bin_edges=np.array(edges),
            best_actions=[Action(int(r["compression_level"]), int(r["power_level"])) for r in rows],
            expected_rewards=col("expected_reward"),
            std_errors=col("std_error"),
            probabilities=col("probability"),
            mean_fidelity=col("mean_fidelity"),
            mean_ber=col("mean_ber"),
            mean_latency_s=col("mean_latency_s"),
        )


def optimal_policy(config, bins=DEFAULT_BINS, mc_samples=DEFAULT_MC_SAMPLES, seed=None,
                   snr_min=DEFAULT_SNR_MIN, snr_max=DEFAULT_SNR_MAX, workers=4):
    """Best action per SNR bin; ties go to the lowest joint index.

    A fixed-fading channel yields a single exact bin.
    """
    seed = config.seed if seed is None else seed
    if config.channel.fading == "fixed":
        ev = evaluate_bin(config, config.channel.fixed_gain, mc_samples, None)
        return _table_from(np.array([0.0, math.inf]), [ev], np.array([1.0]))

    edges = snr_bin_edges(bins, snr_min, snr_max)
    scale = snr_scale(config)
    fading_bins = [FadingBin(edges[b] / scale, edges[b + 1] / scale) for b in range(bins)]
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(bins)]

    results = [None] * bins
    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        futures = {executor.submit(evaluate_bin, config, fb, mc_samples, rng): b
                   for b, (fb, rng) in enumerate(zip(fading_bins, rngs))}
        for future in concurrent.futures.as_completed(futures):
            results[futures[future]] = future.result()
    probs = np.array([fb.probability for fb in fading_bins])
    logger.info("Oracle evaluated %d bins x %d actions with %d samples each", bins, NUM_ACTIONS, mc_samples)
    return _table_from(edges, results, probs)


def _table_from(edges, evaluations, probs):
    best = [int(np.argmax(ev.rewards)) for ev in evaluations]
    return PolicyTable(
        snr_bin_edges=edges,
        best_actions=[Action.from_index(i) for i in best],
        expected_rewards=np.array([ev.rewards[i] for ev, i in zip(evaluations, best)]),
        std_errors=np.array([ev.std_errors[i] for ev, i in zip(evaluations, best)]),
        probabilities=probs,
        mean_fidelity=np.array([ev.fidelity[i] for ev, i in zip(evaluations, best)]),
        mean_ber=np.array([ev.ber[i] for ev, i in zip(evaluations, best)]),
        mean_latency_s=np.array([ev.latency[i] for ev, i in zip(evaluations, best)]),
        reward_table=np.vstack([ev.rewards for ev in evaluations]),
    )


@dataclass
class RegretReport:
    policy_mean_reward: float
    oracle_mean_reward: float
    gap: float
    relative_gap: float
    agreement: float
    expected_optimum: float
    policy_summary: dict
    oracle_summary: dict
    note: str = ("The oracle treats requests as independent given the reference SNR; "
                 "any cross-step effect through the last-fidelity state entry is not modelled.")


def regret(policy, table, config, eval_episodes, seed, policy_steps=None):
    """Paired greedy rollouts of the policy and the table over identical random streams.

    policy_steps reuses an existing rollout of the policy over the same episodes and seed.

    Returns:
        RegretReport with oracle-minus-policy mean reward and the fraction of
        steps where the policy picked the table's action for the observed SNR
    """
    if policy_steps is None:
        policy_steps = rollout(config, policy, eval_episodes, seed)
    oracle_steps = rollout(config, table, eval_episodes, seed)
    policy_summary = summarize_rollout(policy_steps)
    oracle_summary = summarize_rollout(oracle_steps)
    agree = sum(1 for s in policy_steps if s.outcome.action.joint_index == table(s.state))
    gap = oracle_summary["mean_reward"] - policy_summary["mean_reward"]
    denom = abs(oracle_summary["mean_reward"])
    return RegretReport(
        policy_mean_reward=policy_summary["mean_reward"],
        oracle_mean_reward=oracle_summary["mean_reward"],
        gap=gap,
        relative_gap=gap / denom if denom > 0 else math.inf,
        agreement=agree / len(policy_steps),
        expected_optimum=table.expected_optimum,
        policy_summary=policy_summary,
        oracle_summary=oracle_summary,
    )
