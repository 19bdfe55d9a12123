"""
Prompt size, energy and latency accounting for one service request,
plus the discrete (compression level, power level) action grid.
"""

import math
import logging
from dataclasses import dataclass

from jppo_errors import ConfigError, OutageError

logger = logging.getLogger(__name__)

NUM_COMPRESSION_LEVELS = 5
NUM_POWER_LEVELS = 10
NUM_ACTIONS = NUM_COMPRESSION_LEVELS * NUM_POWER_LEVELS

# Tolerance for kappa * tokens landing a hair above an integer
_CEIL_GUARD = 1e-9


def _check_non_negative_int(value, field):
    if isinstance(value, bool) or int(value) != value or value < 0:
        raise ConfigError(f"{field} must be a non-negative integer, got {value!r}", field=field)


def _check_positive(value, field, allow_zero=False):
    ok = math.isfinite(value) and (value >= 0 if allow_zero else value > 0)
    if not ok:
        kind = "non-negative" if allow_zero else "positive"
        raise ConfigError(f"{field} must be a {kind} number, got {value!r}", field=field)


@dataclass(frozen=True)
class PromptProfile:
    """Token lengths of the instruction, demonstrations and question of a prompt."""

    len_instruction: int
    len_demos: int
    len_question: int
    name: str = ""
    weight: float = 1.0

    def __post_init__(self):
        for field in ("len_instruction", "len_demos", "len_question"):
            _check_non_negative_int(getattr(self, field), f"service.prompts.{field}")
        if self.total_tokens < 1:
            raise ConfigError("A prompt needs at least one token", field="service.prompts")
        _check_positive(self.weight, "service.prompts.weight")

    @property
    def total_tokens(self):
        return self.len_instruction + self.len_demos + self.len_question


@dataclass(frozen=True)
class ComputeProfile:
    """Encode-time coefficients and GPU provisioning for the SLM and LLM."""

    slm_time_per_token_s: float = 0.0342
    llm_time_per_token_s: float = 0.0970
    llm_fixed_overhead_s: float = 42.26
    output_tokens: int = 60
    slm_gpu_count: int = 1
    slm_gpu_power_w: float = 50.0
    llm_gpu_count: int = 4
    llm_gpu_power_w: float = 300.0

    def __post_init__(self):
        _check_positive(self.slm_time_per_token_s, "service.compute.slm_time_per_token_s")
        _check_positive(self.llm_time_per_token_s, "service.compute.llm_time_per_token_s")
        _check_positive(self.llm_fixed_overhead_s, "service.compute.llm_fixed_overhead_s", allow_zero=True)
        _check_positive(self.slm_gpu_power_w, "service.compute.slm_gpu_power_w")
        _check_positive(self.llm_gpu_power_w, "service.compute.llm_gpu_power_w")
        for field in ("output_tokens", "slm_gpu_count", "llm_gpu_count"):
            value = getattr(self, field)
            _check_non_negative_int(value, f"service.compute.{field}")
            if value < 1:
                raise ConfigError(f"{field} must be at least 1", field=f"service.compute.{field}")


@dataclass(frozen=True)
class Constraints:
    """Per-user thresholds: energy, transmit power, latency and minimum fidelity."""

    energy_max_j: float = 90000.0
    power_max_w: float = 5.0
    latency_max_s: float = 72.0
    fidelity_min: float = 0.75

    def __post_init__(self):
        # Zero budgets are representable so that feasibility screening can reject them
        _check_positive(self.energy_max_j, "constraints.energy_max_j", allow_zero=True)
        _check_positive(self.power_max_w, "constraints.power_max_w")
        _check_positive(self.latency_max_s, "constraints.latency_max_s", allow_zero=True)
        if not (0.0 <= self.fidelity_min < 1.0):
            raise ConfigError(f"fidelity_min must be in [0, 1), got {self.fidelity_min!r}",
                              field="constraints.fidelity_min")


@dataclass(frozen=True, order=True)
class Action:
    compression_level: int
    power_level: int

    def __post_init__(self):
        for field, upper in (("compression_level", NUM_COMPRESSION_LEVELS), ("power_level", NUM_POWER_LEVELS)):
            value = getattr(self, field)
            if isinstance(value, bool) or int(value) != value or not 0 <= value < upper:
                raise ValueError(f"{field} must be an integer in [0, {upper - 1}], got {value!r}")
            # numpy integers arrive from argmax; store plain ints
            object.__setattr__(self, field, int(value))

    @property
    def joint_index(self):
        return self.compression_level * NUM_POWER_LEVELS + self.power_level

    @property
    def kappa(self):
        return kappa_of_level(self.compression_level)

    @property
    def power_w(self):
        return power_of_level(self.power_level)

    @classmethod
    def from_index(cls, index):
        index = int(index)
        if not 0 <= index < NUM_ACTIONS:
            raise ValueError(f"Joint action index must be in [0, {NUM_ACTIONS - 1}], got {index}")
        return cls(index // NUM_POWER_LEVELS, index % NUM_POWER_LEVELS)

    def __str__(self):
        return f"({self.compression_level},{self.power_level})"


@dataclass(frozen=True)
class CostBreakdown:
    kappa: float
    tx_bits: int
    energy_encode_j: float
    energy_tx_j: float
    energy_total_j: float
    time_slm_s: float
    time_llm_s: float
    time_tx_s: float
    time_total_s: float


def kappa_of_level(compression_level):
    """Compression ratio kappa = 1 / (level + 1)."""
    if isinstance(compression_level, bool) or not 0 <= compression_level < NUM_COMPRESSION_LEVELS \
            or int(compression_level) != compression_level:
        raise ValueError(f"compression_level must be in [0, {NUM_COMPRESSION_LEVELS - 1}], got {compression_level!r}")
    return 1.0 / (int(compression_level) + 1)


def power_of_level(power_level):
    """Transmit power 0.5 * (level + 1) watts."""
    if isinstance(power_level, bool) or not 0 <= power_level < NUM_POWER_LEVELS \
            or int(power_level) != power_level:
        raise ValueError(f"power_level must be in [0, {NUM_POWER_LEVELS - 1}], got {power_level!r}")
    return 0.5 * (int(power_level) + 1)


def _check_kappa(kappa):
    if not 0.0 < kappa <= 1.0:
        raise ValueError(f"kappa must be in (0, 1], got {kappa!r}")


def compressed_tokens(profile, kappa):
    """Token count of the compressed prompt, ceil(kappa * L), never below one."""
    _check_kappa(kappa)
    return max(1, math.ceil(kappa * profile.total_tokens - _CEIL_GUARD))


def compressed_bits(profile, kappa, bits_per_token):
    """Bit length s(kappa) of the compressed prompt."""
    return compressed_tokens(profile, kappa) * int(bits_per_token)


def encode_times(profile, kappa, compute):
    """SLM and LLM encode times for one request.

    The SLM reads the whole original prompt and is skipped when kappa is 1.
    The LLM cost is affine in compressed input plus response tokens.

    Returns:
        (t_slm_s, t_llm_s)
    """
    _check_kappa(kappa)
    t_slm = 0.0 if kappa >= 1.0 else compute.slm_time_per_token_s * profile.total_tokens
    t_llm = compute.llm_fixed_overhead_s + compute.llm_time_per_token_s * (
        compressed_tokens(profile, kappa) + compute.output_tokens)
    return t_slm, t_llm


def energy_encode(t_slm_s, t_llm_s, compute):
    """Encoding energy: GPU-time of the SLM pass plus the LLM pass."""
    if t_slm_s < 0 or t_llm_s < 0:
        raise ValueError("Encode times must be non-negative")
    return (t_slm_s * compute.slm_gpu_count * compute.slm_gpu_power_w
            + t_llm_s * compute.llm_gpu_count * compute.llm_gpu_power_w)


def energy_and_time_tx(tx_bits, p_tx_w, rate_bps):
    """Uplink time s / R and energy (s / R) * P_T.

    Raises:
        OutageError: rate_bps is zero
    """
    if rate_bps <= 0:
        raise OutageError(f"Link in outage at {p_tx_w} W: rate is {rate_bps} bit/s")
    t_tx = tx_bits / rate_bps
    return t_tx * p_tx_w, t_tx


def total_cost(profile, action, link, compute, params):
    """Full energy and delay breakdown for one request.

    Args:
        profile: PromptProfile of the request
        action: Action taken
        link: LinkState computed at the action's power
        compute: ComputeProfile
        params: ChannelParams (bits per token)

    Raises:
        OutageError: propagated when the link has zero rate
    """
    kappa = action.kappa
    bits = compressed_bits(profile, kappa, params.bits_per_token)
    t_slm, t_llm = encode_times(profile, kappa, compute)
    e_enc = energy_encode(t_slm, t_llm, compute)
    e_tx, t_tx = energy_and_time_tx(bits, action.power_w, link.rate_bps)
    return CostBreakdown(
        kappa=kappa,
        tx_bits=bits,
        energy_encode_j=e_enc,
        energy_tx_j=e_tx,
        energy_total_j=e_enc + e_tx,
        time_slm_s=t_slm,
        time_llm_s=t_llm,
        time_tx_s=t_tx,
        time_total_s=t_slm + t_llm + t_tx,
    )


def outage_cost(profile, action, compute, params):
    """Breakdown for a request whose link is in outage: transmission never completes."""
    kappa = action.kappa
    t_slm, t_llm = encode_times(profile, kappa, compute)
    e_enc = energy_encode(t_slm, t_llm, compute)
    return CostBreakdown(
        kappa=kappa,
        tx_bits=compressed_bits(profile, kappa, params.bits_per_token),
        energy_encode_j=e_enc,
        energy_tx_j=math.inf,
        energy_total_j=math.inf,
        time_slm_s=t_slm,
        time_llm_s=t_llm,
        time_tx_s=math.inf,
        time_total_s=math.inf,
    )


def baseline_action(reference_power_level):
    """Uncompressed request at the reference (median) power level."""
    return Action(0, int(reference_power_level))


ALL_ACTIONS = tuple(Action.from_index(i) for i in range(NUM_ACTIONS))
