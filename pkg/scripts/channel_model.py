"""
Wireless link model for one user: Rayleigh block fading, SNR, Shannon rate
and bit error rate as functions of transmit power.
"""

import math
import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import erfc

from jppo_errors import ConfigError

logger = logging.getLogger(__name__)

FADING_MODES = ("per_step", "per_episode", "fixed")
BER_MODELS = ("bpsk", "rayleigh_average")


@dataclass(frozen=True)
class ChannelParams:
    """Link budget parameters.

    Args:
        bandwidth_hz: Channel bandwidth W
        distance_m: User to data-center distance d
        pathloss_exp: Path-loss exponent alpha, at least 2
        noise_power_w: Noise power sigma^2
        bits_per_token: Bits used to encode one prompt token
        fading: When the fading gain is redrawn (per_step, per_episode or fixed)
        fixed_gain: Gain used when fading is "fixed"
        ber_model: Name of the BER strategy (bpsk or rayleigh_average)
    """

    bandwidth_hz: float = 1e6
    distance_m: float = 100.0
    pathloss_exp: float = 3.0
    noise_power_w: float = 1e-6
    bits_per_token: int = 16
    fading: str = "per_step"
    fixed_gain: float = 1.0
    ber_model: str = "bpsk"

    def __post_init__(self):
        for name in ("bandwidth_hz", "distance_m", "noise_power_w"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ConfigError(f"{name} must be a positive number, got {value!r}", field=f"channel.{name}")
        if not (math.isfinite(self.pathloss_exp) and self.pathloss_exp >= 2):
            raise ConfigError(f"pathloss_exp must be >= 2, got {self.pathloss_exp!r}", field="channel.pathloss_exp")
        if isinstance(self.bits_per_token, bool) or int(self.bits_per_token) != self.bits_per_token or self.bits_per_token < 1:
            raise ConfigError(f"bits_per_token must be a positive integer, got {self.bits_per_token!r}",
                              field="channel.bits_per_token")
        if self.fading not in FADING_MODES:
            raise ConfigError(f"fading must be one of {', '.join(FADING_MODES)}, got {self.fading!r}",
                              field="channel.fading")
        if not (math.isfinite(self.fixed_gain) and self.fixed_gain >= 0):
            raise ConfigError(f"fixed_gain must be non-negative, got {self.fixed_gain!r}", field="channel.fixed_gain")
        if self.ber_model not in BER_MODELS:
            raise ConfigError(f"ber_model must be one of {', '.join(BER_MODELS)}, got {self.ber_model!r}",
                              field="channel.ber_model")

    @property
    def path_gain(self):
        """Large-scale attenuation d^-alpha."""
        return self.distance_m ** (-self.pathloss_exp)


@dataclass(frozen=True)
class LinkState:
    fading_gain: float
    snr: float
    rate_bps: float
    ber: float

    @property
    def in_outage(self):
        return self.rate_bps <= 0.0


def sample_fading(rng):
    """Draw a Rayleigh power gain g ~ Exp(1) from a seeded numpy Generator."""
    return float(rng.exponential(1.0))


def snr(p_tx_w, g, params):
    """Received SNR gamma = P_T * g * d^-alpha / sigma^2."""
    if not p_tx_w > 0:
        raise ValueError(f"Transmit power must be positive, got {p_tx_w!r}")
    if g < 0:
        raise ValueError(f"Fading gain must be non-negative, got {g!r}")
    return p_tx_w * g * params.path_gain / params.noise_power_w


def rate(snr_value, params):
    """Shannon rate W * log2(1 + gamma) in bit/s."""
    if snr_value < 0:
        raise ValueError(f"SNR must be non-negative, got {snr_value!r}")
    # log1p keeps tiny SNRs from rounding the rate to zero
    return params.bandwidth_hz * math.log1p(snr_value) / math.log(2.0)


def ber(snr_value):
    """Uncoded BPSK bit error rate on the instantaneous SNR: 0.5 * erfc(sqrt(gamma))."""
    if snr_value < 0:
        raise ValueError(f"SNR must be non-negative, got {snr_value!r}")
    value = 0.5 * float(erfc(math.sqrt(snr_value)))
    return min(max(value, 0.0), 0.5)


def ber_rayleigh_average(mean_snr):
    """BPSK error rate averaged over Rayleigh fading with mean SNR gamma-bar."""
    if mean_snr < 0:
        raise ValueError(f"SNR must be non-negative, got {mean_snr!r}")
    if math.isinf(mean_snr):
        return 0.0
    value = 0.5 * (1.0 - math.sqrt(mean_snr / (1.0 + mean_snr)))
    return min(max(value, 0.0), 0.5)


def link_ber(p_tx_w, g, params):
    """BER under the configured strategy for one request."""
    if params.ber_model == "rayleigh_average":
        return ber_rayleigh_average(snr(p_tx_w, 1.0, params))
    return ber(snr(p_tx_w, g, params))


def link_state(p_tx_w, g, params):
    """Compose SNR, rate and BER for transmit power p_tx_w under fading gain g."""
    gamma = snr(p_tx_w, g, params)
    return LinkState(
        fading_gain=float(g),
        snr=gamma,
        rate_bps=rate(gamma, params),
        ber=link_ber(p_tx_w, g, params),
    )


class FadingProcess:
    """Owns the random source for one user's fading sequence."""

    def __init__(self, params, rng):
        self.params = params
        self.rng = rng
        self._episode_gain = None

    def start_episode(self):
        self._episode_gain = None

    def next_gain(self):
        mode = self.params.fading
        if mode == "fixed":
            return float(self.params.fixed_gain)
        if mode == "per_episode":
            if self._episode_gain is None:
                self._episode_gain = sample_fading(self.rng)
            return self._episode_gain
        return sample_fading(self.rng)


def normalized_snr(snr_value):
    """Bounded network input gamma / (1 + gamma)."""
    if math.isinf(snr_value):
        return 1.0
    return snr_value / (1.0 + snr_value)


def snr_from_normalized(x):
    """Inverse of normalized_snr."""
    x = float(np.clip(x, 0.0, 1.0))
    if x >= 1.0:
        return math.inf
    return x / (1.0 - x)
