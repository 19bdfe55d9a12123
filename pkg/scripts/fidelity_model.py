"""
Service fidelity: representation accuracy (f1), transmission completeness (f2),
understanding accuracy (f3) and their weighted combination.

The default scorer is analytic. Any object with a ``score(kappa, ber)`` method
returning a FidelityReport can replace it (see llm_bridge.BridgeFidelityScorer).
"""

import math
import logging
from dataclasses import dataclass

from jppo_errors import ConfigError

logger = logging.getLogger(__name__)

TOKEN_BASES = ("essential", "all")
WEIGHT_SUM_TOLERANCE = 1e-9


@dataclass(frozen=True)
class FidelityWeights:
    w1: float = 0.4
    w2: float = 0.3
    w3: float = 0.3

    def __post_init__(self):
        for name in ("w1", "w2", "w3"):
            value = getattr(self, name)
            if not (math.isfinite(value) and 0.0 <= value <= 1.0):
                raise ConfigError(f"Fidelity weight {name} must be in [0, 1], got {value!r}",
                                  field=f"fidelity.weights.{name}")
        total = self.w1 + self.w2 + self.w3
        if abs(total - 1.0) > WEIGHT_SUM_TOLERANCE:
            raise ConfigError(f"Fidelity weights must sum to 1, got {total!r}", field="fidelity.weights")


@dataclass(frozen=True)
class FidelityReport:
    f1: float
    f2: float
    f3: float
    f: float
    weights: FidelityWeights = FidelityWeights()


@dataclass(frozen=True)
class FidelityModelConfig:
    """Shape parameters of the analytic fidelity surrogate.

    token_basis selects how f2 counts retained tokens: "essential" models a
    compressor that keeps key tokens first, "all" uses kappa directly.
    """

    beta1: float = 0.1
    retention_exp: float = 6.0
    beta3: float = 0.5
    gamma3: float = 0.5
    token_basis: str = "essential"

    def __post_init__(self):
        for name in ("beta1", "beta3", "gamma3"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ConfigError(f"{name} must be positive, got {value!r}", field=f"fidelity.{name}")
        if not (math.isfinite(self.retention_exp) and self.retention_exp >= 1):
            raise ConfigError(f"retention_exp must be >= 1, got {self.retention_exp!r}",
                              field="fidelity.retention_exp")
        if self.token_basis not in TOKEN_BASES:
            raise ConfigError(f"token_basis must be one of {', '.join(TOKEN_BASES)}, got {self.token_basis!r}",
                              field="fidelity.token_basis")


def _check_kappa(kappa):
    if not 0.0 < kappa <= 1.0:
        raise ValueError(f"kappa must be in (0, 1], got {kappa!r}")


def _check_ber(ber):
    if not 0.0 <= ber <= 0.5:
        raise ValueError(f"BER must be in [0, 0.5], got {ber!r}")


def f1_representation(kappa, cfg):
    _check_kappa(kappa)
    return kappa ** cfg.beta1


def token_retention(kappa, cfg):
    """Fraction of the information-bearing tokens kept at ratio kappa."""
    _check_kappa(kappa)
    if cfg.token_basis == "all":
        return kappa
    return 1.0 - (1.0 - kappa) ** cfg.retention_exp


def f2_completeness(kappa, ber, cfg):
    _check_ber(ber)
    return token_retention(kappa, cfg) * (1.0 - ber)


def f3_understanding(f1, ber, cfg):
    if not 0.0 <= f1 <= 1.0:
        raise ValueError(f"f1 must be in [0, 1], got {f1!r}")
    _check_ber(ber)
    return f1 ** cfg.beta3 * (1.0 - ber) ** cfg.gamma3


def combine(f1, f2, f3, weights):
    """Weighted fidelity f = w1*f1 + w2*f2 + w3*f3."""
    for name, value in (("f1", f1), ("f2", f2), ("f3", f3)):
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"{name} must be in [0, 1], got {value!r}")
    f = weights.w1 * f1 + weights.w2 * f2 + weights.w3 * f3
    return FidelityReport(f1=f1, f2=f2, f3=f3, f=f, weights=weights)


class SyntheticScorer:
    """Analytic fidelity scorer used by default."""

    def __init__(self, weights=None, cfg=None):
        self.weights = weights or FidelityWeights()
        self.cfg = cfg or FidelityModelConfig()

    def score(self, kappa, ber):
        f1 = f1_representation(kappa, self.cfg)
        f2 = f2_completeness(kappa, ber, self.cfg)
        f3 = f3_understanding(f1, ber, self.cfg)
        return combine(f1, f2, f3, self.weights)
