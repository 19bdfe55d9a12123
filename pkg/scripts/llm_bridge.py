"""
Client for an external prompt-compression / similarity-scoring service.

Two JSON routes are used:
    POST /compress  {"text", "target_ratio"} -> {"text", "original_tokens", "compressed_tokens"}
    POST /score     {"a", "b"}               -> {"score"}

The synthetic fidelity model stays the default; BridgeFidelityScorer plugs
real scores into the environment through the same ``score(kappa, ber)`` call.
"""

import os
import json
import math
import time
import logging
from collections import defaultdict, deque
from dataclasses import dataclass
from typing import Optional

import requests
import validators

from fidelity_model import FidelityModelConfig, FidelityWeights, combine, token_retention
from jppo_errors import BridgeError, BridgeResponseError, BridgeTimeoutError, ConfigError

logger = logging.getLogger(__name__)

TOKEN_ENV_VAR = "JPPO_BRIDGE_TOKEN"
KAPPA_BAND = 0.20
RETRY_BACKOFF_S = 0.5


@dataclass(frozen=True)
class BridgeConfig:
    compress_endpoint_url: str
    score_endpoint_url: str
    timeout_s: float = 30.0
    max_retries: int = 2
    auth_token: Optional[str] = None

    def __post_init__(self):
        for name in ("compress_endpoint_url", "score_endpoint_url"):
            url = getattr(self, name)
            if not url or validators.url(url, simple_host=True) is not True:
                raise ConfigError(f"{name} is not a well-formed URL: {url!r}", field=f"bridge.{name}")
        if not (isinstance(self.timeout_s, (int, float)) and self.timeout_s > 0):
            raise ConfigError(f"timeout_s must be positive, got {self.timeout_s!r}", field="bridge.timeout_s")
        if isinstance(self.max_retries, bool) or int(self.max_retries) != self.max_retries or not 0 <= self.max_retries <= 10:
            raise ConfigError(f"max_retries must be an integer in [0, 10], got {self.max_retries!r}",
                              field="bridge.max_retries")

    def resolved_token(self):
        return self.auth_token or os.environ.get(TOKEN_ENV_VAR) or None


@dataclass(frozen=True)
class CompressionResult:
    compressed_text: str
    original_tokens: int
    compressed_tokens: int
    achieved_kappa: float
    within_band: bool = True


def _encode_body(body):
    return (body if isinstance(body, str) else json.dumps(body)).encode("utf-8")


class RecordedSession:
    """Replays canned JSON responses in place of requests.Session.

    Fixtures map a route suffix ("/compress", "/score") to a list of entries,
    each either a response body or {"error": "timeout" | "connection"} or
    {"status": <code>, "body": ...}. Entries are consumed in order.
    """

    def __init__(self, fixtures):
        self.queues = defaultdict(deque)
        for route, entries in fixtures.items():
            self.queues[route].extend(entries)
        self.calls = []
        self.headers = {}

    @classmethod
    def from_file(cls, path):
        with open(path, "r", encoding="utf-8") as f:
            return cls(json.load(f))

    def post(self, url, json=None, timeout=None, headers=None):
        route = next((r for r in self.queues if url.endswith(r)), None)
        self.calls.append({"url": url, "json": json, "timeout": timeout, "headers": dict(headers or {})})
        if route is None or not self.queues[route]:
            raise requests.exceptions.ConnectionError(f"No recorded response for {url}")
        entry = self.queues[route].popleft()
        if isinstance(entry, dict) and entry.get("error") == "timeout":
            raise requests.exceptions.Timeout(f"Recorded timeout for {url}")
        if isinstance(entry, dict) and entry.get("error") == "connection":
            raise requests.exceptions.ConnectionError(f"Recorded connection failure for {url}")
        status, body = 200, entry
        if isinstance(entry, dict) and "status" in entry:
            status, body = entry["status"], entry.get("body")
        response = requests.Response()
        response.status_code = status
        response._content = _encode_body(body)
        response.url = url
        return response

    def close(self):
        pass


class LLMBridge:
    """One-request-at-a-time client for the compression and scoring routes."""

    def __init__(self, cfg, session=None, sleep=time.sleep):
        self.cfg = cfg
        self.session = session or requests.Session()
        self._sleep = sleep
        token = cfg.resolved_token()
        self.headers = {"Content-Type": "application/json"}
        if token:
            self.headers["Authorization"] = f"Bearer {token}"

    def _post(self, url, payload):
        attempts = self.cfg.max_retries + 1
        last_error = None
        for attempt in range(1, attempts + 1):
            try:
                response = self.session.post(url, json=payload, timeout=self.cfg.timeout_s, headers=self.headers)
                if response.status_code >= 500:
                    last_error = BridgeError(f"{url} returned HTTP {response.status_code}")
                elif response.status_code >= 400:
                    raise BridgeResponseError(f"{url} rejected the request with HTTP {response.status_code}")
                else:
                    try:
                        return response.json()
                    except ValueError as e:
                        raise BridgeResponseError(f"{url} returned a non-JSON body") from e
            except requests.exceptions.Timeout:
                last_error = BridgeTimeoutError(f"{url} did not answer within {self.cfg.timeout_s} s")
            except requests.exceptions.RequestException as e:
                last_error = BridgeError(f"Request to {url} failed: {e}")
            if attempt < attempts:
                logger.warning("Attempt %d/%d to %s failed (%s); retrying", attempt, attempts, url, last_error)
                self._sleep(RETRY_BACKOFF_S * attempt)
        raise last_error

    def compress(self, prompt_text, target_kappa):
        """Compress a prompt towards target_kappa.

        A target of 1 returns the prompt unchanged without a network call.
        Results outside +/-20% of the target are logged and flagged, not rejected.
        """
        if not prompt_text or not prompt_text.strip():
            raise ValueError("Cannot compress an empty prompt")
        if not 0.0 < target_kappa <= 1.0:
            raise ValueError(f"target_kappa must be in (0, 1], got {target_kappa!r}")
        if target_kappa >= 1.0:
            n = len(prompt_text.split())
            return CompressionResult(prompt_text, n, n, 1.0)

        body = self._post(self.cfg.compress_endpoint_url, {"text": prompt_text, "target_ratio": target_kappa})
        try:
            text = body["text"]
            original = int(body["original_tokens"])
            compressed = int(body["compressed_tokens"])
        except (KeyError, TypeError, ValueError) as e:
            raise BridgeResponseError(f"Malformed /compress response: {body!r}") from e
        if not isinstance(text, str) or original < 1 or not 0 < compressed <= original:
            raise BridgeResponseError(f"Inconsistent /compress response: {body!r}")

        achieved = compressed / original
        within = abs(achieved - target_kappa) <= KAPPA_BAND * target_kappa
        if not within:
            logger.warning("Achieved compression %.4f is outside +/-%d%% of target %.4f",
                           achieved, int(KAPPA_BAND * 100), target_kappa)
        return CompressionResult(text, original, compressed, achieved, within)

    def score_similarity(self, text_a, text_b):
        """Similarity in [0, 1]; out-of-range server scores are clamped with a warning."""
        if not text_a or not text_b:
            raise ValueError("Similarity needs two non-empty texts")
        body = self._post(self.cfg.score_endpoint_url, {"a": text_a, "b": text_b})
        try:
            score = float(body["score"])
        except (KeyError, TypeError, ValueError) as e:
            raise BridgeResponseError(f"Malformed /score response: {body!r}") from e
        if math.isnan(score):
            raise BridgeResponseError("Server returned NaN score")
        if not 0.0 <= score <= 1.0:
            clamped = min(max(score, 0.0), 1.0)
            logger.warning("Similarity score %r out of range; clamped to %r", score, clamped)
            score = clamped
        return score

    def close(self):
        self.session.close()


class BridgeFidelityScorer:
    """Fidelity from real compression and similarity scores.

    f1 compares the original and compressed prompt, f3 compares the response to
    the compressed prompt with the caller's reference response, and f2 uses the
    achieved ratio with the analytic completeness term. Results are cached per
    target ratio, so the service sees one compression per level.

    Args:
        bridge: LLMBridge
        prompt_text: Original prompt
        reference_response: Gold response to the original prompt
        responder: Callable(prompt_text) -> response text from the target LLM
        weights: FidelityWeights
        cfg: FidelityModelConfig for the f2 term
    """

    def __init__(self, bridge, prompt_text, reference_response, responder, weights=None, cfg=None):
        if not reference_response:
            raise ValueError("A reference response is required for the understanding score")
        self.bridge = bridge
        self.prompt_text = prompt_text
        self.reference_response = reference_response
        self.responder = responder
        self.weights = weights or FidelityWeights()
        self.cfg = cfg or FidelityModelConfig()
        self._cache = {}

    def _semantic(self, kappa):
        if kappa not in self._cache:
            result = self.bridge.compress(self.prompt_text, kappa)
            f1 = 1.0 if kappa >= 1.0 else self.bridge.score_similarity(self.prompt_text, result.compressed_text)
            response = self.responder(result.compressed_text)
            f3 = self.bridge.score_similarity(response, self.reference_response)
            self._cache[kappa] = (result, f1, f3)
        return self._cache[kappa]

    def score(self, kappa, ber):
        result, f1, f3 = self._semantic(kappa)
        f2 = token_retention(result.achieved_kappa, self.cfg) * (1.0 - ber)
        return combine(f1, f2, f3, self.weights)
