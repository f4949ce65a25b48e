"""API-facing value types and the session abstraction extraction runs on.

A session knows the advertised capabilities of one endpoint (vocabulary
size, ``k_max``, ``beta_max``), counts real round-trips and memoises
responses keyed by the canonical request JSON.  Concrete sessions only
implement ``_send``.
"""

from __future__ import annotations

import json
import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .errors import CapabilityMismatch, ProtocolError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Capabilities:
    v: int
    k_max: int
    beta_max: float
    stochastic: bool = False

    def to_dict(self):
        return {"v": self.v, "k_max": self.k_max, "beta_max": float(self.beta_max),
                "stochastic": self.stochastic}

    @classmethod
    def from_dict(cls, data):
        return cls(int(data["v"]), int(data["k_max"]), float(data["beta_max"]),
                   bool(data.get("stochastic", False)))


@dataclass(frozen=True)
class TopKResponse:
    """Top-k (token, logprob) pairs of a possibly biased distribution."""

    pairs: tuple
    replica_hint: int | None = None
    raw: str | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        pairs = tuple((int(t), float(lp)) for t, lp in self.pairs)
        object.__setattr__(self, "pairs", pairs)
        tokens = [t for t, _ in pairs]
        if len(set(tokens)) != len(tokens):
            raise ProtocolError(f"duplicate token ids in response: {tokens}")
        for t, lp in pairs:
            if not math.isfinite(lp) or lp > 0:
                raise ProtocolError(f"invalid logprob {lp!r} for token {t}")
        if any(a[1] < b[1] for a, b in zip(pairs, pairs[1:])):
            raise ProtocolError("logprobs are not sorted in descending order")

    @property
    def tokens(self):
        return [t for t, _ in self.pairs]

    def logprobs(self):
        return dict(self.pairs)

    def to_wire(self, model_id=""):
        body = {"model_id": model_id,
                "top_logprobs": [{"token": t, "logprob": lp} for t, lp in self.pairs]}
        if self.replica_hint is not None:
            body["replica_hint"] = self.replica_hint
        return body

    @classmethod
    def from_wire(cls, body, raw=None):
        try:
            pairs = [(entry["token"], entry["logprob"]) for entry in body["top_logprobs"]]
        except (KeyError, TypeError) as exc:
            raise ProtocolError(f"malformed query response: {exc}") from exc
        return cls(pairs, body.get("replica_hint"), raw)


def normalize_bias(bias):
    """Bias map with int keys and float values, sorted by token id."""
    return {int(t): float(b) for t, b in sorted((bias or {}).items(), key=lambda kv: int(kv[0]))}


def request_key(context, bias, k):
    """Canonical JSON of a query; doubles as the cache key and the wire body."""
    return json.dumps({"context": context,
                       "logit_bias": {str(t): b for t, b in normalize_bias(bias).items()},
                       "top_logprobs": int(k)},
                      separators=(",", ":"), ensure_ascii=False)


class ApiSession:
    """Base class: cache, call counter and capability checks."""

    def __init__(self, capabilities, *, cache=True, concurrency=1, model_id=""):
        self.capabilities = capabilities
        self.model_id = model_id
        # a stochastic endpoint must be re-asked every time
        self.cache_enabled = bool(cache) and not capabilities.stochastic
        self.concurrency = max(1, int(concurrency))
        self.call_count = 0
        self.cache_hits = 0
        self._cache = {}
        self._lock = threading.Lock()

    @property
    def v(self):
        return self.capabilities.v

    @property
    def k_max(self):
        return self.capabilities.k_max

    @property
    def beta_max(self):
        return self.capabilities.beta_max

    def _send(self, context, bias, k):
        raise NotImplementedError

    def check_request(self, bias, k):
        if not 1 <= k <= self.k_max:
            raise CapabilityMismatch(f"k={k} outside the advertised range 1..{self.k_max}")
        if len(bias) > self.k_max:
            raise CapabilityMismatch(f"{len(bias)} biased tokens exceed k_max={self.k_max}")
        for t, b in bias.items():
            if abs(b) > self.beta_max:
                raise CapabilityMismatch(f"bias {b} on token {t} exceeds beta_max={self.beta_max}")
            if not 0 <= t < self.v:
                raise CapabilityMismatch(f"token id {t} outside vocabulary of size {self.v}")

    def query(self, context, bias=None, k=None):
        bias = normalize_bias(bias)
        k = self.k_max if k is None else int(k)
        self.check_request(bias, k)
        key = request_key(context, bias, k) if self.cache_enabled else None
        if key is not None:
            with self._lock:
                hit = self._cache.get(key)
                if hit is not None:
                    self.cache_hits += 1
                    return hit
        response = self._send(context, bias, k)
        with self._lock:
            self.call_count += 1
            if key is not None:
                self._cache.setdefault(key, response)
                response = self._cache[key]
        return response

    def query_many(self, requests):
        """Run ``(context, bias, k)`` requests, concurrently if configured.

        Results come back in request order.
        """
        requests = list(requests)
        if self.concurrency == 1 or len(requests) < 2:
            return [self.query(*r) for r in requests]
        with ThreadPoolExecutor(max_workers=self.concurrency) as pool:
            return list(pool.map(lambda r: self.query(*r), requests))

    def clear_cache(self):
        with self._lock:
            self._cache.clear()

    def telemetry(self):
        return {"model_id": self.model_id, "call_count": self.call_count,
                "cache_hits": self.cache_hits, **self.capabilities.to_dict()}


class InProcessSession(ApiSession):
    """Session talking directly to a :class:`~llmimage.mock.MockModel`."""

    def __init__(self, model, *, cache=True, concurrency=1, session_id="default",
                 echo_replica=False):
        super().__init__(model.capabilities, cache=cache, concurrency=concurrency,
                         model_id=model.spec.model_id)
        self.model = model
        self.session_id = session_id
        self.echo_replica = echo_replica

    def _send(self, context, bias, k):
        return self.model.api_query(context, bias, k, session=self.session_id,
                                    echo_replica=self.echo_replica)
