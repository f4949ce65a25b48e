"""A simulated LLM with a softmax-bottleneck output layer.

The transformer is replaced by a keyed pseudo-random embedder: every
context string maps to a fixed unit vector in R^d (times ``logit_scale``),
which the v x d softmax matrix projects to logits.  All randomness comes
from Philox streams derived from ``SeedSequence(seed, spawn_key=...)`` so a
spec reproduces the same weights, embeddings and replica draws everywhere.

Stream layout (``spawn_key`` first element):

    1  softmax matrix W                 N(0, 1/d)
    2  replica perturbation r           N(0, (replica_noise/logit_scale)^2)
    3  context embedding                N(0, 1), normalised
    4  replica draw stream per session  uniform integers
    5  full finetune noise              N(0, finetune_noise^2)
    6  LoRA factors A (v x r), B (r x d)
    7  partial finetune embedding noise N(0, embedding_noise^2)

Reference values (numpy Philox): ``MockModelSpec(v=8, d=2, seed=0)`` has
``W[0] == [-0.6218..., -1.0440...]``; see ``tests/test_mock.py`` for the
frozen vectors.
"""

from __future__ import annotations

import dataclasses
import functools
import hashlib
import json
import re
import threading
from dataclasses import dataclass

import numpy as np

from .algebra import log_softmax
from .api import Capabilities, TopKResponse
from .errors import (BadRequest, BadTokenId, BiasTooLarge, KTooLarge, UnknownReplica,
                     ValidationError)

_W, _REPLICA, _EMBED, _DRAW, _FINETUNE, _LORA, _EMBED_NOISE = range(1, 8)


def _digest_words(text):
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=16).digest()
    return tuple(int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4))


def _rng(seed, *key):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=key)))


@dataclass(frozen=True)
class MockModelSpec:
    v: int = 1000
    d: int = 64
    seed: int = 0
    n_replicas: int = 1
    replica_noise: float = 1e-3
    k_max: int = 5
    beta_max: float = 100.0
    logit_scale: float = 8.0
    logit_offset: float = 0.0
    model_id: str = "mock"
    # update knobs used by checkpoint families; all off for a base model
    variant_seed: int = 0
    hidden_prefix: str = ""
    embedding_noise: float = 0.0
    finetune_noise: float = 0.0
    lora_rank: int = 0
    lora_scale: float = 1.0

    def __post_init__(self):
        if not 1 <= self.d < self.v:
            raise ValidationError(f"need 1 <= d < v, got d={self.d}, v={self.v}")
        if self.k_max < 1:
            raise ValidationError("k_max must be at least 1")
        if not self.beta_max > 0:
            raise ValidationError("beta_max must be positive")
        if self.n_replicas < 1:
            raise ValidationError("n_replicas must be at least 1")
        if self.replica_noise < 0 or self.embedding_noise < 0 or self.finetune_noise < 0:
            raise ValidationError("noise levels must be non-negative")
        if self.lora_rank < 0:
            raise ValidationError("lora_rank must be non-negative")

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValidationError(f"unknown mock config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        return dataclasses.asdict(self)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


class MockModel:
    """Ground-truth target: logits = (W + dW_replica) h(context)."""

    def __init__(self, spec=None, *, W=None, embed=None, cache_size=512):
        self.spec = spec or MockModelSpec()
        s = self.spec
        if W is None:
            W = _rng(s.seed, _W).normal(0.0, 1.0 / np.sqrt(s.d), size=(s.v, s.d))
            if s.finetune_noise:
                W = W + _rng(s.seed, _FINETUNE, s.variant_seed).normal(0.0, s.finetune_noise, size=W.shape)
            if s.lora_rank:
                g = _rng(s.seed, _LORA, s.variant_seed)
                A = g.normal(0.0, 1.0 / np.sqrt(s.lora_rank), size=(s.v, s.lora_rank))
                B = g.normal(0.0, s.lora_scale / np.sqrt(s.d), size=(s.lora_rank, s.d))
                W = W + A @ B
        W = np.array(W, dtype=np.float64)
        if W.shape != (s.v, s.d):
            raise ValidationError(f"W has shape {W.shape}, spec says {(s.v, s.d)}")
        W.flags.writeable = False
        self.W = W
        self._embed_override = embed
        if s.n_replicas > 1 and s.replica_noise > 0:
            std = s.replica_noise / s.logit_scale
            self.replica_deltas = [_rng(s.seed, _REPLICA, r).normal(0.0, std, size=W.shape)
                                   for r in range(s.n_replicas)]
        else:
            self.replica_deltas = [None] * s.n_replicas
        self._draws = {}
        self._draw_lock = threading.Lock()
        self._logits = functools.lru_cache(maxsize=cache_size)(self._compute_logits)

    @classmethod
    def from_arrays(cls, W, embeddings, **spec_fields):
        """Model with explicit weights; ``embeddings`` maps context -> h (or is callable)."""
        W = np.asarray(W, dtype=np.float64)
        spec = MockModelSpec(v=W.shape[0], d=W.shape[1], **spec_fields)
        return cls(spec, W=W, embed=embeddings)

    @property
    def capabilities(self):
        return Capabilities(self.spec.v, self.spec.k_max, self.spec.beta_max,
                            stochastic=self.spec.n_replicas > 1)

    def embedding(self, context):
        s = self.spec
        if self._embed_override is not None:
            source = self._embed_override
            h = source(context) if callable(source) else source[context]
            return np.asarray(h, dtype=np.float64)
        text = s.hidden_prefix + context
        h = _rng(s.seed, _EMBED, *_digest_words(text)).normal(size=s.d)
        h *= s.logit_scale / np.linalg.norm(h)
        if s.embedding_noise:
            h = h + _rng(s.seed, _EMBED_NOISE, s.variant_seed, *_digest_words(text)).normal(
                0.0, s.embedding_noise, size=s.d)
        return h

    def _check_replica(self, replica):
        if not 0 <= replica < self.spec.n_replicas:
            raise UnknownReplica(f"replica {replica} not in 0..{self.spec.n_replicas - 1}")

    def _compute_logits(self, context, replica):
        h = self.embedding(context)
        logits = self.W @ h
        delta = self.replica_deltas[replica]
        if delta is not None:
            logits = logits + delta @ h
        logits = logits + self.spec.logit_offset
        logits.flags.writeable = False
        return logits

    def full_logits(self, context, replica=0):
        self._check_replica(replica)
        return self._logits(context, replica)

    def oracle_distribution(self, context, replica=0):
        return np.exp(log_softmax(self.full_logits(context, replica)))

    def oracle_logprobs(self, context, replica=0):
        return log_softmax(self.full_logits(context, replica))

    def draw_replica(self, session="default"):
        n = self.spec.n_replicas
        if n == 1:
            return 0
        with self._draw_lock:
            stream = self._draws.get(session)
            if stream is None:
                stream = self._draws[session] = _rng(self.spec.seed, _DRAW, *_digest_words(session))
            return int(stream.integers(n))

    def validate_query(self, bias, k):
        s = self.spec
        if not 1 <= k <= s.k_max:
            raise KTooLarge(f"top_logprobs={k} outside 1..{s.k_max}")
        if len(bias) > s.k_max:
            raise BadRequest(f"{len(bias)} biased tokens exceed k_max={s.k_max}")
        for t, b in bias.items():
            if not 0 <= t < s.v:
                raise BadTokenId(f"token id {t} outside vocabulary of size {s.v}")
            if not np.isfinite(b) or abs(b) > s.beta_max:
                raise BiasTooLarge(f"bias {b} on token {t} exceeds beta_max={s.beta_max}")

    def api_query(self, context, bias=None, k=1, *, replica=None, session="default",
                  echo_replica=False):
        """Top-k logprobs of softmax(logits + bias); ties go to the lower token id."""
        bias = {int(t): float(b) for t, b in (bias or {}).items()}
        self.validate_query(bias, k)
        if replica is None:
            replica = self.draw_replica(session)
        logits = self.full_logits(context, replica)
        if bias:
            logits = logits.copy()
            idx = np.fromiter(bias.keys(), dtype=np.intp)
            logits[idx] += np.fromiter(bias.values(), dtype=np.float64)
        logp = log_softmax(logits)
        if k < logp.size:
            kth = np.partition(logp, logp.size - k)[logp.size - k]
            candidates = np.flatnonzero(logp >= kth)
        else:
            candidates = np.arange(logp.size)
        order = candidates[np.lexsort((candidates, -logp[candidates]))][:k]
        pairs = [(int(t), float(logp[t])) for t in order]
        return TopKResponse(pairs, replica if echo_replica else None)


_KIND = re.compile(r"^\s*(\w+)\s*(?:\((.*)\))?\s*$")


def parse_kind(kind):
    """``"lora(8)"`` -> ``("lora", "8")``; tuples pass through."""
    if isinstance(kind, tuple):
        return kind[0], (kind[1] if len(kind) > 1 else None)
    m = _KIND.match(kind)
    if not m:
        raise ValidationError(f"cannot parse checkpoint kind {kind!r}")
    return m.group(1), m.group(2)


def variant_spec(spec, kind, variant_seed=1):
    name, arg = parse_kind(kind)
    base = spec.replace(variant_seed=variant_seed)
    if name == "clone":
        return spec
    if name == "hidden_prompt":
        return base.replace(hidden_prefix=arg if arg is not None else "[hidden system prompt] ")
    if name == "partial_finetune":
        return base.replace(embedding_noise=float(arg) if arg else 1e-2)
    if name == "lora":
        return base.replace(lora_rank=int(arg) if arg else 8)
    if name == "full_finetune":
        return base.replace(finetune_noise=float(arg) if arg else 1e-2)
    raise ValidationError(f"unknown checkpoint kind {name!r}")


def make_checkpoint_family(spec, kinds):
    """One model per kind, each derived from ``spec``.

    Variants get distinct ``variant_seed`` values (their position, 1-based)
    so two entries of the same kind are different checkpoints.
    """
    models = []
    for i, kind in enumerate(kinds, start=1):
        vspec = variant_spec(spec, kind, variant_seed=i)
        models.append(MockModel(vspec.replace(model_id=f"{spec.model_id}/{i}:{parse_kind(kind)[0]}")))
    return models
