"""Full-vocabulary extraction from top-k, logit-bias APIs.

Every strategy works in log space internally and returns probabilities for
the requested tokens (the whole vocabulary by default).  Batches are formed
from token ids in ascending order, so repeated runs issue identical requests
and hit the session cache.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import (BiasedSetMismatch, BudgetExhausted, DomainError, MissingTokens,
                     NumericalInstability, ReferenceTokensShifted, TopTokenDisplaced,
                     Unargmaxable, ValidationError)

log = logging.getLogger(__name__)

# The bias-summing strategy loses the unbiased tail mass to cancellation
# once exp(beta) dwarfs it, so it starts small and only escalates when the
# biased set fails to take over the top-k.
FAST_BETA = 20.0
TAIL_FLOOR = 1e-12
STABLE_MAX_RETRIES = 5
FINGERPRINT_TOL = 1e-9
DEFAULT_EPSILON = 1e-6


def _batches(tokens, size):
    tokens = sorted(int(t) for t in tokens)
    return [tokens[i:i + size] for i in range(0, len(tokens), size)]


def _token_list(session, tokens):
    if tokens is None:
        return list(range(session.v))
    tokens = [int(t) for t in tokens]
    if len(set(tokens)) != len(tokens):
        raise ValidationError("token list contains duplicates")
    return tokens


# -- unbiasing formulas ---------------------------------------------------------

def unbias_fast_log(biased_logprobs, beta):
    """Log-space unbiasing when every returned token carried bias ``beta``."""
    tokens = list(biased_logprobs)
    lp = np.array([biased_logprobs[t] for t in tokens], dtype=np.float64)
    log_mass = logsumexp(lp)
    tail = -math.expm1(log_mass) if log_mass < 0 else 0.0
    if tail <= 0 or tail < TAIL_FLOOR and beta > 0:
        raise NumericalInstability(
            f"unbiased tail mass {tail:.3g} lost to cancellation at beta={beta}; "
            "use the stable strategy or a smaller bias")
    log_denominator = np.logaddexp(beta + math.log(tail), log_mass)
    return {t: float(v) for t, v in zip(tokens, lp - log_denominator)}


def unbias_fast(biased, beta):
    """Recover unbiased probabilities of ``k`` tokens that were all biased by ``beta``."""
    if beta < 0:
        raise DomainError("beta must be non-negative")
    probs = {t: float(p) for t, p in biased.items()}
    if any(not p > 0 for p in probs.values()):
        raise DomainError("biased probabilities must be positive")
    total = sum(probs.values())
    if total >= 1.0 and beta > 0:
        raise NumericalInstability(f"biased mass {total!r} leaves no unbiased tail")
    tail = 1.0 - total
    denominator = math.exp(beta) * tail + total
    if denominator <= 0 or (beta > 0 and tail < TAIL_FLOOR):
        raise NumericalInstability(f"denominator {denominator:.3g} (tail {tail:.3g}) is unreliable")
    return {t: p / denominator for t, p in probs.items()}


def unbias_stable_log(logp_prime_i, logp_prime_ref, logp_ref, beta):
    return logp_prime_i - beta - logp_prime_ref + logp_ref


def unbias_stable(p_prime_i, p_prime_v, p_v, beta):
    """Unbiased probability of token i from one biased query that also shows the top token."""
    if min(p_prime_i, p_prime_v, p_v) <= 0:
        raise DomainError("probabilities must be positive")
    return math.exp(unbias_stable_log(math.log(p_prime_i), math.log(p_prime_v), math.log(p_v), beta))


def fingerprint(response, reference=None):
    """``log p_top1 - log p_top2`` read from a response; invariant to biasing other tokens."""
    lp = response.logprobs()
    if reference is None:
        if len(response.pairs) < 2:
            raise MissingTokens("need at least two entries to fingerprint an unbiased response")
        (_, a), (_, b) = response.pairs[:2]
        return a - b
    first, second = reference
    if first not in lp or second not in lp:
        raise MissingTokens(f"reference tokens {reference} absent from response {response.tokens}")
    return lp[first] - lp[second]


# -- deterministic strategies -----------------------------------------------------

def _top_token(session, context):
    response = session.query(context, {}, session.k_max)
    return response.pairs[0], response


def top_response(session, context):
    """The unbiased top-k response every stable-style extraction starts from."""
    return session.query(context, {}, session.k_max)


def extract_fast_logprobs(session, context, *, beta=None, tokens=None):
    tokens = _token_list(session, tokens)
    start_beta = min(session.beta_max, FAST_BETA) if beta is None else float(beta)
    batches = _batches(tokens, session.k_max)
    responses = session.query_many(
        [(context, {t: start_beta for t in b}, len(b)) for b in batches])
    out = {}
    for batch, response in zip(batches, responses):
        b = start_beta
        while set(response.tokens) != set(batch):
            if beta is not None or b >= session.beta_max:
                raise BiasedSetMismatch(
                    f"biased batch {batch} did not fill the top-{len(batch)} at beta={b}; "
                    "the logit range exceeds the bias cap",
                    batch=batch, returned=response.tokens)
            b = min(2 * b, session.beta_max)
            response = session.query(context, {t: b for t in batch}, len(batch))
        if len(batch) == session.v:
            # a uniform shift of every logit leaves the distribution unchanged
            out.update(response.logprobs())
        else:
            out.update(unbias_fast_log(response.logprobs(), b))
    log.debug("fast extraction done", extra={"event": "extract", "strategy": "fast",
                                             "calls": session.call_count})
    return np.array([out[t] for t in tokens])


def extract_fast(session, context, *, beta=None, tokens=None):
    """``ceil(v/k)`` calls; needs the logit range to stay below the bias used."""
    return np.exp(extract_fast_logprobs(session, context, beta=beta, tokens=tokens))


def extract_stable_logprobs(session, context, *, beta=None, tokens=None, reference=None):
    """Log-probabilities of ``tokens``; ``reference`` is a known ``(top, logprob)``."""
    if session.k_max < 2:
        raise ValidationError("the stable strategy needs k >= 2")
    tokens = _token_list(session, tokens)
    beta = session.beta_max if beta is None else float(beta)
    if reference is None:
        (top, top_lp), _ = _top_token(session, context)
    else:
        top, top_lp = reference
    out = {top: top_lp}
    batches = _batches([t for t in tokens if t != top], session.k_max - 1)
    responses = session.query_many(
        [(context, {t: beta for t in b}, len(b) + 1) for b in batches])
    for batch, response in zip(batches, responses):
        b = beta
        for _ in range(STABLE_MAX_RETRIES + 1):
            lp = response.logprobs()
            if top in lp:
                break
            b /= 2
            response = session.query(context, {t: b for t in batch}, len(batch) + 1)
        else:
            raise TopTokenDisplaced(
                f"top token {top} never survived biasing batch {batch} (last beta={b})")
        missing = [t for t in batch if t not in lp]
        if missing:
            raise BiasedSetMismatch(
                f"biased tokens {missing} fell out of the top-k at beta={b}",
                batch=batch, returned=response.tokens)
        for t in batch:
            out[t] = unbias_stable_log(lp[t], lp[top], top_lp, b)
    return np.array([out[t] for t in tokens])


def extract_stable(session, context, *, beta=None, tokens=None):
    """One unbiased call plus ``ceil((v-1)/(k-1))`` biased calls."""
    return np.exp(extract_stable_logprobs(session, context, beta=beta, tokens=tokens))


def extract_logprob_free_logprobs(session, context, *, epsilon=DEFAULT_EPSILON, beta=None,
                                  strict=True):
    beta = session.beta_max if beta is None else float(beta)
    if not 0 < epsilon < beta:
        raise ValidationError("epsilon must lie in (0, beta)")
    iterations = math.ceil(math.log2(beta / epsilon))
    top = session.query(context, {}, 1).pairs[0][0]
    active = [t for t in range(session.v) if t != top]
    lo = dict.fromkeys(active, 0.0)
    hi = dict.fromkeys(active, beta)
    won = dict.fromkeys(active, False)
    for _ in range(iterations):
        mids = {t: (lo[t] + hi[t]) / 2 for t in active}
        responses = session.query_many([(context, {t: mids[t]}, 1) for t in active])
        for t, response in zip(active, responses):
            if response.pairs[0][0] == t:
                hi[t], won[t] = mids[t], True
            else:
                lo[t] = mids[t]
    gaps = np.zeros(session.v)
    for t in active:
        gaps[t] = (lo[t] + hi[t]) / 2 if won[t] else beta
    logp = -gaps - logsumexp(-gaps)
    lost = [t for t in active if not won[t]]
    if lost and strict:
        raise Unargmaxable(
            f"{len(lost)} tokens never became argmax at bias {beta}; their gaps are "
            "lower bounds", tokens=lost, partial=np.exp(logp))
    return logp


def extract_logprob_free(session, context, *, epsilon=DEFAULT_EPSILON, beta=None, strict=True):
    """Binary search on the bias that makes each token the argmax (k=1 suffices).

    Uses ``1 + (v-1) * ceil(log2(beta/epsilon))`` calls.
    """
    return np.exp(extract_logprob_free_logprobs(session, context, epsilon=epsilon, beta=beta,
                                                strict=strict))


# -- stochastic APIs ------------------------------------------------------------------

@dataclass
class _Partial:
    fingerprint: float
    ratios: dict = field(default_factory=dict)   # token -> log(p_i / p_ref)
    batches: set = field(default_factory=set)
    observations: int = 0


@dataclass
class StochasticResult:
    """Outcome of a stochastic extraction.

    ``completed`` maps a fingerprint (rounded to 12 significant digits) to a
    full probability vector; ``coverage`` gives the completed fraction of
    batches for every fingerprint observed.
    """

    completed: dict
    coverage: dict
    reference: tuple
    calls: int
    degenerate: bool

    def first(self):
        key = next(iter(self.completed))
        return key, self.completed[key]


def _fp_key(fp):
    return float(f"{fp:.12g}")


def extract_stochastic(session, context, *, n_hint=None, budget=None, beta=None,
                       use_replica_hint=False, tokens=None):
    """Extract from an API answering from one of n hidden replicas per call.

    Each call biases ``k-2`` tokens and reads the two reference tokens
    (the unbiased top-2), whose log gap identifies the replica.  Ratios are
    accumulated per replica until one replica has every batch; its
    distribution is then normalised directly, so no per-replica unbiased
    call is needed.
    """
    k = session.k_max
    if k < 3:
        raise ValidationError("the stochastic strategy needs k >= 3")
    tokens = _token_list(session, tokens)
    beta = session.beta_max if beta is None else float(beta)
    n = n_hint or 1
    budget = budget or math.ceil(10 * n * session.v / (k - 2))

    first = session.query(context, {}, k)
    reference = (first.pairs[0][0], first.pairs[1][0])
    a, b = reference
    batches = _batches([t for t in range(session.v) if t not in reference], k - 2)
    partials = []
    hinted = {}

    def locate(fp, hint):
        if use_replica_hint:
            if hint is None:
                raise ValidationError("use_replica_hint needs a session that echoes replicas")
            if hint not in hinted:
                hinted[hint] = _Partial(fp)
                partials.append(hinted[hint])
            return hinted[hint]
        for p in partials:
            if abs(p.fingerprint - fp) <= FINGERPRINT_TOL:
                return p
        partials.append(_Partial(fp))
        return partials[-1]

    locate(fingerprint(first), first.replica_hint).observations += 1
    used = 1
    done = None
    while done is None:
        if used >= budget:
            raise BudgetExhausted(
                f"no fingerprint completed within {budget} calls",
                result=StochasticResult({}, _coverage(partials, len(batches)), reference,
                                        used, len(partials) == 1))
        j = _next_batch(partials, len(batches))
        batch = batches[j]
        response = session.query(context, {t: beta for t in batch}, len(batch) + 2)
        used += 1
        lp = response.logprobs()
        unbiased = [t for t in response.tokens if t not in batch]
        if set(unbiased) != {a, b}:
            if any(t not in lp for t in batch):
                raise BiasedSetMismatch(f"biased tokens fell out of the top-k at beta={beta}",
                                        batch=batch, returned=response.tokens)
            raise ReferenceTokensShifted(
                f"expected reference tokens {reference}, response shows {unbiased}")
        part = locate(lp[a] - lp[b], response.replica_hint)
        part.observations += 1
        if j not in part.batches:
            part.batches.add(j)
            for t in batch:
                part.ratios[t] = lp[t] - beta - lp[a]
            if len(part.batches) == len(batches):
                done = part

    log_ref = -np.logaddexp.reduce(
        np.array([0.0, -done.fingerprint] + list(done.ratios.values())))
    full = {a: log_ref, b: log_ref - done.fingerprint}
    full.update({t: log_ref + r for t, r in done.ratios.items()})
    probs = np.exp(np.array([full[t] for t in tokens]))
    log.info("stochastic extraction complete", extra={
        "event": "extract", "strategy": "stochastic", "calls": used,
        "fingerprints": len(partials)})
    return StochasticResult({_fp_key(done.fingerprint): probs},
                            _coverage(partials, len(batches)), reference, used,
                            len(partials) == 1)


def _coverage(partials, n_batches):
    return {_fp_key(p.fingerprint): len(p.batches) / max(n_batches, 1) for p in partials}


def _next_batch(partials, n_batches):
    """Missing batch of the leading replica that the most other replicas also lack."""
    if not partials:
        return 0
    leader = max(partials, key=lambda p: len(p.batches))
    best, best_score = None, -1
    for j in range(n_batches):
        if j in leader.batches:
            continue
        score = sum(j not in p.batches for p in partials)
        if score > best_score:
            best, best_score = j, score
    return best


# -- cost model ---------------------------------------------------------------------

# $5 per million calls reproduces the published image prices (16384, 410,
# 512, 2724 for a 133000-call rounding of the stochastic row).
PRICE_PER_CALL = 5e-6


@dataclass(frozen=True)
class CostEstimate:
    strategy: str
    complexity: str
    calls_per_output: float
    image_price_usd: float | None

    def __post_init__(self):
        if not self.calls_per_output > 0:
            raise ValidationError("calls_per_output must be positive")


def estimate_cost(v, k, d, n=4, beta_max=100.0, epsilon=DEFAULT_EPSILON,
                  price_per_call=PRICE_PER_CALL):
    """API calls per full output for each strategy, and the price of a d-output image."""
    for name, value in dict(v=v, k=k, d=d, n=n, beta_max=beta_max, epsilon=epsilon,
                            price_per_call=price_per_call).items():
        if not value > 0:
            raise ValidationError(f"{name} must be positive")
    rows = [
        ("logprob-free", "v log10(beta_max/eps)", v * math.log10(beta_max / epsilon)),
        ("fast", "v/k", v / k),
        ("stable", "v/(k-1)", v / (k - 1) if k > 1 else math.inf),
        ("stochastic", "nv/(k-2)", n * v / (k - 2) if k > 2 else math.inf),
    ]
    out = [CostEstimate(name, cx, calls, d * calls * price_per_call) for name, cx, calls in rows]
    image_calls = math.ceil(d / (k - 1)) + 1 if k > 1 else d + 1
    out.append(CostEstimate("image", "O(d): ceil(d/(k-1))+1", image_calls, None))
    return out
