"""Model images: collection, embedding size, fast extraction, attribution, audits.

An image is stored as a v x m matrix of clr-transformed full outputs.  All
rank and residual algebra happens on those columns; the orthonormal basis
of their span is derived lazily.
"""

from __future__ import annotations

import datetime as _dt
import enum
import functools
import hashlib
import itertools
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import extraction
from .algebra import (CLR_SUM_TOL, DEFAULT_RANK_TOL, SingularSpectrum, clr_from_logprobs,
                      column_space, log_softmax, lstsq_residual, numerical_rank, pivot_rows,
                      singular_spectrum, solve_image_coordinates)
from .errors import (DomainError, NoPlateau, OutOfImage, ShapeMismatch, SingularSystem,
                     ValidationError, VocabExhausted)

log = logging.getLogger(__name__)

OUT_OF_IMAGE_TOL = 1e-4


def prompts_digest(prompts):
    h = hashlib.sha256()
    for p in prompts:
        h.update(p.encode("utf-8"))
        h.update(b"\0")
    return h.hexdigest()


def utc_timestamp(when=None):
    when = when or _dt.datetime.now(_dt.timezone.utc)
    return when.strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass(frozen=True)
class ModelImage:
    matrix: np.ndarray
    prompts: tuple
    d_estimate: int | None = None
    source_id: str = ""
    created_at: str = ""
    tolerance: float = DEFAULT_RANK_TOL
    spectrum: SingularSpectrum | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        matrix = np.array(self.matrix, dtype=np.float64)
        if matrix.ndim != 2:
            raise ShapeMismatch(f"image matrix must be 2-D, got {matrix.shape}")
        matrix.flags.writeable = False
        object.__setattr__(self, "matrix", matrix)
        object.__setattr__(self, "prompts", tuple(self.prompts))
        if len(self.prompts) != matrix.shape[1]:
            raise ShapeMismatch(f"{len(self.prompts)} prompts for {matrix.shape[1]} columns")
        sums = np.abs(matrix.sum(axis=0))
        if sums.size and sums.max() > CLR_SUM_TOL:
            raise DomainError(f"image columns must sum to 0 (worst {sums.max():.3g})")
        spectrum = self.spectrum or singular_spectrum(matrix)
        object.__setattr__(self, "spectrum", spectrum)
        rank = spectrum.rank(self.tolerance)
        if self.d_estimate is None:
            object.__setattr__(self, "d_estimate", rank)
        elif rank != self.d_estimate:
            raise ValidationError(f"d_estimate={self.d_estimate} but the matrix has rank {rank}")
        if matrix.shape[1] < self.d_estimate:
            raise ValidationError("an image needs at least d_estimate columns")

    @property
    def v(self):
        return self.matrix.shape[0]

    @property
    def m(self):
        return self.matrix.shape[1]

    @functools.cached_property
    def basis(self):
        """Orthonormal v x d basis of the image."""
        return column_space(self.matrix, rank=self.d_estimate)

    @functools.cached_property
    def _pivot_cache(self):
        return {}

    def pivots(self, reference, exclude=()):
        """Token rows giving a well-conditioned coordinate solve against ``reference``."""
        key = (reference, tuple(sorted(exclude)))
        if key not in self._pivot_cache:
            shifted = self.basis - self.basis[reference]
            self._pivot_cache[key] = pivot_rows(shifted, self.d_estimate,
                                                exclude=(reference, *exclude))
        return self._pivot_cache[key]

    def column(self, prompt):
        return self.matrix[:, self.prompts.index(prompt)]

    def probabilities(self):
        return np.exp(log_softmax(self.matrix))

    def leverage(self):
        """Per-column leverage inside the top-d subspace; corrupted columns stand out."""
        from .algebra import leverage_scores
        return leverage_scores(self.matrix, self.d_estimate)


def single_token_prompts(v):
    """One unique one-token prompt per vocabulary entry."""
    return (f"<tok{i}>" for i in range(v))


# -- collection -------------------------------------------------------------------

def _logprobs(session, context, strategy, tokens, beta):
    if callable(strategy):
        return np.asarray(strategy(session, context), dtype=np.float64)
    if strategy == "stable":
        return extraction.extract_stable_logprobs(session, context, beta=beta, tokens=tokens)
    if strategy == "fast":
        return extraction.extract_fast_logprobs(session, context, beta=beta, tokens=tokens)
    if strategy == "logprob-free":
        if tokens is not None:
            raise ValidationError("the logprob-free strategy only extracts full outputs")
        return extraction.extract_logprob_free_logprobs(session, context, beta=beta)
    if strategy == "stochastic":
        result = extraction.extract_stochastic(session, context, beta=beta, tokens=tokens)
        return np.log(result.first()[1])
    raise ValidationError(f"unknown extraction strategy {strategy!r}")


def collect_outputs(session, contexts, strategy="stable", *, tokens=None, beta=None):
    """clr columns (centred over the extracted tokens) for each context."""
    cols = [clr_from_logprobs(_logprobs(session, c, strategy, tokens, beta)) for c in contexts]
    return np.column_stack(cols) if cols else np.zeros((session.v if tokens is None else len(tokens), 0))


def collect_until_plateau(session, strategy="stable", *, margin=100, batch=64, contexts=None,
                          tokens=None, tolerance=DEFAULT_RANK_TOL, beta=None):
    """Add outputs until the rank has stalled for ``margin`` outputs.

    Rank is re-checked after every ``batch`` outputs.  Returns
    ``(matrix, prompts, rank, keep)``: all extracted columns, and the length
    ``rank + margin`` of the prefix the plateau was confirmed on.
    """
    if margin < 1 or batch < 1:
        raise ValidationError("margin and batch must be positive")
    contexts = iter(single_token_prompts(session.v) if contexts is None else contexts)
    cols, prompts = [], []
    while True:
        chunk = list(itertools.islice(contexts, batch))
        if not chunk:
            raise VocabExhausted(
                f"ran out of unique prompts after {len(cols)} outputs without the rank "
                "plateauing; extraction may be corrupted")
        for c in chunk:
            cols.append(clr_from_logprobs(_logprobs(session, c, strategy, tokens, beta)))
            prompts.append(c)
        M = np.column_stack(cols)
        rank, _ = numerical_rank(M, tolerance)
        log.info("image rank check", extra={"event": "rank_check", "columns": len(cols),
                                             "rank": rank, "calls": session.call_count})
        if len(cols) - rank >= margin:
            keep = rank + margin
            if numerical_rank(M[:, :keep], tolerance)[0] == rank:
                return M, prompts, rank, keep


def collect_image(session, strategy="stable", *, margin=100, batch=64, contexts=None,
                  extra_columns=0, tolerance=DEFAULT_RANK_TOL, source_id=None,
                  created_at=None, beta=None):
    """Collect clr outputs until the rank plateaus and wrap them as an image.

    The image keeps ``rank + margin`` columns, plus ``extra_columns`` more
    when over-collection is requested.
    """
    contexts = iter(single_token_prompts(session.v) if contexts is None else contexts)
    M, prompts, rank, keep = collect_until_plateau(
        session, strategy, margin=margin, batch=batch, contexts=contexts,
        tolerance=tolerance, beta=beta)
    keep += extra_columns
    if keep > M.shape[1]:
        more = list(itertools.islice(contexts, keep - M.shape[1]))
        M = np.column_stack([M, collect_outputs(session, more, strategy, beta=beta)])
        prompts = prompts + more
    M, prompts = M[:, :keep], prompts[:keep]
    if extra_columns:
        rank = numerical_rank(M, tolerance)[0]
    return ModelImage(M, prompts, rank, source_id or session.model_id,
                      created_at or utc_timestamp(), tolerance)


@dataclass(frozen=True)
class EmbeddingSizeEstimate:
    d: int
    spectrum: SingularSpectrum
    log_gap_index: int
    drop: float

    def to_dict(self):
        return {"d": self.d, "log_gap_index": self.log_gap_index, "drop": self.drop,
                "rows": self.spectrum.shape[0], "columns": self.spectrum.shape[1]}


def estimate_embedding_size(source, tolerance=DEFAULT_RANK_TOL, *, min_drop=1e-3):
    """Numerical rank of an image or raw clr output matrix.

    ``drop`` is sigma_{d+1} / sigma_d (0 when the spectrum ends at d).  A
    :class:`NoPlateau` warning fires when there is no drop of at least
    three orders of magnitude, meaning more outputs are needed.
    """
    matrix = source.matrix if isinstance(source, ModelImage) else source
    d, spectrum = numerical_rank(matrix, tolerance)
    values = spectrum.values
    if d == 0:
        drop = 0.0
    elif d < values.size:
        drop = float(values[d] / values[d - 1])
    else:
        drop = 1.0
    if drop > min_drop:
        warnings.warn(f"no clear singular value drop (sigma ratio {drop:.3g} at index {d}); "
                      "collect more outputs", NoPlateau, stacklevel=2)
    return EmbeddingSizeEstimate(d, spectrum, spectrum.largest_log_gap(), drop)


def discover_embedding_size(session, tokens, *, margin=100, batch=64, contexts=None,
                            strategy="stable", tolerance=DEFAULT_RANK_TOL, beta=None):
    """Embedding size from outputs restricted to a token subset.

    Restricting rows to ``tokens`` (and centring over them) keeps the rank at
    d while cutting calls per output to about ``len(tokens)/(k-1)``.
    """
    tokens = list(tokens)
    M, _, _, keep = collect_until_plateau(session, strategy, margin=margin, batch=batch,
                                          contexts=contexts, tokens=tokens,
                                          tolerance=tolerance, beta=beta)
    return estimate_embedding_size(M[:, :keep], tolerance), M[:, :keep]


# -- fast extraction through the image ---------------------------------------------

def fast_extract_logprobs(image, session, context, *, beta=None):
    if session.v != image.v:
        raise ShapeMismatch(f"image has v={image.v}, session has v={session.v}")
    first = extraction.top_response(session, context)
    top, top_lp = first.pairs[0]
    reference = (top, top_lp)
    pivots = image.pivots(top)
    observed = dict(first.pairs)
    tried = []
    for attempt in range(2):
        lp = extraction.extract_stable_logprobs(session, context, beta=beta, tokens=pivots,
                                                reference=reference)
        observed.update(zip(pivots.tolist(), lp))
        tried.extend(pivots.tolist())
        rows = [t for t in tried]
        A = image.basis[rows] - image.basis[top]
        y = np.array([observed[t] for t in rows]) - top_lp
        try:
            if attempt == 0:
                x = solve_image_coordinates(A, y)
            else:
                x, *_ = np.linalg.lstsq(A, y, rcond=None)
            break
        except SingularSystem:
            if attempt:
                raise
            log.warning("pivot block ill-conditioned; re-pivoting", extra={"event": "repivot"})
            pivots = image.pivots(top, exclude=tried)
    logp = log_softmax(image.basis @ x)
    tokens = np.fromiter(observed.keys(), dtype=np.intp)
    gap = float(np.max(np.abs(logp[tokens] - np.fromiter(observed.values(), dtype=np.float64))))
    if gap > OUT_OF_IMAGE_TOL:
        raise OutOfImage(f"reconstruction misses observed log-probabilities by {gap:.3g}; "
                         "the model has likely changed since the image was collected",
                         discrepancy=gap)
    return logp


def fast_extract(image, session, context, *, beta=None):
    """Full output from the image plus ``1 + ceil(d/(k-1))`` calls."""
    return np.exp(fast_extract_logprobs(image, session, context, beta=beta))


# -- attribution and audits ---------------------------------------------------------

@dataclass(frozen=True)
class AttributionReport:
    residuals: tuple            # ((source_id, residual), ...) ascending
    best_match: str | None
    margin: float

    def to_rows(self):
        return [{"source_id": s, "residual": r} for s, r in self.residuals]

    def to_dict(self):
        return {"best_match": self.best_match, "margin": self.margin,
                "residuals": self.to_rows()}


def attribute(candidates, output, *, rel_threshold=1e-6, margin_min=100.0):
    """Which candidate image contains ``output`` (a clr vector)?"""
    output = np.asarray(output, dtype=np.float64)
    scored = []
    for image in candidates:
        if image.v != output.shape[0]:
            raise ShapeMismatch(f"image {image.source_id!r} has v={image.v}, output has "
                                f"{output.shape[0]} entries")
        scored.append((image.source_id, lstsq_residual(image.basis, output)))
    scored.sort(key=lambda sr: sr[1])
    if not scored:
        return AttributionReport((), None, float("nan"))
    best = scored[0][1]
    if len(scored) == 1:
        margin = float("inf")
    else:
        margin = scored[1][1] / best if best > 0 else float("inf")
    norm = np.linalg.norm(output)
    match = scored[0][0] if best < rel_threshold * norm and margin > margin_min else None
    return AttributionReport(tuple(scored), match, float(margin))


class ChangeKind(str, enum.Enum):
    NONE = "none"
    LOW_RANK = "low_rank"
    FULL = "full"


@dataclass(frozen=True)
class ImageChange:
    kind: ChangeKind
    rank_delta: int = 0
    union_rank: int = 0

    def __str__(self):
        return f"low_rank({self.rank_delta})" if self.kind is ChangeKind.LOW_RANK else self.kind.value


class Classification(str, enum.Enum):
    NO_UPDATE = "no_update"
    HIDDEN_PROMPT_OR_PARTIAL_FINETUNE = "hidden_prompt_or_partial_finetune"
    LORA_UPDATE = "lora_update"
    FULL_FINETUNE = "full_finetune"


def gap_guard(d):
    return max(4, d // 16)


def compare_images(a, b, tolerance=DEFAULT_RANK_TOL):
    """Rank of the union of two images, read as none / low-rank / full change."""
    if a.v != b.v:
        raise ShapeMismatch(f"images have different vocabularies ({a.v} vs {b.v})")
    d = a.d_estimate
    if b.d_estimate != d:
        return ImageChange(ChangeKind.FULL, abs(b.d_estimate - d), max(a.d_estimate, b.d_estimate))
    union, _ = numerical_rank(np.hstack([a.basis, b.basis]), tolerance)
    if union <= d:
        return ImageChange(ChangeKind.NONE, 0, union)
    if union < 2 * d - gap_guard(d):
        return ImageChange(ChangeKind.LOW_RANK, union - d, union)
    return ImageChange(ChangeKind.FULL, union - d, union)


def classify_update(logit_change, image_change):
    kind = image_change.kind if isinstance(image_change, ImageChange) else ChangeKind(image_change)
    if kind is ChangeKind.LOW_RANK:
        return Classification.LORA_UPDATE
    if kind is ChangeKind.FULL:
        return Classification.FULL_FINETUNE
    if logit_change:
        return Classification.HIDDEN_PROMPT_OR_PARTIAL_FINETUNE
    return Classification.NO_UPDATE


def logit_change(outputs_a, outputs_b, tol=1e-6):
    """Do paired clr outputs (columns) differ anywhere by more than ``tol``?"""
    outputs_a = np.asarray(outputs_a, dtype=np.float64)
    outputs_b = np.asarray(outputs_b, dtype=np.float64)
    if outputs_a.shape != outputs_b.shape:
        raise ShapeMismatch(f"probe outputs differ in shape: {outputs_a.shape} vs {outputs_b.shape}")
    if outputs_a.size == 0:
        raise ValidationError("no probe outputs to compare")
    return bool(np.max(np.abs(outputs_a - outputs_b)) > tol)


def shared_probe_outputs(a, b, probes=None):
    """Stored columns of both images for the given (default: all shared) prompts."""
    if probes is None:
        probes = [p for p in a.prompts if p in set(b.prompts)]
    missing = [p for p in probes if p not in a.prompts or p not in b.prompts]
    if missing:
        raise ValidationError(f"probe contexts missing from an image: {missing[:5]}")
    cols_a = np.column_stack([a.column(p) for p in probes]) if probes else np.zeros((a.v, 0))
    cols_b = np.column_stack([b.column(p) for p in probes]) if probes else np.zeros((b.v, 0))
    return cols_a, cols_b


@dataclass(frozen=True)
class UpdateReport:
    logit_change: bool
    image_change: ImageChange
    classification: Classification

    def to_dict(self):
        return {"logit_change": self.logit_change, "image_change": str(self.image_change),
                "rank_delta": self.image_change.rank_delta,
                "union_rank": self.image_change.union_rank,
                "classification": self.classification.value}


def audit_update(a, b, *, probes=None, probe_outputs=None, tol=1e-6,
                 tolerance=DEFAULT_RANK_TOL):
    """Verdict on how model ``b`` differs from model ``a``.

    Logit change is judged on ``probe_outputs`` (pair of clr matrices) if
    given, otherwise on the columns both images stored for shared prompts.
    """
    outs = probe_outputs if probe_outputs is not None else shared_probe_outputs(a, b, probes)
    changed = logit_change(*outs, tol=tol)
    change = compare_images(a, b, tolerance)
    return UpdateReport(changed, change, classify_update(changed, change))
