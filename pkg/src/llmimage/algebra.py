"""Numerical kernel: simplex transforms, spectra and small linear solves.

Vectors are plain 1-D ``float64`` numpy arrays.  The ``prob_vector``,
``logit_vector`` and ``clr_vector`` helpers validate and freeze them; the
transforms accept anything array-like and validate on entry.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import DomainError, ShapeMismatch, SingularSystem

PROB_SUM_TOL = 1e-9
CLR_SUM_TOL = 1e-6
DEFAULT_RANK_TOL = 1e-6
PROB_FLOOR = 1e-300
MAX_CONDITION = 1e12


def _frozen(x):
    x = np.array(x, dtype=np.float64)
    x.flags.writeable = False
    return x


def prob_vector(values):
    """Validate a distribution over ``v >= 2`` tokens; zeros are rejected."""
    p = np.asarray(values, dtype=np.float64)
    if p.ndim != 1 or p.size < 2:
        raise ShapeMismatch(f"probability vector must be 1-D with v >= 2, got shape {p.shape}")
    if not np.all(np.isfinite(p)) or np.any(p <= 0):
        raise DomainError("probability vector entries must be finite and strictly positive")
    if abs(p.sum() - 1.0) > PROB_SUM_TOL:
        raise DomainError(f"probabilities sum to {p.sum():.17g}, not 1")
    return _frozen(p)


def logit_vector(values):
    l = np.asarray(values, dtype=np.float64)
    if l.ndim != 1 or l.size < 2:
        raise ShapeMismatch(f"logit vector must be 1-D with v >= 2, got shape {l.shape}")
    if not np.all(np.isfinite(l)):
        raise DomainError("logits must be finite")
    return _frozen(l)


def clr_vector(values):
    c = np.asarray(values, dtype=np.float64)
    if c.ndim != 1:
        raise ShapeMismatch(f"clr vector must be 1-D, got shape {c.shape}")
    if abs(c.sum()) > CLR_SUM_TOL:
        raise DomainError(f"clr entries sum to {c.sum():.3g}, not 0")
    return _frozen(c)


def clamp_probabilities(p, floor=PROB_FLOOR):
    """Raise entries below ``floor`` to ``floor``; returns (array, n_clamped)."""
    p = np.asarray(p, dtype=np.float64)
    low = p < floor
    return np.where(low, floor, p), int(low.sum())


# -- transforms -----------------------------------------------------------------

def log_softmax(logits):
    l = np.asarray(logits, dtype=np.float64)
    shifted = l - l.max(axis=0)
    return shifted - np.log(np.exp(shifted).sum(axis=0))


def softmax(logits):
    """Softmax along axis 0 (columns are distributions for 2-D input)."""
    l = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(l)):
        raise DomainError("logits must be finite")
    e = np.exp(l - l.max(axis=0))
    return e / e.sum(axis=0)


def _positive(p):
    p = np.asarray(p, dtype=np.float64)
    if np.any(~(p > 0)):
        raise DomainError("log-ratio transforms need strictly positive probabilities")
    return p


def clr(p):
    """Centred log-ratio along axis 0.  Inverse of ``softmax`` on the zero-sum plane."""
    logp = np.log(_positive(p))
    return logp - logp.mean(axis=0)


def clr_from_logprobs(logp):
    logp = np.asarray(logp, dtype=np.float64)
    return logp - logp.mean(axis=0)


def alr(p):
    """Log-ratios of entries 2..v against the first entry."""
    logp = np.log(_positive(p))
    return logp[1:] - logp[0]


def alr_inverse(x):
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DomainError("alr coordinates must be finite")
    full = np.concatenate([np.zeros((1,) + x.shape[1:]), x], axis=0)
    # normalising through log-sum-exp keeps (700, 0) and friends finite
    return np.exp(full - np.logaddexp.reduce(full, axis=0))


# -- spectra ----------------------------------------------------------------------

@dataclass(frozen=True)
class SingularSpectrum:
    values: np.ndarray
    shape: tuple

    def __post_init__(self):
        vals = _frozen(self.values)
        if vals.size != min(self.shape):
            raise ShapeMismatch("spectrum length must equal min(rows, cols)")
        if np.any(np.diff(vals) > 0) or np.any(vals < 0):
            raise DomainError("singular values must be non-negative and non-increasing")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))

    def __len__(self):
        return self.values.size

    def relative(self):
        top = self.values[0] if self.values.size and self.values[0] > 0 else 1.0
        return self.values / top

    def rank(self, relative_tol=DEFAULT_RANK_TOL):
        if not self.values.size or self.values[0] == 0:
            return 0
        return int(np.count_nonzero(self.relative() > relative_tol))

    def largest_log_gap(self):
        """Index after which the spectrum falls the most (in log scale).

        Returned as a count, so it is directly comparable with ``rank``.
        """
        if self.values.size < 2 or self.values[0] == 0:
            return int(self.values.size > 0 and self.values[0] > 0)
        logs = np.log(np.maximum(self.values, self.values[0] * 1e-300))
        return int(np.argmax(logs[:-1] - logs[1:]) + 1)


def singular_spectrum(M):
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ShapeMismatch(f"expected a matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise DomainError("matrix entries must be finite")
    if M.size == 0:
        return SingularSpectrum(np.zeros(0), M.shape)
    sigma = np.linalg.svd(M, compute_uv=False)
    return SingularSpectrum(np.maximum.accumulate(sigma[::-1])[::-1], M.shape)


def numerical_rank(M, relative_tol=DEFAULT_RANK_TOL):
    """Count singular values above ``relative_tol * sigma_1``.

    An all-zero matrix has rank 0; the spectrum is returned either way.
    """
    if not 0 < relative_tol < 1:
        raise DomainError("relative_tol must lie in (0, 1)")
    spectrum = singular_spectrum(M)
    return spectrum.rank(relative_tol), spectrum


def column_space(M, rank=None, relative_tol=DEFAULT_RANK_TOL):
    """Orthonormal basis (v x rank) for the column span of ``M``."""
    U, s, _ = np.linalg.svd(np.asarray(M, dtype=np.float64), full_matrices=False)
    if rank is None:
        rank = int(np.count_nonzero(s > relative_tol * s[0])) if s.size and s[0] > 0 else 0
    return U[:, :rank]


def lstsq_residual(L, target):
    """Distance from ``target`` to the column span of ``L``."""
    L = np.asarray(L, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if L.ndim != 2 or target.ndim != 1 or L.shape[0] != target.shape[0]:
        raise ShapeMismatch(f"cannot regress a length-{target.shape} vector on a {L.shape} matrix")
    x, *_ = np.linalg.lstsq(L, target, rcond=None)
    return float(np.linalg.norm(L @ x - target))


def leverage_scores(M, rank=None):
    """Statistical leverage of each column of ``M`` within its top-``rank`` subspace."""
    _, s, Vt = np.linalg.svd(np.asarray(M, dtype=np.float64), full_matrices=False)
    if rank is None:
        rank = int(np.count_nonzero(s > DEFAULT_RANK_TOL * s[0]))
    return (Vt[:rank] ** 2).sum(axis=0)


def pivot_rows(B, count, exclude=()):
    """Pick ``count`` well-conditioned rows of ``B`` by column-pivoted QR.

    Rows in ``exclude`` are never chosen.
    """
    B = np.asarray(B, dtype=np.float64)
    candidates = np.setdiff1d(np.arange(B.shape[0]), np.asarray(list(exclude), dtype=int))
    if candidates.size < count:
        raise ShapeMismatch(f"need {count} pivot rows but only {candidates.size} are available")
    _, _, perm = scipy.linalg.qr(B[candidates].T, mode="economic", pivoting=True)
    return np.sort(candidates[perm[:count]])


def solve_image_coordinates(head, rhs):
    """Solve the square system ``head @ x = rhs`` with a conditioning guard."""
    head = np.atleast_2d(np.asarray(head, dtype=np.float64))
    rhs = np.asarray(rhs, dtype=np.float64).reshape(-1)
    d = head.shape[0]
    if head.shape != (d, d) or rhs.shape != (d,):
        raise ShapeMismatch(f"need a square system, got {head.shape} and {rhs.shape}")
    cond = np.linalg.cond(head)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise SingularSystem(f"pivot block is ill-conditioned (cond={cond:.3g})", condition=cond)
    x = scipy.linalg.solve(head, rhs)
    scale = max(np.linalg.norm(rhs), np.finfo(float).tiny)
    if np.linalg.norm(head @ x - rhs) > 1e-8 * scale:
        raise SingularSystem("solve did not reach the requested residual", condition=cond)
    return x
