"""Recover and use the low-rank output space of top-k logprob language model APIs."""

from .algebra import alr, alr_inverse, clr, log_softmax, numerical_rank, softmax
from .api import ApiSession, Capabilities, InProcessSession, TopKResponse
from .extraction import (estimate_cost, extract_fast, extract_logprob_free, extract_stable,
                         extract_stochastic)
from .image import (ModelImage, attribute, audit_update, collect_image,
                    estimate_embedding_size, fast_extract)
from .mock import MockModel, MockModelSpec, make_checkpoint_family
from .transport import HttpSession, MockServer, OpenAICompatibleSession, connect, serve

__version__ = "0.1.0"

__all__ = [
    "ApiSession", "Capabilities", "HttpSession", "InProcessSession", "MockModel", "MockModelSpec",
    "MockServer", "OpenAICompatibleSession",
    "ModelImage", "TopKResponse", "alr", "alr_inverse", "attribute", "audit_update", "clr",
    "collect_image", "connect", "estimate_cost", "estimate_embedding_size", "extract_fast",
    "extract_logprob_free", "extract_stable", "extract_stochastic", "fast_extract",
    "log_softmax", "make_checkpoint_family", "numerical_rank", "serve", "softmax",
]
