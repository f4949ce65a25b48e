"""Exception hierarchy shared by every layer of the toolkit.

Each class carries an ``exit_code`` so the command line front end can map
failures onto stable process exit statuses without a lookup table.
"""


class LLMImageError(Exception):
    exit_code = 1


class ValidationError(LLMImageError, ValueError):
    exit_code = 2


class NumericalError(LLMImageError, ArithmeticError):
    exit_code = 4


class ProtocolError(LLMImageError):
    """The API answered with something the algorithms cannot use."""

    exit_code = 3


# -- core algebra -----------------------------------------------------------

class DomainError(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class DegenerateInput(NumericalError):
    pass


class SingularSystem(NumericalError):
    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


# -- extraction ---------------------------------------------------------------

class NumericalInstability(NumericalError):
    pass


class BiasedSetMismatch(ProtocolError):
    def __init__(self, message, batch=None, returned=None):
        super().__init__(message)
        self.batch = batch
        self.returned = returned


class TopTokenDisplaced(ProtocolError):
    pass


class MissingTokens(ProtocolError):
    pass


class ReferenceTokensShifted(ProtocolError):
    """The top-2 reference tokens differ between stochastic replicas."""


class BudgetExhausted(LLMImageError):
    exit_code = 3

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class Unargmaxable(NumericalError):
    """Raised after a logprob-free extraction when some tokens never won.

    ``partial`` holds the reconstructed distribution with those tokens'
    gaps pinned at the bias cap (an upper bound on their probability).
    """

    def __init__(self, message, tokens=(), partial=None):
        super().__init__(message)
        self.tokens = tuple(tokens)
        self.partial = partial


# -- image operations ---------------------------------------------------------

class VocabExhausted(LLMImageError):
    exit_code = 4


class OutOfImage(NumericalError):
    def __init__(self, message, discrepancy=None):
        super().__init__(message)
        self.discrepancy = discrepancy


# -- mock model / transport ---------------------------------------------------

class UnknownReplica(ValidationError):
    pass


class BiasTooLarge(ValidationError):
    code = "bias_too_large"


class KTooLarge(ValidationError):
    code = "k_too_large"


class BadTokenId(ValidationError):
    code = "bad_token_id"


class BadRequest(ValidationError):
    code = "bad_request"


class CapabilityMismatch(ValidationError):
    pass


class BindFailure(LLMImageError):
    exit_code = 3


class AuthError(ProtocolError):
    pass


class TransportError(ProtocolError):
    pass


class NoPlateau(UserWarning):
    """The singular spectrum never drops far enough to pin down a rank."""
