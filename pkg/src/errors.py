"""
Exception hierarchy for the heterogeneous DW toolkit.

Every error carries the process exit code the command-line surface maps it to.
"""
from typing import Optional


class DWError(Exception):
    """
    Base class for all toolkit errors.
    """
    exit_code: int = 1


class ConfigError(DWError):
    """
    Unreadable or malformed configuration, or malformed command-line flags.
    """
    exit_code = 2


class ParameterError(ConfigError):
    """
    A model parameter lies outside its domain.
    """


class InvalidPairError(ParameterError):
    """
    An agent pair is not valid for the current number of agents.
    """


class ArtifactIOError(DWError):
    """
    An artifact could not be read or written.
    """
    exit_code = 3


class PreconditionError(DWError):
    """
    An operation was called outside its precondition.
    """
    exit_code = 4


class OracleBudgetError(PreconditionError):
    """
    The exhaustive oracle would need more paths than its budget allows.
    """
    def __init__(self, required: int, budget: int):
        """
        Initialize the error.

        Args:
            required: Number of pair sequences the enumeration would visit
            budget: Configured maximum number of paths
        """
        super().__init__(f"enumeration needs {required} paths, budget is {budget}")
        self.required = required
        self.budget = budget


class TraceMemoryError(PreconditionError):
    """
    A trace would exceed the configured memory cap.
    """
    def __init__(self, predicted_bytes: int, cap_bytes: int):
        super().__init__(
            f"trace needs about {predicted_bytes} bytes (cap {cap_bytes}); "
            f"increase thinning"
        )
        self.predicted_bytes = predicted_bytes
        self.cap_bytes = cap_bytes


class TheoremDomainError(DWError):
    """
    The weighting factor is below 1/2, where the control constructions fail.
    """
    exit_code = 5

    def __init__(self, mu: float, operation: Optional[str] = None):
        where = f" in {operation}" if operation else ""
        super().__init__(f"mu={mu!r}{where} requires mu in [1/2, 1)")
        self.mu = mu


class VerificationError(DWError):
    """
    A verifier found a violation.
    """
    exit_code = 6


class SynthesisError(DWError):
    """
    A synthesizer ran past its certified length bound.
    """
    exit_code = 1


class EnsembleCancelledError(DWError):
    """
    An ensemble was cancelled before every replica finished.
    """
    exit_code = 1

    def __init__(self, finished: int, total: int):
        super().__init__(f"ensemble cancelled after {finished} of {total} replicas")
        self.finished = finished
        self.total = total
