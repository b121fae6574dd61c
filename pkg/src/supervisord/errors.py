"""Exception taxonomy shared across the engine.

Every failure surfaced to callers is a subclass of SupervisorError so that
the CLI can map error families to stable exit codes.
"""

from __future__ import annotations


class SupervisorError(Exception):
    """Base class for all engine errors."""


# --- state / serialization ---------------------------------------------------

class SizeExceeded(SupervisorError):
    """Inline attachment payload exceeds the configured serialization limit."""


class VersionMismatch(SupervisorError):
    """Serialized state carries an unknown version tag."""


class CorruptState(SupervisorError):
    """Serialized state is truncated or structurally invalid."""


# --- tool registry -----------------------------------------------------------

class DuplicateTool(SupervisorError):
    """A tool with the same name is already registered."""


class InvalidSpec(SupervisorError):
    """Tool specification violates its invariants (e.g. inverted latency bounds)."""


class UnknownTool(SupervisorError):
    """ToolId not present in the registry."""


class NoCapableTool(SupervisorError):
    """No registered tool covers the requirement.

    Carries the unmet requirement for diagnostics.
    """

    def __init__(self, message: str, requirement=None):
        super().__init__(message)
        self.requirement = requirement


# --- decomposition -----------------------------------------------------------

class UnreachableAttachment(SupervisorError):
    """URL validation failed on all tiers and no local fallback exists."""

    def __init__(self, message: str, failed_tier: str):
        super().__init__(message)
        self.failed_tier = failed_tier


# --- routing -----------------------------------------------------------------

class BudgetExceeded(SupervisorError):
    """Accumulating this invocation would push the session past its budget cap."""


# --- memory ------------------------------------------------------------------

class DimensionMismatch(SupervisorError):
    """Record embedding dimension differs from the store's configured dimension."""


class EmbeddingUnavailable(SupervisorError):
    """The embedding backend failed; caller may retry or skip storage."""


# --- scheduler / couplet -----------------------------------------------------

class UnplannableQuery(SupervisorError):
    """Graph construction failed because no tool covers a required step."""

    def __init__(self, message: str, requirement=None):
        super().__init__(message)
        self.requirement = requirement


class PipelineFailed(SupervisorError):
    """A node failed with no viable repair; carries partial results and trace."""

    def __init__(self, message: str, partial_results=None, trace=None):
        super().__init__(message)
        self.partial_results = partial_results or []
        self.trace = trace or []


class NodeFailure(SupervisorError):
    """A backend invocation failed; handled by the scheduler's repair path."""

    def __init__(self, message: str, retriable: bool = True):
        super().__init__(message)
        self.retriable = retriable


class AmbiguousIntent(SupervisorError):
    """Intent parsing could not produce a schema-valid perceptual task."""

    def __init__(self, message: str, missing: str = ""):
        super().__init__(message)
        self.missing = missing


class EvidenceTypeError(SupervisorError):
    """Raw payload kind does not match the task kind (programming error surface)."""


# --- harness -----------------------------------------------------------------

class IncomparableReports(SupervisorError):
    """Two metrics reports were produced over different workloads."""


class WorkloadSpecError(SupervisorError):
    """Workload spec file violates its schema; names the offending field."""

    def __init__(self, message: str, field_path: str = ""):
        super().__init__(message)
        self.field_path = field_path
