"""Exception hierarchy shared by all cspflow modules."""

from __future__ import annotations


class CspflowError(Exception):
    """Base class for all framework errors."""


# --- topology construction / validation ---


class TopologyInvalid(CspflowError):
    """Raised by build_topology when validation produced hard violations."""

    def __init__(self, violations):
        self.violations = list(violations)
        lines = "; ".join(v.message for v in self.violations)
        super().__init__(f"invalid topology: {lines}")


class UnresolvedReference(CspflowError):
    """A flow references a PE, port, or channel that does not exist."""


class DisconnectedGraph(CspflowError):
    """The PE graph is not weakly connected."""


class NoSourceOrConsumer(CspflowError):
    """A topology lacks a source or a consumer, or a PE's declared role
    contradicts its ports."""


class ControlFlowNotPointToPoint(CspflowError):
    """A control flow was attached to a non point-to-point channel."""


class MalformedPorts(CspflowError):
    """A PE's port set is inconsistent (e.g. two output ports)."""


class BehaviorFailure(CspflowError):
    """A user behavior raised while processing an item."""


# --- channels ---


class UnknownChannel(CspflowError):
    pass


class PublishAfterShutdown(CspflowError):
    pass


class NoSubscribers(CspflowError):
    pass


class WrongFlowClass(CspflowError):
    """A data channel was used for control traffic or vice versa."""


class UnknownTarget(CspflowError):
    """A control signal addressed a PE the channel does not reach."""


# --- crowd ---


class TemplateMismatch(CspflowError):
    """Task template options are inconsistent with the task kind."""


class NoEligibleWorker(CspflowError):
    """No worker can take the task (caps reached or all have answered)."""


class BudgetExhausted(CspflowError):
    """The fixed label budget has been fully spent."""


class ForeignLabel(CspflowError):
    """A label was offered to the aggregator for a different task."""


# --- learning ---


class NonTextPayload(CspflowError):
    pass


class EmptyAfterDedup(CspflowError):
    """No labeling candidates remain after duplicate filtering."""


class UnknownClass(CspflowError):
    pass


class UntrainedModel(CspflowError):
    pass


class SingleClassTestSet(CspflowError):
    """AUC is undefined: the test set lacks positives or negatives."""


# --- patterns ---


class MissingBinding(CspflowError):
    pass


class InvalidChainLength(CspflowError):
    pass


# --- metrics ---


class UnknownItem(CspflowError):
    pass


class EmptyWindow(CspflowError):
    pass


# --- harness ---


class InvalidParams(CspflowError):
    pass


class ParseError(CspflowError):
    """Dataset file could not be parsed; carries the 1-based line number."""

    def __init__(self, line_no: int, message: str = ""):
        self.line_no = line_no
        super().__init__(message or f"parse error at line {line_no}")
