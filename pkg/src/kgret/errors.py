"""Exception hierarchy.

``ValidationError`` subclasses signal bad input (CLI exit code 1); everything
under ``PipelineRuntimeError`` signals a failure while computing (exit code 2).
"""


class KgretError(Exception):
    pass


class ValidationError(KgretError, ValueError):
    pass


class PipelineRuntimeError(KgretError, RuntimeError):
    pass


class MalformedRecord(ValidationError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class DanglingEdge(ValidationError):
    def __init__(self, source: str, target: str):
        super().__init__(f"node {source!r} references absent node {target!r}")
        self.source = source
        self.target = target


class CycleDetected(ValidationError):
    pass


class DuplicateId(ValidationError):
    pass


class UnknownId(ValidationError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class WrongKind(ValidationError):
    pass


class TooFewPairs(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass


class TextContainsTab(ValidationError):
    pass


class EmptyCorpus(ValidationError):
    pass


class VocabTooSmall(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class DatasetTooSmall(ValidationError):
    pass


class FingerprintMismatch(ValidationError):
    pass


class NoEligibleMentions(ValidationError):
    pass


class UnknownGold(ValidationError):
    pass


class SpecInvalid(ValidationError):
    pass


class NonFinite(PipelineRuntimeError):
    pass


class NonFiniteActivation(NonFinite):
    pass
