"""Error types for the syntax-augmented attention toolkit."""

from enum import Enum
from typing import Optional


class ErrorType(Enum):
    """Failure categories, used by the CLI to pick an exit code."""
    DATA = "data_error"
    USAGE = "usage_error"
    NUMERIC = "numeric_error"
    TRAINING = "training_error"


EXIT_CODES = {
    ErrorType.USAGE: 1,
    ErrorType.DATA: 2,
    ErrorType.NUMERIC: 2,
    ErrorType.TRAINING: 2,
}


class SyntaxAttentionError(Exception):
    """Base error carrying a classification and an optional input location."""

    error_type: ErrorType = ErrorType.DATA

    def __init__(
        self,
        message: str,
        sentence_id: Optional[str] = None,
        line_no: Optional[int] = None,
        source: Optional[str] = None,
    ):
        super().__init__(message)
        self.message = message
        self.sentence_id = sentence_id
        self.line_no = line_no
        self.source = source

    def describe(self) -> str:
        """One-line diagnostic for the error stream."""
        where = []
        if self.source:
            where.append(str(self.source))
        if self.sentence_id is not None:
            where.append(f"sentence {self.sentence_id}")
        if self.line_no is not None:
            where.append(f"line {self.line_no}")
        prefix = f"{type(self).__name__}"
        if where:
            prefix += f" ({', '.join(where)})"
        return f"{prefix}: {self.message}"

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.error_type]


# CoNLL-U ingestion

class MalformedLine(SyntaxAttentionError):
    """A token line without exactly ten tab-separated columns."""


class NonIntegerHead(SyntaxAttentionError):
    """HEAD column that is not a non-negative integer."""


class CycleDetected(SyntaxAttentionError):
    """Head relation contains a cycle."""


class MultipleRoots(SyntaxAttentionError):
    """More than one (or no) token attached to the root."""


class EmptySentence(SyntaxAttentionError):
    """A sentence or graph without any token."""


class UnknownUpos(SyntaxAttentionError):
    """UPOS value outside the universal tag set."""


class EmptyWord(SyntaxAttentionError):
    """Empty word handed to the wordpiece tokenizer."""


class CharacterMismatch(SyntaxAttentionError):
    """Word whose characters the vocabulary cannot reproduce."""


# Tree algebra and batching

class LengthMismatch(SyntaxAttentionError):
    """Alignment and sentence disagree on the number of words."""


class SequenceTooLong(SyntaxAttentionError):
    """Encoded sequence longer than the configured max_len."""


class IndexMisalignment(SyntaxAttentionError):
    """Representations and gold structures index different positions."""


class LabelOutOfRange(SyntaxAttentionError):
    """Task label outside [0, num_labels)."""


class EmptyCorpus(SyntaxAttentionError):
    """No training sentence was supplied."""


class CheckpointFormatError(SyntaxAttentionError):
    """Binary container with a bad magic string or truncated payload."""


# Numerical core

class NumericError(SyntaxAttentionError):
    error_type = ErrorType.NUMERIC


class ShapeMismatch(NumericError):
    """Operands (or loaded parameters) with incompatible shapes."""


class AllMaskedRow(NumericError):
    """Softmax row whose entries are all negative infinity."""


class NonScalarOutput(NumericError):
    """Gradient check on a function that does not return one value."""


class IdOutOfRange(NumericError):
    """Token, position or tag id outside its embedding table."""


class NonFiniteGradient(SyntaxAttentionError):
    error_type = ErrorType.TRAINING


class UsageError(SyntaxAttentionError):
    error_type = ErrorType.USAGE


class GradientCheckFailed(NumericError):
    """Analytic and finite-difference gradients disagree beyond the tolerance."""
