"""Exception hierarchy shared across the package.

Every error carries a stable machine-readable ``code`` used by the CLI's
structured error output.
"""

from __future__ import annotations


class PerceptError(Exception):
    """Base class for all package errors."""

    code = "ERROR"


# --- database ---------------------------------------------------------------

class DimensionMismatch(PerceptError):
    code = "DIMENSION_MISMATCH"


class DuplicateName(PerceptError):
    code = "DUPLICATE_NAME"


class InvalidEmbedding(PerceptError):
    code = "INVALID_EMBEDDING"


class EncoderMismatch(PerceptError):
    code = "ENCODER_MISMATCH"


class IoFailure(PerceptError):
    code = "IO_FAILURE"


class SchemaVersionUnsupported(PerceptError):
    code = "SCHEMA_VERSION_UNSUPPORTED"


class CorruptRecord(PerceptError):
    code = "CORRUPT_RECORD"


# --- gateways ---------------------------------------------------------------

class BackendUnavailable(PerceptError):
    code = "BACKEND_UNAVAILABLE"


class MalformedResponse(PerceptError):
    code = "MALFORMED_RESPONSE"


class ResponseTruncated(PerceptError):
    code = "RESPONSE_TRUNCATED"


class ScriptMiss(PerceptError):
    """A scripted mock request matched zero or more than one turn."""

    code = "SCRIPT_MISS"


class AnswerUnparseable(PerceptError):
    code = "ANSWER_UNPARSEABLE"


# --- protocol ---------------------------------------------------------------

class ParseFailure(PerceptError):
    """Model output did not match the expected reply schema.

    Carries the raw text and the deepest recovery stage reached before
    giving up (``direct``, ``block`` or ``keys``).
    """

    code = "PARSE_FAILURE"

    def __init__(self, message: str, *, raw: str = "", stage: str = "direct"):
        super().__init__(message)
        self.raw = raw
        self.stage = stage


class EnrollmentParseFailure(ParseFailure):
    code = "ENROLLMENT_PARSE_FAILURE"


class CotParseFailure(ParseFailure):
    code = "COT_PARSE_FAILURE"


# --- pipeline / evaluation --------------------------------------------------

class EmptyDatabase(PerceptError):
    code = "EMPTY_DATABASE"


class UnknownTargetConcept(PerceptError):
    code = "UNKNOWN_TARGET_CONCEPT"


class TooFewImages(PerceptError):
    code = "TOO_FEW_IMAGES"


class NoPositives(PerceptError):
    code = "NO_POSITIVES"


class NoNegatives(PerceptError):
    code = "NO_NEGATIVES"
