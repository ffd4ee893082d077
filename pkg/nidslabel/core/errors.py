"""
Standardized error handling.

Every failure the toolchain reports follows the envelope format:
{
    "error": {
        "code": "VALIDATION_ERROR",
        "message": "Human-readable description",
        "run_id": "abc123def456"
    }
}

Validation-class errors map to exit code 1, runtime-class errors to exit code 2.
"""

import json
from typing import Any

from pydantic import ValidationError

from nidslabel.core.logging import get_logger
from nidslabel.core.run_context import get_run_id

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


class NidsLabelError(Exception):
    """Base class for all toolchain errors."""

    code = "ERROR"
    exit_code = EXIT_RUNTIME

    def __init__(self, message: str) -> None:
        super().__init__(message)
        self.message = message


class ValidationFailure(NidsLabelError):
    """Input did not satisfy a documented format or invariant."""

    code = "VALIDATION_ERROR"
    exit_code = EXIT_VALIDATION


class RuntimeFailure(NidsLabelError):
    """Valid input, but the operation could not complete."""

    code = "RUNTIME_ERROR"
    exit_code = EXIT_RUNTIME


# ── Validation class ─────────────────────────────────────────────────────────


class ConfigError(ValidationFailure):
    code = "CONFIG_ERROR"


class CatalogError(ValidationFailure):
    code = "CATALOG_ERROR"


class UnknownTechniqueError(CatalogError, KeyError):
    code = "UNKNOWN_TECHNIQUE"

    def __init__(self, technique_id: str) -> None:
        super().__init__(f"Unknown technique id: {technique_id}")
        self.technique_id = technique_id

    def __str__(self) -> str:
        return self.message


class RuleParseError(ValidationFailure):
    code = "RULE_PARSE_ERROR"


class RuleSerializationError(ValidationFailure):
    code = "RULE_SERIALIZATION_ERROR"


class DatasetError(ValidationFailure):
    code = "DATASET_ERROR"


class FeatureError(ValidationFailure):
    code = "FEATURE_ERROR"


class PromptError(ValidationFailure):
    code = "PROMPT_ERROR"


class BaselineError(ValidationFailure):
    code = "BASELINE_ERROR"


# ── Runtime class ────────────────────────────────────────────────────────────


class TransportError(RuntimeFailure):
    """A chat request failed in a way that may succeed on retry."""

    code = "TRANSPORT_ERROR"


class ProviderError(RuntimeFailure):
    """The provider answered, but not with something usable. Not retried."""

    code = "PROVIDER_ERROR"


class TranscriptError(RuntimeFailure):
    code = "TRANSCRIPT_ERROR"


class LabelingError(RuntimeFailure):
    code = "LABELING_ERROR"

    def __init__(self, message: str, sid: int | None = None, attempts: int = 0) -> None:
        super().__init__(message if sid is None else f"[sid {sid}] {message}")
        self.sid = sid
        self.attempts = attempts


class ModelFormatError(RuntimeFailure):
    code = "MODEL_FORMAT_ERROR"


class EvaluationError(RuntimeFailure):
    code = "EVALUATION_ERROR"


def format_validation_error(exc: ValidationError) -> str:
    """Render the first pydantic validation error as 'field -> path: message'."""
    errors = exc.errors()
    if not errors:
        return "Validation failed"
    first = errors[0]
    field = " -> ".join(str(loc) for loc in first.get("loc", []))
    msg = first.get("msg", "Invalid value")
    return f"{field}: {msg}" if field else msg


def error_envelope(code: str, message: str) -> dict[str, Any]:
    """Build a standardized error body."""
    body: dict[str, Any] = {"error": {"code": code, "message": message}}
    run_id = get_run_id()
    if run_id:
        body["error"]["run_id"] = run_id
    return body


def describe_exception(exc: BaseException) -> tuple[int, dict[str, Any]]:
    """Map any exception to an exit code and an error envelope.

    Unexpected exceptions are logged with their full traceback.
    """
    if isinstance(exc, NidsLabelError):
        logger.error("%s: %s", exc.code, exc.message)
        return exc.exit_code, error_envelope(exc.code, exc.message)
    if isinstance(exc, ValidationError):
        msg = format_validation_error(exc)
        logger.warning("Validation error: %s", msg)
        return EXIT_VALIDATION, error_envelope("VALIDATION_ERROR", msg)
    if isinstance(exc, OSError):
        logger.error("I/O error: %s", exc)
        return EXIT_RUNTIME, error_envelope("IO_ERROR", str(exc))
    logger.error("Unhandled exception", exc_info=exc)
    return EXIT_RUNTIME, error_envelope("INTERNAL_ERROR", "An unexpected error occurred.")


def render_envelope(body: dict[str, Any]) -> str:
    return json.dumps(body, sort_keys=True)
