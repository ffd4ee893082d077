"""
Run context using contextvars for correlation ID propagation.

Stores the current run ID so that loggers, error envelopes, and run
manifests can access it without passing it explicitly.
"""

import contextvars
import uuid

_run_id_var: contextvars.ContextVar[str | None] = contextvars.ContextVar("run_id", default=None)


def get_run_id() -> str | None:
    """Get the current run's correlation ID."""
    return _run_id_var.get()


def set_run_id(run_id: str | None = None) -> str:
    """Set the current run's correlation ID.

    Args:
        run_id: An explicit ID to use, or None to generate a new UUID.

    Returns:
        The run ID that was set.
    """
    if run_id is None:
        run_id = uuid.uuid4().hex[:12]
    _run_id_var.set(run_id)
    return run_id
