"""Opik experiment tracking for scenario runs.

Tracking is optional: without ``OPIK_API_KEY``/``OPIK_WORKSPACE`` (or without
the opik package) every call degrades to a local no-op trace.
"""

import logging
import os
from typing import Any, Optional

try:
    import opik
except ImportError:  # pragma: no cover - exercised only where opik is absent
    opik = None

logger = logging.getLogger(__name__)

DEFAULT_PROJECT = "cmdf-lab"

_initialized = False
_client = None


def project_name() -> str:
    return os.environ.get("CMDF_OPIK_PROJECT", DEFAULT_PROJECT)


def init_opik() -> bool:
    """Configure opik from the environment; True when tracking is live."""
    global _initialized

    if _initialized:
        return True
    if opik is None:
        return False

    api_key = os.environ.get("OPIK_API_KEY")
    workspace = os.environ.get("OPIK_WORKSPACE")
    if not (api_key and workspace):
        return False

    try:
        kwargs = {"api_key": api_key, "workspace": workspace}
        if os.environ.get("OPIK_URL"):
            kwargs["url"] = os.environ["OPIK_URL"]
        opik.configure(**kwargs)
        _initialized = True
    except Exception as e:
        logger.warning("opik configuration failed, tracking disabled: %s", e)
    return _initialized


def get_client():
    global _client

    if not init_opik():
        return None
    if _client is None:
        _client = opik.Opik(project_name=project_name())
    return _client


class DummyTrace:
    """Stand-in trace used when tracking is off."""

    def __init__(self, name: str):
        self.name = name
        self.id = f"local-{name}"
        self.scores = {}

    def __enter__(self):
        return self

    def __exit__(self, *args):
        pass

    def log_feedback_score(self, name: str, value: float, reason: Optional[str] = None, **kwargs):
        self.scores[name] = value

    def span(self, name: str, input: Optional[dict] = None, **kwargs):
        return DummyTrace(name)

    def end(self, **kwargs):
        pass


class TrackedOperation:
    """Context manager wrapping one tracked run."""

    def __init__(self, name: str, input_data: dict = None, metadata: dict = None):
        self.name = name
        self.input_data = input_data or {}
        self.metadata = metadata or {}
        self.trace: Any = None
        self.trace_id: Optional[str] = None
        self.scores = {}
        self._output = None

    @property
    def is_live(self) -> bool:
        return not isinstance(self.trace, DummyTrace)

    def __enter__(self):
        client = get_client()
        try:
            if client is None:
                raise RuntimeError("tracking disabled")
            self.trace = client.trace(name=self.name, input=self.input_data, metadata=self.metadata)
            self.trace_id = self.trace.id
        except Exception:
            self.trace = DummyTrace(self.name)
            self.trace_id = self.trace.id
        return self

    def set_output(self, output):
        """Set the trace output (sent when the context manager exits)."""
        self._output = output

    def __exit__(self, exc_type, exc_val, exc_tb):
        if exc_type is not None:
            self.metadata["error"] = f"{exc_type.__name__}: {exc_val}"
        try:
            self.trace.end(output=self._output, metadata=self.metadata)
        except Exception:
            pass
        if _client is not None:
            try:
                _client.flush()
            except Exception:
                pass

    def log_score(self, name: str, value: float, reason: str = None):
        self.scores[name] = float(value)
        try:
            self.trace.log_feedback_score(name=name, value=float(value), reason=reason)
        except Exception:
            pass

    def add_span(self, name: str, input_data: dict = None):
        try:
            return self.trace.span(name=name, input=input_data)
        except Exception:
            return DummyTrace(name)


def track_operation(name: str, input_data: dict = None, metadata: dict = None) -> TrackedOperation:
    """Create a tracked operation context manager."""
    return TrackedOperation(name, input_data, metadata)
