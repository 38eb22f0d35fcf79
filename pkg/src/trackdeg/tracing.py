"""OpenTelemetry spans around pipeline stages.

Without :func:`setup_tracing` the global tracer provider is the API's no-op
implementation, so spans cost nothing.
"""

from __future__ import annotations

import logging
import sys

from opentelemetry import trace
from opentelemetry.sdk.resources import Resource
from opentelemetry.sdk.trace import TracerProvider
from opentelemetry.sdk.trace.export import ConsoleSpanExporter, SimpleSpanProcessor

logger = logging.getLogger(__name__)

SERVICE_NAME = "trackdeg"

_configured = False


def setup_tracing(console: bool = False) -> None:
    """Install an SDK provider exporting finished spans to stderr."""
    global _configured
    if not console or _configured:
        return
    provider = TracerProvider(resource=Resource.create({"service.name": SERVICE_NAME}))
    provider.add_span_processor(SimpleSpanProcessor(ConsoleSpanExporter(out=sys.stderr)))
    trace.set_tracer_provider(provider)
    _configured = True
    logger.debug("Console span exporter enabled")


def get_tracer() -> trace.Tracer:
    return trace.get_tracer(SERVICE_NAME)
