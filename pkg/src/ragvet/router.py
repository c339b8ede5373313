"""Classify each query into (needs external info, is real-time).

Parsing is label-anchored and case-insensitive, so reordered or decorated
model output still parses. Any failure falls back to {e=1, r=0}: keeping
retrieval available favors grounding, and not forcing the real-time branch
avoids abstaining just because routing itself broke.
"""

from __future__ import annotations

import re
from typing import Optional

from .backends import BackendError, BackendTimeout, ModelBackend, ModelRequest, Role
from .core import RoutingDecision
from .runtime import Deadline, Trace, flag_trace
from .templates import PromptTemplate, default_template_path, load_template

__all__ = ["build_routing_prompt", "parse_routing_response", "route", "FALLBACK_DECISION"]

FALLBACK_DECISION = RoutingDecision(needs_external=True, is_real_time=False)

ROUTER_MAX_TOKENS = 64

# A label, any non-alphanumeric separators, then a yes/no token. The lookahead
# rejects the template's own "[yes/no]" echo ("yes" followed by a slash).
_LABEL_VALUE = {
    "needs_external": re.compile(
        r"needs\s+external\s+info[^a-z0-9]*?(yes|no)\b(?!\s*/)", re.IGNORECASE
    ),
    "is_real_time": re.compile(
        r"is\s+real[\s-]?time[^a-z0-9]*?(yes|no)\b(?!\s*/)", re.IGNORECASE
    ),
}

_DEFAULT_TEMPLATE: Optional[PromptTemplate] = None


def _default_template() -> PromptTemplate:
    global _DEFAULT_TEMPLATE
    if _DEFAULT_TEMPLATE is None:
        _DEFAULT_TEMPLATE = load_template(default_template_path("routing"))
    return _DEFAULT_TEMPLATE


def build_routing_prompt(query: str, template: Optional[PromptTemplate] = None) -> tuple[str, str]:
    """Render the classification prompt with {query} substituted verbatim."""
    if not query:
        raise ValueError("query must be non-empty")
    return (template or _default_template()).build(query=query)


def _scan_label(pattern: re.Pattern[str], text: str) -> Optional[bool]:
    values = {match.group(1).lower() for match in pattern.finditer(text)}
    if len(values) != 1:
        return None  # absent, or conflicting occurrences
    return values.pop() == "yes"


def parse_routing_response(text: str, trace: Optional[Trace] = None) -> RoutingDecision:
    """Total parser: any text yields a decision, falling back on {e=1, r=0}."""
    needs_external = _scan_label(_LABEL_VALUE["needs_external"], text)
    is_real_time = _scan_label(_LABEL_VALUE["is_real_time"], text)
    if needs_external is None or is_real_time is None:
        flag_trace(trace, "router_parse_failure")
        return FALLBACK_DECISION
    return RoutingDecision(needs_external=needs_external, is_real_time=is_real_time)


def route(
    query: str,
    model_backend: ModelBackend,
    deadline: Deadline,
    trace: Optional[Trace] = None,
    template: Optional[PromptTemplate] = None,
) -> RoutingDecision:
    """Prompt the router model and parse its reply; never raises."""
    system, user = build_routing_prompt(query, template)
    request = ModelRequest(
        role=Role.ROUTER, system=system, user=user, max_tokens=ROUTER_MAX_TOKENS
    )
    try:
        response = model_backend.complete(request, deadline)
    except BackendTimeout:
        flag_trace(trace, "router_backend_timeout")
        return FALLBACK_DECISION
    except BackendError:
        flag_trace(trace, "router_backend_error")
        return FALLBACK_DECISION
    return parse_routing_response(response.text, trace)
