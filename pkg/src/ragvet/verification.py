"""Structured two-phase verification of a candidate answer.

Both phases (holistic, then decompositional) live in one prompt; the model
reports them as a confidence-first block so that even a truncated reply
still carries a usable score. Parsing is total: any text yields a result,
with unusable replies collapsing to confidence 0.0.
"""

from __future__ import annotations

import re
from enum import Enum
from typing import Optional

from .backends import ModelBackend, ModelRequest, Role
from .core import Finding, RagContext, SubQuestion, VerificationResult
from .runtime import Deadline, Trace, flag_trace
from .templates import PromptTemplate, default_template_path, load_template

__all__ = [
    "build_cov_prompt",
    "parse_cov_response",
    "verify",
    "ConfidenceBand",
    "classify_confidence",
]

VERIFY_MAX_TOKENS = 256

_CONFIDENCE_LINE = re.compile(r"^CONFIDENCE:(.*)$", re.MULTILINE)
_REASONING_SPLIT = re.compile(r"^REASONING:", re.MULTILINE)
_SUBQ_SPLIT = re.compile(r"^SUB-QUESTIONS:", re.MULTILINE)
_FLOAT = re.compile(r"[-+]?\d*\.?\d+(?:[eE][-+]?\d+)?")
_SUB_QUESTION = re.compile(r"Q\d+:\s*(.+?),\s*Finding:\s*(Supported|Unsupported)", re.IGNORECASE)

_DEFAULT_TEMPLATE: Optional[PromptTemplate] = None


def _default_template() -> PromptTemplate:
    global _DEFAULT_TEMPLATE
    if _DEFAULT_TEMPLATE is None:
        _DEFAULT_TEMPLATE = load_template(default_template_path("cov"))
    return _DEFAULT_TEMPLATE


def build_cov_prompt(
    context: RagContext,
    query: str,
    answer: str,
    template: Optional[PromptTemplate] = None,
) -> tuple[str, str]:
    return (template or _default_template()).build(
        image="",
        contexts=context.rendered,
        queries=query,
        answers=answer,
    )


def _parse_sub_questions(fragment: str) -> tuple[SubQuestion, ...]:
    subs = []
    for match in _SUB_QUESTION.finditer(fragment):
        finding = Finding.SUPPORTED if match.group(2).lower() == "supported" else Finding.UNSUPPORTED
        subs.append(SubQuestion(question=match.group(1).strip(), finding=finding))
    return tuple(subs)


def parse_cov_response(text: str, trace: Optional[Trace] = None) -> VerificationResult:
    """Extract confidence, reasoning, and sub-question findings.

    The confidence comes from the first line starting with ``CONFIDENCE:``
    (anchored at line start, so the word appearing inside an answer is
    ignored) and is clamped into [0, 1]. A reply carrying neither reasoning
    nor sub-questions is treated as malformed and collapses to 0.0.
    """
    fallback = VerificationResult(confidence=0.0, reasoning="", sub_questions=())
    confidence_match = _CONFIDENCE_LINE.search(text)
    if confidence_match is None:
        flag_trace(trace, "cov_parse_failure")
        return fallback
    number = _FLOAT.search(confidence_match.group(1))
    if number is None:
        flag_trace(trace, "cov_parse_failure")
        return fallback
    confidence = min(1.0, max(0.0, float(number.group(0))))

    reasoning = ""
    reasoning_split = _REASONING_SPLIT.split(text, maxsplit=1)
    if len(reasoning_split) == 2:
        reasoning = _SUBQ_SPLIT.split(reasoning_split[1], maxsplit=1)[0].strip()

    sub_questions: tuple[SubQuestion, ...] = ()
    subq_split = _SUBQ_SPLIT.split(text, maxsplit=1)
    if len(subq_split) == 2:
        sub_questions = _parse_sub_questions(subq_split[1])

    if confidence > 0.0 and not reasoning and not sub_questions:
        flag_trace(trace, "cov_parse_failure")
        return fallback
    return VerificationResult(
        confidence=confidence, reasoning=reasoning, sub_questions=sub_questions
    )


def verify(
    query: str,
    image_ref: Optional[str],
    context: RagContext,
    answer: str,
    vlm_backend: ModelBackend,
    deadline: Deadline,
    trace: Optional[Trace] = None,
    template: Optional[PromptTemplate] = None,
) -> VerificationResult:
    """Run the verification prompt over the candidate answer."""
    system, user = build_cov_prompt(context, query, answer, template)
    request = ModelRequest(
        role=Role.VERIFIER,
        system=system,
        user=user,
        image_ref=image_ref,
        max_tokens=VERIFY_MAX_TOKENS,
    )
    response = vlm_backend.complete(request, deadline)
    return parse_cov_response(response.text, trace)


class ConfidenceBand(Enum):
    REJECT = 0
    CAUTIOUS = 1
    HIGH = 2


def classify_confidence(score: float, low: float, high: float) -> ConfidenceBand:
    """Band a verifier score: >= high is High, >= low is Cautious, else Reject."""
    if score >= high:
        return ConfidenceBand.HIGH
    if score >= low:
        return ConfidenceBand.CAUTIOUS
    return ConfidenceBand.REJECT
