"""Shared test backends and builders."""

from __future__ import annotations

import re
from pathlib import Path

import pytest

from ragvet.backends import ModelRequest, ModelResponse, ReplayEntry, ReplayModelBackend
from ragvet.core import ChunkRef, RetrievedItem, ScoredChunk, Source
from ragvet.runtime import Deadline

FIXTURES = Path(__file__).parent / "fixtures"


def scripted_model(*entries: dict) -> ReplayModelBackend:
    """Build a replay backend from loose entry dicts."""
    built = []
    for entry in entries:
        raw_match = entry.get("match", [])
        match = (raw_match,) if isinstance(raw_match, str) else tuple(raw_match)
        built.append(
            ReplayEntry(
                role=entry["role"],
                response=entry["response"],
                match=match,
                sleep_ms=entry.get("sleep_ms", 0),
            )
        )
    return ReplayModelBackend(built)


class CountingModel:
    """Wraps a model backend and counts completions per role."""

    def __init__(self, inner):
        self.inner = inner
        self.calls: list[str] = []

    def complete(self, request: ModelRequest, deadline: Deadline) -> ModelResponse:
        self.calls.append(request.role.value)
        return self.inner.complete(request, deadline)


class HonestConsistencyJudge:
    """Answers yes iff the two proposed answers in the prompt are equal.

    Parses the judge prompt itself, so it holds the contract that identical
    answers always come back consistent.
    """

    _ANSWER_1 = re.compile(r"## Proposed Answer 1:\n\n(.*?)\n\n## Proposed Answer 2:", re.DOTALL)
    _ANSWER_2 = re.compile(r"## Proposed Answer 2:\n\n(.*?)\n\n## Your Task:", re.DOTALL)

    def complete(self, request: ModelRequest, deadline: Deadline) -> ModelResponse:
        first = self._ANSWER_1.search(request.user)
        second = self._ANSWER_2.search(request.user)
        assert first and second, "consistency prompt shape changed"
        verdict = "yes" if first.group(1) == second.group(1) else "no"
        return ModelResponse(text=verdict)


def web_item(snippet: str, rank: int = 1, title: str = "t", url: str = "https://x.test/") -> RetrievedItem:
    return RetrievedItem(
        source=Source.WEB,
        fields={"title": title, "url": url, "snippet": snippet, "last_updated": "2025-01-01"},
        recall_rank=rank,
    )


def kg_item(description: str, rank: int = 1, **extra: str) -> RetrievedItem:
    return RetrievedItem(
        source=Source.KG_IMAGE, fields={"description": description, **extra}, recall_rank=rank
    )


def chunk(text: str, score: float, rank: int = 1) -> ScoredChunk:
    parent = ChunkRef(item=web_item(text, rank=rank), field="snippet")
    return ScoredChunk(text=text, parent=parent, score=score)


@pytest.fixture
def no_deadline() -> Deadline:
    return Deadline.never()
