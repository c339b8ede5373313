"""Turn-local runtime plumbing: wall-clock deadlines and degradation traces."""

from __future__ import annotations

import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Iterator


class Deadline:
    """A point on the monotonic clock by which work must finish.

    Instances are cheap and immutable; derive a tighter deadline by
    constructing a new one from an earlier expiry.
    """

    __slots__ = ("_expires_at",)

    def __init__(self, expires_at: float) -> None:
        self._expires_at = expires_at

    @classmethod
    def after_ms(cls, budget_ms: float) -> "Deadline":
        return cls(time.monotonic() + budget_ms / 1000.0)

    @classmethod
    def never(cls) -> "Deadline":
        return cls(math.inf)

    @property
    def expires_at(self) -> float:
        return self._expires_at

    def remaining_ms(self) -> float:
        return max(0.0, (self._expires_at - time.monotonic()) * 1000.0)

    def remaining_seconds(self) -> float:
        return self.remaining_ms() / 1000.0

    def expired(self) -> bool:
        return time.monotonic() >= self._expires_at

    def __repr__(self) -> str:
        return f"Deadline(remaining_ms={self.remaining_ms():.1f})"


@dataclass
class Trace:
    """Accumulates degradation flags and per-stage timings for one turn.

    Stage timings stay in memory for diagnostics; the serialized trace record
    carries only the ordered stage names so that mock runs stay byte-stable.
    """

    flags: set[str] = field(default_factory=set)
    stages: list[str] = field(default_factory=list)
    timings_ms: dict[str, int] = field(default_factory=dict)

    def flag(self, name: str) -> None:
        self.flags.add(name)

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        self.stages.append(name)
        started = time.monotonic()
        try:
            yield
        finally:
            elapsed = int((time.monotonic() - started) * 1000.0)
            self.timings_ms[name] = self.timings_ms.get(name, 0) + elapsed


def flag_trace(trace: Trace | None, name: str) -> None:
    """Flag the trace when one is being kept; no-op otherwise."""
    if trace is not None:
        trace.flag(name)
