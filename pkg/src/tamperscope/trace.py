"""Append-only event log for one per-image pipeline run.

Events carry a monotone sequence number and a timestamp from an injectable
clock; the deterministic clock (used in stub mode) pins timestamps to 0.0
so whole-run outputs are a pure function of inputs.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional


@dataclass(frozen=True)
class TraceEvent:
    seq: int
    timestamp: float
    kind: str
    data: dict

    def to_json(self) -> str:
        return json.dumps(
            {"seq": self.seq, "t": self.timestamp, "kind": self.kind, **self.data},
            sort_keys=True,
            separators=(",", ":"),
        )


class Trace:
    """Single-writer, append-only trace for one chain."""

    def __init__(self, clock: Optional[Callable[[], float]] = None):
        self._events: list[TraceEvent] = []
        self._clock = clock

    @classmethod
    def deterministic(cls) -> "Trace":
        return cls(clock=None)

    @classmethod
    def wall_clock(cls) -> "Trace":
        return cls(clock=time.time)

    def now(self) -> float:
        return self._clock() if self._clock is not None else 0.0

    def record(self, kind: str, **data) -> TraceEvent:
        event = TraceEvent(seq=len(self._events), timestamp=self.now(), kind=kind, data=data)
        self._events.append(event)
        return event

    @property
    def events(self) -> tuple[TraceEvent, ...]:
        return tuple(self._events)

    def kinds(self) -> list[str]:
        return [e.kind for e in self._events]

    def to_jsonl(self) -> str:
        return "\n".join(e.to_json() for e in self._events) + ("\n" if self._events else "")

    def write_jsonl(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")
