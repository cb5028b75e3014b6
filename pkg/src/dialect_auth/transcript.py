"""Per-handshake transcripts and timing spans."""

from __future__ import annotations

import json
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum


class Phase(str, Enum):
    AWAITING_LOGIN = "AwaitingLogin"
    IDLE = "Idle"
    AWAITING_RESPONSE = "AwaitingResponse"
    TRANSFERRING = "Transferring"
    TERMINATED = "Terminated"


@dataclass
class WireEvent:
    direction: str  # "sent", "received", "data", "local"
    timestamp: float
    payload: str
    phase: str

    def to_dict(self) -> dict:
        return {"direction": self.direction, "timestamp": self.timestamp, "payload": self.payload, "phase": self.phase}


@dataclass
class Transcript:
    """One request/response handshake as seen by one endpoint."""

    role: str
    request: str = ""
    dialect: int | None = None
    verdict: str | None = None
    events: list[WireEvent] = field(default_factory=list)
    spans: dict[str, float] = field(default_factory=dict)  # name -> seconds

    def add(self, direction: str, payload, phase) -> None:
        if isinstance(payload, (bytes, bytearray)):
            payload = bytes(payload).decode("utf-8", errors="replace")
        self.events.append(WireEvent(direction, time.time(), payload, Phase(phase).value))

    @contextmanager
    def span(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.spans[name] = self.spans.get(name, 0.0) + time.perf_counter() - t0

    def wire_messages(self, direction: str) -> list[str]:
        return [e.payload for e in self.events if e.direction == direction]

    def to_jsonl(self) -> str:
        lines = []
        for e in self.events:
            d = e.to_dict()
            d.update(role=self.role, request=self.request, dialect=self.dialect)
            lines.append(json.dumps(d, sort_keys=True))
        return "\n".join(lines) + ("\n" if lines else "")


@dataclass(frozen=True)
class TimingReport:
    ddm_ms: float
    srv_ms: float
    handshake_ms: float
    total_ms: float
    server_ddm_ms: float | None = None
    server_handshake_ms: float | None = None


def record_timing(client: Transcript, server: Transcript | None = None) -> TimingReport:
    s = client.spans
    return TimingReport(
        ddm_ms=1000 * s.get("ddm", 0.0),
        srv_ms=1000 * s.get("srv", 0.0),
        handshake_ms=1000 * s.get("handshake", 0.0),
        total_ms=1000 * s.get("total", s.get("handshake", 0.0)),
        server_ddm_ms=None if server is None else 1000 * server.spans.get("ddm", 0.0),
        server_handshake_ms=None if server is None else 1000 * server.spans.get("handshake", 0.0),
    )


class TranscriptLog:
    """Thread-safe bounded store of finished transcripts."""

    def __init__(self, limit: int = 100_000):
        self._items: list[Transcript] = []
        self._lock = threading.Lock()
        self.limit = limit

    def append(self, t: Transcript) -> None:
        with self._lock:
            self._items.append(t)
            if len(self._items) > self.limit:
                del self._items[: len(self._items) - self.limit]

    def snapshot(self) -> list[Transcript]:
        with self._lock:
            return list(self._items)

    def clear(self) -> None:
        with self._lock:
            self._items.clear()

    def __len__(self):
        with self._lock:
            return len(self._items)
