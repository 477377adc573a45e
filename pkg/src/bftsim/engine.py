"""Deterministic discrete-event core: integer-nanosecond clock, event queue, seeded RNG."""

from __future__ import annotations

import hashlib
import heapq
import random
import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Any, Callable

NS_PER_US = 1_000
NS_PER_MS = 1_000_000
NS_PER_S = 1_000_000_000


def us(x: float) -> int:
    return int(round(x * NS_PER_US))


def ms(x: float) -> int:
    return int(round(x * NS_PER_MS))


def seconds(x: float) -> int:
    return int(round(x * NS_PER_S))


def to_ms(t: int) -> float:
    return t / NS_PER_MS


def to_s(t: int) -> float:
    return t / NS_PER_S


class EventKind(IntEnum):
    MESSAGE_ARRIVAL = 0  # first bit reaches the receiver NIC
    MESSAGE_DELIVERY = 1
    TIMER = 2
    FAULT = 3
    MEASUREMENT = 4


class ScheduleError(RuntimeError):
    """Raised when an event is scheduled before the current virtual time."""


@dataclass
class Event:
    fire_at: int
    seq: int
    target: int
    kind: EventKind
    payload: Any = None


@dataclass(frozen=True)
class RunSummary:
    events: int
    final_time: int


class DeterministicRng(random.Random):
    """Mersenne Twister seeded once per run; identical stream on every platform."""

    def __init__(self, seed: int = 1):
        super().__init__(seed)
        self.seed_value = seed


_PACK = struct.Struct("<QQBq").pack


class Simulator:
    """Single-threaded event loop.

    Events are ordered by ``(fire_at, seq)`` where ``seq`` comes from one global
    counter, so two events at the same instant fire in scheduling order.
    """

    def __init__(self, seed: int = 1, trace: bool = True):
        self._queue: list[tuple[int, int, int, int, Callable[..., None], Any]] = []
        self._seq = 0
        self._now = 0
        self.rng = DeterministicRng(seed)
        self.dispatched = 0
        self._trace = hashlib.blake2b(digest_size=16) if trace else None

    def now(self) -> int:
        return self._now

    @property
    def pending(self) -> int:
        return len(self._queue)

    @property
    def scheduled(self) -> int:
        return self._seq

    def schedule(self, fire_at: int, kind: EventKind, target: int,
                 handler: Callable[[Any], None], payload: Any = None) -> int:
        if fire_at < self._now:
            raise ScheduleError(
                f"event scheduled into past: fire_at={fire_at}ns < now={self._now}ns "
                f"(kind={EventKind(kind).name}, target={target})")
        seq = self._seq
        self._seq += 1
        heapq.heappush(self._queue, (fire_at, seq, kind, target, handler, payload))
        return seq

    def schedule_event(self, event: Event, handler: Callable[[Any], None]) -> Event:
        event.seq = self.schedule(event.fire_at, event.kind, event.target, handler, event.payload)
        return event

    def after(self, delay: int, kind: EventKind, target: int,
              handler: Callable[[Any], None], payload: Any = None) -> int:
        return self.schedule(self._now + delay, kind, target, handler, payload)

    def peek_time(self) -> int | None:
        return self._queue[0][0] if self._queue else None

    def run_until(self, end: int) -> RunSummary:
        """Dispatch every event with ``fire_at <= end``; the clock then rests at ``end``."""
        queue = self._queue
        pop = heapq.heappop
        trace = self._trace
        count = 0
        while queue and queue[0][0] <= end:
            fire_at, seq, kind, target, handler, payload = pop(queue)
            self._now = fire_at
            if trace is not None:
                trace.update(_PACK(fire_at, seq, kind, target))
            handler(payload)
            count += 1
        if end > self._now:
            self._now = end
        self.dispatched += count
        return RunSummary(events=count, final_time=self._now)

    def trace_hash(self) -> str:
        if self._trace is None:
            return ""
        return self._trace.hexdigest()
