"""
Deterministic discrete-event core.

Time is an integer number of nanoseconds. Events fire in ``(fire_at, seq)``
order where ``seq`` is the global scheduling counter, so two events at the
same instant fire in the order they were scheduled. That ordering is part of
the public contract and is what makes traces reproducible.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import zlib
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, TextIO

import numpy as np

logger = logging.getLogger(__name__)

Handler = Callable[["Event"], None]


class SchedulingError(RuntimeError):
    pass


class EventHandlerError(RuntimeError):
    def __init__(self, event: "Event", cause: BaseException):
        super().__init__(f"handler failed at t={event.fire_at} seq={event.seq} kind={event.kind} source={event.source}: {cause!r}")
        self.event = event


@dataclass(eq=False)
class Event:
    fire_at: int
    seq: int
    kind: str
    source: str
    payload: Any = None
    handler: Handler | None = field(default=None, repr=False)
    cancelled: bool = False

    def __lt__(self, other: "Event") -> bool:
        return (self.fire_at, self.seq) < (other.fire_at, other.seq)


class EventHandle:
    """Returned by :meth:`Engine.schedule`; lets the caller cancel the event."""

    __slots__ = ("_event", "_engine")

    def __init__(self, engine: "Engine", event: Event):
        self._engine = engine
        self._event = event

    @property
    def event(self) -> Event:
        return self._event

    @property
    def pending(self) -> bool:
        return not self._event.cancelled and self._event.seq not in self._engine._fired

    def cancel(self) -> bool:
        return self._engine.cancel(self)


# -- wait conditions ---------------------------------------------------------


class WaitCondition:
    """Expression tree over event patterns, combined with ``&`` and ``|``."""

    def __and__(self, other: "WaitCondition") -> "WaitCondition":
        return AllOf(self, other)

    def __or__(self, other: "WaitCondition") -> "WaitCondition":
        return AnyOf(self, other)

    def leaves(self) -> list["EventPattern"]:
        raise NotImplementedError

    def satisfied(self, matched: dict[int, Event]) -> bool:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class EventPattern(WaitCondition):
    kind: str
    source: str | None = None

    def matches(self, event: Event) -> bool:
        return event.kind == self.kind and (self.source is None or event.source == self.source)

    def leaves(self):
        return [self]

    def satisfied(self, matched):
        return id(self) in matched


class AllOf(WaitCondition):
    def __init__(self, *parts: WaitCondition):
        self.parts = parts

    def leaves(self):
        return [leaf for p in self.parts for leaf in p.leaves()]

    def satisfied(self, matched):
        return all(p.satisfied(matched) for p in self.parts)


class AnyOf(WaitCondition):
    def __init__(self, *parts: WaitCondition):
        self.parts = parts

    def leaves(self):
        return [leaf for p in self.parts for leaf in p.leaves()]

    def satisfied(self, matched):
        return any(p.satisfied(matched) for p in self.parts)


def any_of(patterns: Iterable[WaitCondition]) -> WaitCondition:
    return AnyOf(*patterns)


def all_of(patterns: Iterable[WaitCondition]) -> WaitCondition:
    return AllOf(*patterns)


class _Waiter:
    __slots__ = ("condition", "continuation", "leaves", "matched", "done")

    def __init__(self, condition: WaitCondition, continuation: Callable[[list[Event]], None]):
        self.condition = condition
        self.continuation = continuation
        self.leaves = condition.leaves()
        self.matched: dict[int, Event] = {}
        self.done = False

    def offer(self, event: Event) -> bool:
        for leaf in self.leaves:
            if id(leaf) not in self.matched and leaf.matches(event):
                self.matched[id(leaf)] = event
                return self.condition.satisfied(self.matched)
        return False

    def payloads(self) -> list[Event]:
        return sorted(self.matched.values(), key=lambda e: e.seq)


# -- engine ------------------------------------------------------------------


@dataclass
class RunStats:
    events_processed: int
    events_cancelled: int
    events_pending: int
    events_scheduled: int
    clock: int


def stable_entity_hash(entity_id: str) -> int:
    return zlib.crc32(entity_id.encode("utf-8"))


class Engine:
    """Single-threaded event loop with per-entity RNG substreams."""

    def __init__(self, seed: int = 0, trace: TextIO | None = None):
        self.now = 0
        self.seed = int(seed)
        self._queue: list[Event] = []
        self._seq = itertools.count()
        self._fired: set[int] = set()
        self._waiters: list[_Waiter] = []
        self._rngs: dict[str, np.random.Generator] = {}
        self._trace = trace
        self.scheduled = 0
        self.processed = 0
        self.cancelled = 0
        self.stopped = False

    def rng(self, entity_id: str) -> np.random.Generator:
        """Random stream owned by ``entity_id``; independent of other entities."""
        g = self._rngs.get(entity_id)
        if g is None:
            ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, stable_entity_hash(entity_id)])
            g = self._rngs[entity_id] = np.random.default_rng(ss)
        return g

    def schedule(
        self,
        delay: int,
        kind: str,
        source: str = "",
        payload: Any = None,
        handler: Handler | None = None,
    ) -> EventHandle:
        """Schedule an event ``delay`` ns from now (rounded to whole ns)."""
        return self.schedule_at(self.now + int(round(delay)), kind, source, payload, handler)

    def schedule_at(
        self,
        fire_at: int,
        kind: str,
        source: str = "",
        payload: Any = None,
        handler: Handler | None = None,
    ) -> EventHandle:
        fire_at = int(fire_at)
        if fire_at < self.now:
            raise SchedulingError(f"cannot schedule {kind} at {fire_at} < now={self.now}")
        ev = Event(fire_at, next(self._seq), kind, source, payload, handler)
        heapq.heappush(self._queue, ev)
        self.scheduled += 1
        return EventHandle(self, ev)

    def cancel(self, handle: EventHandle) -> bool:
        ev = handle.event
        if ev.cancelled or ev.seq in self._fired:
            return False
        ev.cancelled = True
        self.cancelled += 1
        return True

    def await_(self, condition: WaitCondition, continuation: Callable[[list[Event]], None]) -> None:
        """Call ``continuation(events)`` once, when ``condition`` is met by future events."""
        self._waiters.append(_Waiter(condition, continuation))

    def stop(self) -> None:
        self.stopped = True

    @property
    def pending(self) -> int:
        return sum(1 for e in self._queue if not e.cancelled)

    def run_until(self, t_end: int) -> RunStats:
        """Process every event with ``fire_at <= t_end``; the clock ends at ``t_end``.

        If :meth:`stop` is called by a handler the loop returns early and the
        clock stays at the stopping event's time.
        """
        t_end = int(t_end)
        if t_end < self.now:
            raise SchedulingError(f"t_end={t_end} is before now={self.now}")
        self.stopped = False
        while self._queue and not self.stopped:
            if self._queue[0].fire_at > t_end:
                break
            ev = heapq.heappop(self._queue)
            if ev.cancelled:
                continue
            self.now = ev.fire_at
            self._fired.add(ev.seq)
            self.processed += 1
            if self._trace is not None:
                detail = "" if ev.payload is None else str(ev.payload).replace(",", ";").replace("\n", " ")
                self._trace.write(f"{ev.fire_at},{ev.seq},{ev.kind},{ev.source},{detail}\n")
            try:
                if ev.handler is not None:
                    ev.handler(ev)
                self._dispatch(ev)
            except EventHandlerError:
                raise
            except Exception as exc:
                raise EventHandlerError(ev, exc) from exc
        if not self.stopped:
            self.now = t_end
        return self.stats()

    def _dispatch(self, ev: Event) -> None:
        if not self._waiters:
            return
        waiters, self._waiters = self._waiters, []
        keep = []
        ready = []
        for w in waiters:
            if w.offer(ev):
                w.done = True
                ready.append(w)
            else:
                keep.append(w)
        # continuations may register new waiters; those must not see this event
        self._waiters = keep + self._waiters
        for w in ready:
            w.continuation(w.payloads())

    def stats(self) -> RunStats:
        pending = self.pending
        return RunStats(
            events_processed=self.processed,
            events_cancelled=self.cancelled,
            events_pending=pending,
            events_scheduled=self.scheduled,
            clock=self.now,
        )
