"""Topic-based publish-subscribe broker for the management plane.

Six topics exist (three channels x request/reply). Every published event is
appended to its topic's persistent log first, then fanned out to connected
subscribers; durable subscribers that are offline catch up from the log when
they reconnect, resuming after their last acknowledged offset. Delivery is
at-least-once; consumers dedup on (event type, correlation id).

Ordering guarantee: per-publisher FIFO. The log append happens under the
broker lock in publish-call order, and each subscription drains its queue in
log order, so any subscriber observes every publisher's events in that
publisher's publish order (global order across topics is not promised).
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from .events import (
    ALL_TOPICS,
    EVENT_REGISTRY,
    ManagementEvent,
    Topic,
    TopicMismatch,
    UnknownEventType,
    decode_event,
    encode_event,
    event_topic,
    read_frame,
)

Handler = Callable[[ManagementEvent], None]
Dispatch = Callable[[Callable[[], None]], None]


def immediate_dispatch(fn: Callable[[], None]) -> None:
    fn()


class Subscription:
    """One live attachment of a subscriber to a topic."""

    def __init__(
        self,
        broker: "Broker",
        subscriber_id: str,
        topic: Topic,
        handler: Handler,
        durable: bool,
        event_filter: Optional[frozenset[str]],
    ):
        self.broker = broker
        self.subscriber_id = subscriber_id
        self.topic = topic
        self.handler = handler
        self.durable = durable
        self.event_filter = event_filter
        self.connected = True
        self._queue: list[tuple[int, ManagementEvent]] = []
        self._draining = False

    def matches(self, event: ManagementEvent) -> bool:
        return self.event_filter is None or event.event_type in self.event_filter

    # queue manipulation happens under the broker lock
    def _offer(self, offset: int, event: ManagementEvent) -> None:
        self._queue.append((offset, event))

    def close(self) -> None:
        self.broker.disconnect(self)


@dataclass
class _TopicLog:
    topic: Topic
    events: list[ManagementEvent] = field(default_factory=list)
    path: Optional[str] = None

    def append(self, event: ManagementEvent) -> int:
        self.events.append(event)
        if self.path is not None:
            with open(self.path, "ab") as fh:
                fh.write(encode_event(event))
        return len(self.events) - 1


class Broker:
    def __init__(
        self,
        dispatch: Optional[Dispatch] = None,
        persist_dir: Optional[str] = None,
        enforce_correlation: bool = True,
    ):
        self._dispatch: Dispatch = dispatch or immediate_dispatch
        self._persist_dir = persist_dir
        self._enforce_correlation = enforce_correlation
        self._lock = threading.RLock()
        self._logs: dict[Topic, _TopicLog] = {}
        self._subs: dict[Topic, list[Subscription]] = {t: [] for t in ALL_TOPICS}
        self._cursors: dict[str, int] = {}  # "<subscriber>|<topic>" -> last acked offset
        self._request_ids: dict[tuple[str, bytes], bool] = {}  # (channel, corr) seen
        self._audit: list[tuple[int, Topic, int, ManagementEvent]] = []
        self._audit_seq = 0
        self._audit_taps: list[Callable[[Topic, int, ManagementEvent], None]] = []
        for topic in ALL_TOPICS:
            path = None
            if persist_dir is not None:
                os.makedirs(persist_dir, exist_ok=True)
                path = os.path.join(persist_dir, f"topic.{topic}.log")
            log = _TopicLog(topic, [], path)
            if path is not None and os.path.exists(path):
                log.events = list(_read_log(path))
            self._logs[topic] = log
        if persist_dir is not None:
            cursor_path = self._cursor_path()
            if os.path.exists(cursor_path):
                with open(cursor_path, "r", encoding="utf-8") as fh:
                    self._cursors = {k: int(v) for k, v in json.load(fh).items()}
        # rebuild the request-id table so correlation checks survive restart
        for topic, log in self._logs.items():
            if topic.kind.value == "request":
                for ev in log.events:
                    self._request_ids[(topic.channel.value, ev.correlation_id)] = True

    # -- publishing ---------------------------------------------------------

    def publish(self, topic: Topic, event: ManagementEvent) -> int:
        """Persist then asynchronously deliver; returns the log offset."""
        registered = event_topic(event.event_type)  # raises UnknownEventType
        if registered != topic:
            raise TopicMismatch(
                f"{event.event_type} is registered for {registered}, not {topic}"
            )
        with self._lock:
            if topic.kind.value == "reply" and self._enforce_correlation:
                if (topic.channel.value, event.correlation_id) not in self._request_ids:
                    raise TopicMismatch(
                        f"reply {event.event_type} correlates to no prior request"
                    )
            if topic.kind.value == "request":
                self._request_ids[(topic.channel.value, event.correlation_id)] = True
            offset = self._logs[topic].append(event)
            self._audit.append((self._audit_seq, topic, offset, event))
            self._audit_seq += 1
            taps = list(self._audit_taps)
            touched = []
            for sub in self._subs[topic]:
                if sub.connected and sub.matches(event):
                    sub._offer(offset, event)
                    touched.append(sub)
        for tap in taps:
            tap(topic, offset, event)
        for sub in touched:
            self._schedule_drain(sub)
        return offset

    def publish_event(self, event: ManagementEvent) -> int:
        return self.publish(event_topic(event.event_type), event)

    # -- subscribing ----------------------------------------------------------

    def subscribe(
        self,
        subscriber_id: str,
        topic: Topic,
        handler: Handler,
        durable: bool = False,
        event_filter: Optional[Iterable[str]] = None,
    ) -> Subscription:
        """Attach a handler; durable re-subscription replays unacked history."""
        filt = frozenset(event_filter) if event_filter is not None else None
        for et in filt or ():
            if EVENT_REGISTRY.get(et) != topic:
                raise TopicMismatch(f"filter type {et!r} is not registered for {topic}")
        sub = Subscription(self, subscriber_id, topic, handler, durable, filt)
        with self._lock:
            # a subscriber identity holds at most one live attachment per topic
            for other in self._subs[topic]:
                if other.subscriber_id == subscriber_id:
                    other.connected = False
            self._subs[topic] = [s for s in self._subs[topic] if s.connected]
            self._subs[topic].append(sub)
            if durable:
                cursor = self._cursors.get(self._cursor_key(subscriber_id, topic), -1)
                log = self._logs[topic]
                for offset in range(cursor + 1, len(log.events)):
                    ev = log.events[offset]
                    if sub.matches(ev):
                        sub._offer(offset, ev)
        self._schedule_drain(sub)
        return sub

    def disconnect(self, sub: Subscription) -> None:
        with self._lock:
            sub.connected = False
            sub._queue.clear()
            self._subs[sub.topic] = [s for s in self._subs[sub.topic] if s is not sub]

    def ack(self, subscriber_id: str, topic: Topic, offset: int) -> None:
        with self._lock:
            key = self._cursor_key(subscriber_id, topic)
            if offset > self._cursors.get(key, -1):
                self._cursors[key] = offset
                self._save_cursors_locked()

    def redeliver(self, subscriber_id: str, topic: Topic) -> None:
        """Force re-queue of unacked events for a live durable subscriber.

        Exists to exercise at-least-once consumer dedup in tests; equivalent
        to a reconnect without tearing the attachment down.
        """
        with self._lock:
            subs = [
                s
                for s in self._subs[topic]
                if s.subscriber_id == subscriber_id and s.connected and s.durable
            ]
            for sub in subs:
                cursor = self._cursors.get(self._cursor_key(subscriber_id, topic), -1)
                log = self._logs[topic]
                sub._queue.clear()
                for offset in range(cursor + 1, len(log.events)):
                    ev = log.events[offset]
                    if sub.matches(ev):
                        sub._offer(offset, ev)
        for sub in subs:
            self._schedule_drain(sub)

    # -- delivery -------------------------------------------------------------

    def _schedule_drain(self, sub: Subscription) -> None:
        with self._lock:
            if sub._draining or not sub._queue:
                return
            sub._draining = True
        self._dispatch(lambda: self._drain(sub))

    def _drain(self, sub: Subscription) -> None:
        while True:
            with self._lock:
                if not sub._queue or not sub.connected:
                    sub._draining = False
                    return
                offset, event = sub._queue.pop(0)
            try:
                sub.handler(event)
            except Exception:
                # unacked: the event stays recoverable via the durable cursor
                continue
            if sub.durable:
                self.ack(sub.subscriber_id, sub.topic, offset)

    # -- introspection ----------------------------------------------------------

    def topic_log(self, topic: Topic) -> list[ManagementEvent]:
        with self._lock:
            return list(self._logs[topic].events)

    def audit_log(self) -> list[tuple[int, Topic, int, ManagementEvent]]:
        """All published events in global publish order (in-memory view)."""
        with self._lock:
            return list(self._audit)

    def add_audit_tap(self, tap: Callable[[Topic, int, ManagementEvent], None]) -> None:
        """Register a callback invoked synchronously on every publish."""
        with self._lock:
            self._audit_taps.append(tap)

    def close(self) -> None:
        with self._lock:
            self._save_cursors_locked()

    # -- persistence ------------------------------------------------------------

    def _cursor_key(self, subscriber_id: str, topic: Topic) -> str:
        return f"{subscriber_id}|{topic}"

    def _cursor_path(self) -> str:
        assert self._persist_dir is not None
        return os.path.join(self._persist_dir, "cursors.json")

    def _save_cursors_locked(self) -> None:
        if self._persist_dir is None:
            return
        tmp = self._cursor_path() + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(self._cursors, fh)
        os.replace(tmp, self._cursor_path())


def _read_log(path: str):
    with open(path, "rb") as fh:
        data = fh.read()
    offset = 0
    while True:
        frame, offset = read_frame(data, offset)
        if frame is None:
            break
        yield decode_event(frame)
