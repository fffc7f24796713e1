"""TCP access to the broker, speaking the documented frame format.

A connection carries framed events in both directions. Client-to-server
frames are either control frames (reserved ``_``-prefixed types) or plain
management events, which are published to the topic their type is registered
for. Server-to-client frames are ``_EVENT`` wrappers (topic, offset, inner
frame) so durable clients can acknowledge by offset, plus ``_OK``/``_ERR``
replies to control frames.

The client buffers outbound publishes while the broker is unreachable and
flushes them on reconnect, which is what lets gateway agents ride out broker
outages without losing heartbeats.
"""

from __future__ import annotations

import os
import socket
import socketserver
import threading
import time
from typing import Callable, Optional

from .broker import Broker, Subscription
from .events import (
    CONTROL_TYPES,
    ManagementEvent,
    Topic,
    decode_event,
    encode_event,
    flag,
    make_event,
    raw,
    read_frame,
    text,
    u64,
)

DEFAULT_BUS_ADDR = "127.0.0.1:7141"
BUS_ADDR_ENV = "CITYTB_BUS_ADDR"

# control payload tags
CTL_SUBSCRIBER = 1
CTL_TOPIC = 2
CTL_DURABLE = 3
CTL_FILTER = 4
CTL_OFFSET = 5
CTL_FRAME = 6
CTL_MESSAGE = 7


def bus_address(override: Optional[str] = None) -> tuple[str, int]:
    addr = override or os.environ.get(BUS_ADDR_ENV) or DEFAULT_BUS_ADDR
    host, port = addr.rsplit(":", 1)
    return host, int(port)


class _Connection(socketserver.BaseRequestHandler):
    @property
    def bus(self) -> "BusServer":
        return self.server.bus  # type: ignore[attr-defined]

    def setup(self) -> None:
        self._out: list[bytes] = []
        self._out_lock = threading.Condition()
        self._closing = False
        self._subs: list[Subscription] = []
        self._writer = threading.Thread(target=self._write_loop, daemon=True)
        self._writer.start()
        self.bus.track_connection(self.request)

    def _send(self, event: ManagementEvent) -> None:
        with self._out_lock:
            self._out.append(encode_event(event))
            self._out_lock.notify()

    def _write_loop(self) -> None:
        while True:
            with self._out_lock:
                while not self._out and not self._closing:
                    self._out_lock.wait()
                if self._closing and not self._out:
                    return
                chunk, self._out = b"".join(self._out), []
            try:
                self.request.sendall(chunk)
            except OSError:
                return

    def handle(self) -> None:
        buf = b""
        while True:
            try:
                data = self.request.recv(65536)
            except OSError:
                break
            if not data:
                break
            buf += data
            offset = 0
            while True:
                frame, offset = read_frame(buf, offset)
                if frame is None:
                    break
                try:
                    event = decode_event(frame)
                    self._handle_event(event)
                except Exception as exc:
                    self._send(
                        make_event(
                            "_ERR",
                            self.bus.broker_now(),
                            [text(CTL_MESSAGE, str(exc))],
                        )
                    )
            buf = buf[offset:]

    def _handle_event(self, event: ManagementEvent) -> None:
        broker = self.bus.broker
        if event.event_type == "_SUBSCRIBE":
            topic = Topic.parse(str(event.get(CTL_TOPIC)))
            subscriber = str(event.get(CTL_SUBSCRIBER))
            durable = bool(event.get(CTL_DURABLE, False))
            filt_text = event.get(CTL_FILTER)
            filt = str(filt_text).split(",") if filt_text else None

            def deliver(ev: ManagementEvent, topic: Topic = topic) -> None:
                # wrap so the client can ack by offset; offset travels in the
                # wrapper because broker delivery is callback-based
                inner = encode_event(ev)
                self._send(
                    make_event(
                        "_EVENT",
                        self.bus.broker_now(),
                        [
                            text(CTL_TOPIC, str(topic)),
                            u64(CTL_OFFSET, self.bus.offset_of(topic, ev)),
                            raw(CTL_FRAME, inner),
                        ],
                    )
                )

            sub = broker.subscribe(subscriber, topic, deliver, durable=durable, event_filter=filt)
            self._subs.append(sub)
            self._send(make_event("_OK", self.bus.broker_now(), [], event.correlation_id))
        elif event.event_type == "_ACK":
            topic = Topic.parse(str(event.get(CTL_TOPIC)))
            broker.ack(str(event.get(CTL_SUBSCRIBER)), topic, int(event.get(CTL_OFFSET)))
        elif event.event_type == "_UNSUBSCRIBE":
            for sub in self._subs:
                sub.close()
            self._subs = []
            self._send(make_event("_OK", self.bus.broker_now(), [], event.correlation_id))
        elif event.event_type in CONTROL_TYPES:
            raise ValueError(f"unexpected control frame {event.event_type}")
        else:
            self.bus.submit_publish(event)
            self._send(make_event("_OK", self.bus.broker_now(), [], event.correlation_id))

    def finish(self) -> None:
        for sub in self._subs:
            sub.close()
        self.bus.untrack_connection(self.request)
        with self._out_lock:
            self._closing = True
            self._out_lock.notify()


class BusServer:
    """Exposes an in-process broker on a TCP port."""

    def __init__(self, broker: Broker, host: str = "127.0.0.1", port: int = 0,
                 now: Optional[Callable[[], int]] = None,
                 publish: Optional[Callable[[ManagementEvent], None]] = None):
        self.broker = broker
        self._now = now or (lambda: 0)
        self._publish = publish or broker.publish_event
        self._offsets: dict[tuple[str, bytes], tuple[Topic, int]] = {}
        broker.add_audit_tap(self._remember_offset)
        self._tcp = socketserver.ThreadingTCPServer(
            (host, port), _Connection, bind_and_activate=False
        )
        self._tcp.allow_reuse_address = True
        self._tcp.daemon_threads = True
        self._tcp.server_bind()
        self._tcp.server_activate()
        setattr(self._tcp, "bus", self)
        self._thread: Optional[threading.Thread] = None
        self._conns: set[socket.socket] = set()
        self._conns_lock = threading.Lock()

    def track_connection(self, sock: socket.socket) -> None:
        with self._conns_lock:
            self._conns.add(sock)

    def untrack_connection(self, sock: socket.socket) -> None:
        with self._conns_lock:
            self._conns.discard(sock)

    def _remember_offset(self, topic: Topic, offset: int, event: ManagementEvent) -> None:
        self._offsets[event.identity()] = (topic, offset)

    def offset_of(self, topic: Topic, event: ManagementEvent) -> int:
        entry = self._offsets.get(event.identity())
        return entry[1] if entry else 0

    def broker_now(self) -> int:
        return self._now()

    def submit_publish(self, event: ManagementEvent) -> None:
        self._publish(event)

    @property
    def address(self) -> tuple[str, int]:
        return self._tcp.server_address  # type: ignore[return-value]

    def start(self) -> None:
        self._thread = threading.Thread(target=self._tcp.serve_forever, daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._tcp.shutdown()
        self._tcp.server_close()
        with self._conns_lock:
            conns, self._conns = list(self._conns), set()
        for sock in conns:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                sock.close()
            except OSError:
                pass


class BusClient:
    """Broker client with reconnect and publish buffering."""

    def __init__(self, host: str, port: int, client_id: str,
                 reconnect_delay: float = 0.2,
                 dispatch: Optional[Callable[[Callable[[], None]], None]] = None):
        self.host = host
        self.port = port
        self.client_id = client_id
        self.reconnect_delay = reconnect_delay
        self.dispatch = dispatch  # marshals handler calls (e.g. onto a kernel)
        self._sock: Optional[socket.socket] = None
        self._lock = threading.Lock()
        self._outbox: list[bytes] = []
        self._handlers: dict[str, tuple[Callable[[ManagementEvent], None], bool, str]] = {}
        self._subscribe_frames: dict[str, bytes] = {}
        self._closed = False
        self._reader: Optional[threading.Thread] = None
        self._pump = threading.Thread(target=self._pump_loop, daemon=True)
        self._pump.start()

    # -- public -------------------------------------------------------------

    def publish(self, event: ManagementEvent) -> None:
        """Queue for delivery; survives broker outages."""
        with self._lock:
            self._outbox.append(encode_event(event))

    def subscribe(
        self,
        topic: Topic,
        handler: Callable[[ManagementEvent], None],
        durable: bool = False,
        event_filter: Optional[list[str]] = None,
    ) -> None:
        fields = [
            text(CTL_SUBSCRIBER, self.client_id),
            text(CTL_TOPIC, str(topic)),
            flag(CTL_DURABLE, durable),
        ]
        if event_filter:
            fields.append(text(CTL_FILTER, ",".join(event_filter)))
        frame = encode_event(make_event("_SUBSCRIBE", 0, fields))
        with self._lock:
            self._handlers[str(topic)] = (handler, durable, self.client_id)
            self._subscribe_frames[str(topic)] = frame
            self._outbox.insert(0, frame)

    def close(self) -> None:
        self._closed = True
        with self._lock:
            if self._sock is not None:
                try:
                    self._sock.close()
                except OSError:
                    pass
                self._sock = None

    def connected(self) -> bool:
        return self._sock is not None

    # -- internals ------------------------------------------------------------

    def _pump_loop(self) -> None:
        while not self._closed:
            sock = self._sock
            if sock is None:
                sock = self._try_connect()
                if sock is None:
                    time.sleep(self.reconnect_delay)
                    continue
            with self._lock:
                batch, self._outbox = self._outbox, []
            if batch:
                try:
                    sock.sendall(b"".join(batch))
                except OSError:
                    with self._lock:
                        # keep unsent frames for the next connection
                        self._outbox = batch + self._outbox
                        self._sock = None
                    continue
            time.sleep(0.01)

    def _try_connect(self) -> Optional[socket.socket]:
        try:
            sock = socket.create_connection((self.host, self.port), timeout=1.0)
        except OSError:
            return None
        with self._lock:
            self._sock = sock
            # re-issue subscriptions on every fresh connection
            resub = [f for f in self._subscribe_frames.values()]
            self._outbox = resub + self._outbox
        self._reader = threading.Thread(target=self._read_loop, args=(sock,), daemon=True)
        self._reader.start()
        return sock

    def _read_loop(self, sock: socket.socket) -> None:
        buf = b""
        while not self._closed:
            try:
                data = sock.recv(65536)
            except OSError:
                break
            if not data:
                break
            buf += data
            offset = 0
            while True:
                frame, offset = read_frame(buf, offset)
                if frame is None:
                    break
                try:
                    event = decode_event(frame)
                except Exception:
                    continue
                if event.event_type == "_EVENT":
                    self._on_delivery(event)
            buf = buf[offset:]
        with self._lock:
            if self._sock is sock:
                self._sock = None

    def _on_delivery(self, wrapper: ManagementEvent) -> None:
        topic_text = str(wrapper.get(CTL_TOPIC))
        inner = decode_event(bytes(wrapper.get(CTL_FRAME)))  # type: ignore[arg-type]
        entry = self._handlers.get(topic_text)
        if entry is None:
            return
        handler, durable, subscriber = entry
        try:
            if self.dispatch is not None:
                self.dispatch(lambda: handler(inner))
            else:
                handler(inner)
        finally:
            if durable:
                ack = make_event(
                    "_ACK",
                    0,
                    [
                        text(CTL_SUBSCRIBER, subscriber),
                        text(CTL_TOPIC, topic_text),
                        u64(CTL_OFFSET, int(wrapper.get(CTL_OFFSET, 0))),
                    ],
                )
                with self._lock:
                    self._outbox.append(encode_event(ack))
