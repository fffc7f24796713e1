"""Experiment sessions: private endpoints, virtual per-node connections over
the gateway overlay, experiment control (send/flash/reset), and controller
delivery of node output and asynchronous status updates.

Downlink uses per-connection stop-and-wait with end-to-end radio acks and a
bounded retry budget, so per-node FIFO holds even on lossy links; uplink
rides fixed-latency paths. All traffic is multiplexed over each gateway's
single link using the overlay framing in overlay.py.
"""

from __future__ import annotations

import base64
import json
import secrets
import threading
import urllib.request
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from ..config import TestbedConfig
from ..kernel import Kernel
from ..model import Urn
from ..sim.world import World
from .availability import Availability
from .motap import MotapEngine, MotapTransfer, NodeImage
from .overlay import KIND_DOWN, KIND_UP, demux_frame, mux_frame
from .reservations import Reservation, ReservationSystem


class SessionError(Exception):
    pass


class InvalidKey(SessionError):
    pass


class NotStartedYet(SessionError):
    def __init__(self, start: int):
        super().__init__(f"reservation starts at {start}")
        self.start = start


class Expired(SessionError):
    pass


class NotInReservation(SessionError):
    pass


class NodeUnreachable(SessionError):
    pass


@dataclass
class _VConn:
    urn: Urn
    downlink_seq: int = 0
    uplink_seq: int = 0
    queue: deque = field(default_factory=deque)
    in_flight: Optional[tuple[int, bytes, int]] = None  # seq, payload, tries


class ExperimentSession:
    def __init__(self, reservation: Reservation, controller_url: Optional[str] = None):
        self.session_id = secrets.token_hex(8)
        self.reservation = reservation
        self.controller_url = controller_url
        self.endpoint = f"/sessions/{self.session_id}"
        self.vconns: dict[Urn, _VConn] = {u: _VConn(u) for u in sorted(reservation.urns, key=str)}
        self.trace: list[dict] = []
        self.listeners: list[deque] = []
        self.closed = False
        self._lock = threading.Lock()

    def subscribe(self) -> deque:
        q: deque = deque()
        with self._lock:
            self.listeners.append(q)
        return q

    def unsubscribe(self, q: deque) -> None:
        with self._lock:
            if q in self.listeners:
                self.listeners.remove(q)

    def to_doc(self, now: int) -> dict:
        return {
            "session": self.session_id,
            "endpoint": self.endpoint,
            "reservation": self.reservation.reservation_id,
            "nodes": sorted(u.render() for u in self.vconns),
            "expires": self.reservation.end,
            "closed": self.closed,
            "now": now,
        }


def _payload_doc(payload: bytes) -> dict:
    doc = {"b64": base64.b64encode(payload).decode()}
    try:
        text = payload.decode("utf-8")
        if text.isprintable() or text == "":
            doc["text"] = text
    except UnicodeDecodeError:
        pass
    return doc


class SessionManager:
    def __init__(
        self,
        kernel: Kernel,
        world: World,
        reservations: ReservationSystem,
        availability: Availability,
        config: TestbedConfig,
    ):
        self.kernel = kernel
        self.world = world
        self.reservations = reservations
        self.availability = availability
        self.config = config
        self.motap = MotapEngine(kernel, world, config)
        self.sessions: dict[str, ExperimentSession] = {}
        self._by_reservation: dict[str, str] = {}
        self._owner_of: dict[Urn, str] = {}
        self.transfers: dict[str, MotapTransfer] = {}
        for gw in world.gateways:
            world.set_experiment_uplink_tap(gw, self._make_uplink_tap(gw))
        world.set_gprs_experiment_tap(self._on_gprs_uplink)
        availability.on_node_removed(self._on_node_removed)

    # ---------------------------------------------------------------- session

    def open_session(
        self, key_hex: str, controller_url: Optional[str] = None
    ) -> ExperimentSession:
        reservation = self.reservations.find_by_key(key_hex)
        if reservation is None or reservation.cancelled:
            raise InvalidKey("no reservation for this key")
        now = self.kernel.now()
        if now < reservation.start:
            raise NotStartedYet(reservation.start)
        if now >= reservation.end:
            raise Expired(f"reservation ended at {reservation.end}")
        existing_id = self._by_reservation.get(reservation.reservation_id)
        if existing_id is not None:
            session = self.sessions[existing_id]
            if not session.closed:
                return session
        session = ExperimentSession(reservation, controller_url)
        self.sessions[session.session_id] = session
        self._by_reservation[reservation.reservation_id] = session.session_id
        for urn in session.vconns:
            self._owner_of[urn] = session.session_id
        self._push(session, {"kind": "status", "event": "session-open",
                             "nodes": len(session.vconns)})
        self.kernel.call_at(reservation.end, lambda: self._close(session))
        return session

    def get_session(self, session_id: str) -> ExperimentSession:
        session = self.sessions.get(session_id)
        if session is None:
            raise InvalidKey(f"no session {session_id}")
        return session

    def _close(self, session: ExperimentSession) -> None:
        if session.closed:
            return
        session.closed = True
        self._push(session, {"kind": "status", "event": "session-expired"})
        for urn in session.vconns:
            if self._owner_of.get(urn) == session.session_id:
                del self._owner_of[urn]
        self._by_reservation.pop(session.reservation.reservation_id, None)

    # ------------------------------------------------------------------ send

    def send(self, session: ExperimentSession, urn: Urn, payload: bytes) -> int:
        """Queue a downlink payload; returns its per-connection sequence number."""
        if session.closed:
            raise Expired("session is closed")
        vconn = session.vconns.get(urn)
        if vconn is None:
            raise NotInReservation(f"{urn} is not part of this reservation")
        if not self._route_exists(urn):
            raise NodeUnreachable(str(urn))
        vconn.downlink_seq += 1
        seq = vconn.downlink_seq
        vconn.queue.append((seq, payload))
        self._pump(session, vconn)
        return seq

    def _route_exists(self, urn: Urn) -> bool:
        rt = self.world.node_rt(urn)
        if not rt.alive:
            return False
        if rt.spec.mobile:
            return True
        gw = rt.spec.cluster
        return gw is not None and self.world._exp_path(gw, urn) is not None

    def _pump(self, session: ExperimentSession, vconn: _VConn) -> None:
        if vconn.in_flight is not None or not vconn.queue:
            return
        seq, payload = vconn.queue.popleft()
        vconn.in_flight = (seq, payload, 0)
        self._transmit(session, vconn)

    def _transmit(self, session: ExperimentSession, vconn: _VConn) -> None:
        assert vconn.in_flight is not None
        seq, payload, tries = vconn.in_flight
        urn = vconn.urn
        # the portal->gateway link carries the documented overlay framing
        frame = mux_frame(KIND_DOWN, session.session_id, seq, urn.render(), payload)
        kind, sid, fseq, furn, fpayload = demux_frame(frame)
        gw = self.world.node_rt(urn).spec.cluster or urn

        acked = {"ok": False}

        def on_ack() -> None:
            if acked["ok"] or session.closed:
                return
            acked["ok"] = True
            vconn.in_flight = None
            self._pump(session, vconn)

        routed = self.world.send_experiment_downlink(gw, urn, fpayload, on_ack=on_ack)
        if not routed:
            self._downlink_failed(session, vconn, seq, "no-route")
            return

        def on_timeout() -> None:
            if acked["ok"] or vconn.in_flight is None or session.closed:
                return
            s, p, t = vconn.in_flight
            if s != seq:
                return
            if t + 1 >= self.config.overlay_retries:
                self._downlink_failed(session, vconn, seq, "retries-exhausted")
            else:
                vconn.in_flight = (s, p, t + 1)
                self._transmit(session, vconn)

        self.kernel.call_after(self.config.overlay_ack_timeout_ms, on_timeout)

    def _downlink_failed(self, session: ExperimentSession, vconn: _VConn, seq: int, why: str) -> None:
        vconn.in_flight = None
        self._push(
            session,
            {"kind": "status", "event": "downlink-dropped", "urn": vconn.urn.render(),
             "seq": seq, "why": why},
        )
        self._pump(session, vconn)

    # ---------------------------------------------------------------- uplink

    def _make_uplink_tap(self, gw: Urn):
        def tap(src: Urn, payload: bytes) -> None:
            self._on_uplink(gw, src, payload)

        return tap

    def _on_uplink(self, gw: Urn, src: Urn, payload: bytes) -> None:
        session_id = self._owner_of.get(src)
        if session_id is None:
            return  # idle-node output outside any experiment is dropped
        session = self.sessions[session_id]
        vconn = session.vconns[src]
        vconn.uplink_seq += 1
        # multiplex onto the shared gateway link, then demux portal-side
        frame = mux_frame(KIND_UP, session.session_id, vconn.uplink_seq, src.render(), payload)
        kind, sid, seq, urn_text, fpayload = demux_frame(frame)
        record = {
            "kind": "output",
            "urn": urn_text,
            "seq": seq,
            "payload": _payload_doc(fpayload),
        }
        self._push(session, record)

    def _on_gprs_uplink(self, src: Urn, payload: bytes) -> None:
        self._on_uplink(src, src, payload)

    # --------------------------------------------------------------- control

    def reset(self, session: ExperimentSession, urn: Urn) -> None:
        if urn not in session.vconns:
            raise NotInReservation(f"{urn} is not part of this reservation")
        self._push(session, {"kind": "status", "event": "reset-sent", "urn": urn.render()})
        self.world.node_command(urn, "reset")

    def flash(
        self,
        session: ExperimentSession,
        targets: list[Urn],
        image: NodeImage,
        mode: str = "multicast",
    ) -> MotapTransfer:
        if mode not in ("unicast", "multicast", "broadcast"):
            raise SessionError(f"unknown flash mode {mode!r}")
        outside = [u for u in targets if u not in session.vconns]
        if outside:
            raise NotInReservation(", ".join(map(str, outside)))
        if mode == "unicast" and len(targets) != 1:
            raise SessionError("unicast flash takes exactly one target")
        transfer = self.motap.start(
            image,
            targets,
            mode,
            on_status=lambda record: self._push(session, record),
        )
        self.transfers[transfer.transfer_id] = transfer
        return transfer

    # -------------------------------------------------------------- delivery

    def _push(self, session: ExperimentSession, record: dict) -> None:
        record = {"t": self.kernel.now(), **record}
        session.trace.append(record)
        with session._lock:
            listeners = list(session.listeners)
        for q in listeners:
            q.append(record)
        if session.controller_url:
            self._post_controller(session.controller_url, record)

    @staticmethod
    def _post_controller(url: str, record: dict) -> None:
        """Second delivery mode: push to an experimenter-hosted callback."""

        def worker() -> None:
            try:
                req = urllib.request.Request(
                    url,
                    data=json.dumps(record).encode(),
                    headers={"Content-Type": "application/json"},
                )
                urllib.request.urlopen(req, timeout=5).read()
            except OSError:
                pass  # controller endpoints may come and go

        threading.Thread(target=worker, daemon=True).start()

    def _on_node_removed(self, urn: Urn) -> None:
        session_id = self._owner_of.get(urn)
        if session_id is None:
            return
        session = self.sessions[session_id]
        self._push(
            session,
            {"kind": "status", "event": "node-removed", "urn": urn.render()},
        )
