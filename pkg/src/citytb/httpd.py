"""HTTP surface for every service: directory (RPI/RLI), portal admin,
reservations/sessions, application support, bus admin feed, and the static
console. One threaded server, JSON bodies, SSE for all push streams.

The full endpoint and field table lives in docs/ENDPOINTS.md.
"""

from __future__ import annotations

import base64
import json
import re
import threading
from collections import deque
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Callable, Optional
from urllib.parse import parse_qsl, urlsplit

from .app import Testbed
from .bus.events import TAG_GATEWAY, TAG_URN
from .directory import BadQuery, Conflict, NotFound, Query
from .model import (
    ValidationError,
    description_from_json,
    parse_urn,
)
from .runtime import (
    AuthError,
    Expired,
    ImageTooLarge,
    InvalidKey,
    NodeImage,
    NotInReservation,
    NotReservable,
    NotStartedYet,
    ReservationConflict,
    UnknownReservationUrn,
)
from .runtime.reservations import ReservationError
from .runtime.sessions import NodeUnreachable, SessionError
from .service import AsiFilter, BadFilter, NoData, heatmap_grid
from .sim.world import UnknownUrn

_SSE_HEARTBEAT_S = 2.0

#: Endpoint table: (method, path template, CLI subcommand covering it).
#: docs/ENDPOINTS.md is generated from this list and the parity test checks
#: every capability stays reachable from the command line.
ENDPOINTS: list[tuple[str, str, str]] = [
    ("GET", "/health", "up"),
    ("GET", "/resources-summary", "resources"),
    ("POST", "/timeouts", "up"),
    ("GET", "/audit", "bus"),
    ("GET", "/time", "up"),
    ("POST", "/advance", "scenario"),
    ("POST", "/faults", "fault"),
    ("POST", "/resources", "resources"),
    ("GET", "/resources", "resources"),
    ("GET", "/resources/<urn>", "resources"),
    ("PUT", "/resources/<urn>", "resources"),
    ("DELETE", "/resources/<urn>", "resources"),
    ("POST", "/subscriptions", "resources"),
    ("GET", "/subscriptions/<id>/stream", "resources"),
    ("GET", "/nodes", "nodes"),
    ("POST", "/reservations", "reserve"),
    ("GET", "/reservations", "reserve"),
    ("DELETE", "/reservations/<id>", "reserve"),
    ("GET", "/availability", "availability"),
    ("POST", "/sessions", "session"),
    ("GET", "/sessions/<id>", "session"),
    ("POST", "/sessions/<id>/send", "session"),
    ("POST", "/sessions/<id>/reset", "session"),
    ("POST", "/sessions/<id>/flash", "session"),
    ("GET", "/sessions/<id>/flash/<transfer>", "session"),
    ("GET", "/sessions/<id>/trace", "session"),
    ("GET", "/observations", "asi"),
    ("POST", "/asi/observations", "asi"),
    ("POST", "/asi/subscriptions", "asi"),
    ("GET", "/asi/subscriptions/<id>/stream", "asi"),
    ("GET", "/heatmap", "asi"),
    ("GET", "/bus/stream", "bus"),
    ("GET", "/bus/log", "bus"),
]


class ApiError(Exception):
    def __init__(self, status: int, message: str, extra: Optional[dict] = None):
        super().__init__(message)
        self.status = status
        self.payload = {"error": message, **(extra or {})}


def _map_error(exc: Exception) -> ApiError:
    if isinstance(exc, ApiError):
        return exc
    if isinstance(exc, (BadQuery, BadFilter, ValidationError, ReservationError)):
        if isinstance(exc, ReservationConflict):
            return ApiError(
                409,
                str(exc),
                {"colliding": [u.render() for u in exc.urns], "kind": "conflict"},
            )
        if isinstance(exc, UnknownReservationUrn):
            return ApiError(404, str(exc), {"kind": "unknown-urn"})
        if isinstance(exc, NotReservable):
            return ApiError(403, str(exc), {"kind": "not-reservable"})
        if isinstance(exc, AuthError):
            return ApiError(403, str(exc), {"kind": "auth"})
        return ApiError(400, str(exc))
    if isinstance(exc, Conflict):
        return ApiError(409, str(exc))
    if isinstance(exc, (NotFound, UnknownUrn)):
        return ApiError(404, str(exc))
    if isinstance(exc, InvalidKey):
        return ApiError(403, str(exc), {"kind": "invalid-key"})
    if isinstance(exc, NotStartedYet):
        return ApiError(409, str(exc), {"kind": "not-started", "starts-at": exc.start})
    if isinstance(exc, Expired):
        return ApiError(410, str(exc), {"kind": "expired"})
    if isinstance(exc, NotInReservation):
        return ApiError(403, str(exc), {"kind": "not-in-reservation"})
    if isinstance(exc, NodeUnreachable):
        return ApiError(502, str(exc), {"kind": "unreachable"})
    if isinstance(exc, ImageTooLarge):
        return ApiError(413, str(exc))
    if isinstance(exc, NoData):
        return ApiError(404, str(exc), {"kind": "no-data"})
    if isinstance(exc, (SessionError, ValueError, KeyError)):
        return ApiError(400, str(exc))
    return ApiError(500, f"{type(exc).__name__}: {exc}")


class ApiServer:
    def __init__(
        self,
        bed: Testbed,
        host: str = "127.0.0.1",
        port: int = 0,
        console_dir: Optional[str] = None,
    ):
        self.bed = bed
        self.console_dir = Path(console_dir) if console_dir else None
        self._bus_feeds: list[deque] = []
        self._bus_feeds_lock = threading.Lock()
        self._rd_streams: dict[str, deque] = {}
        self._asi_streams: dict[str, deque] = {}
        bed.broker.add_audit_tap(self._bus_tap)
        handler = _make_handler(self)
        self._http = ThreadingHTTPServer((host, port), handler)
        self._http.daemon_threads = True
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> tuple[str, int]:
        return self._http.server_address  # type: ignore[return-value]

    @property
    def base_url(self) -> str:
        host, port = self.address
        return f"http://{host}:{port}"

    def start(self) -> None:
        self._thread = threading.Thread(target=self._http.serve_forever, daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._http.shutdown()
        self._http.server_close()

    # ------------------------------------------------------------- bus feed

    def _bus_tap(self, topic, offset, event) -> None:
        summary = {
            "topic": str(topic),
            "offset": offset,
            "type": event.event_type,
            "at": event.published_at,
            "correlation": event.correlation_id.hex(),
        }
        urn = event.get(TAG_URN) or event.get(TAG_GATEWAY)
        if urn:
            summary["urn"] = str(urn)
        with self._bus_feeds_lock:
            feeds = list(self._bus_feeds)
        for feed in feeds:
            feed.append(summary)

    def open_bus_feed(self) -> deque:
        feed: deque = deque(maxlen=10_000)
        with self._bus_feeds_lock:
            self._bus_feeds.append(feed)
        return feed

    def close_bus_feed(self, feed: deque) -> None:
        with self._bus_feeds_lock:
            if feed in self._bus_feeds:
                self._bus_feeds.remove(feed)


def _make_handler(api: ApiServer):
    bed = api.bed

    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"
        server_version = "citytb/0.1"

        # ---------------------------------------------------------- plumbing

        def log_message(self, fmt, *args):  # quiet by default
            pass

        def _json_body(self) -> dict:
            length = int(self.headers.get("Content-Length") or 0)
            if length == 0:
                return {}
            raw = self.rfile.read(length)
            try:
                return json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ApiError(400, f"bad JSON body: {exc}") from None

        def _raw_body(self) -> bytes:
            length = int(self.headers.get("Content-Length") or 0)
            return self.rfile.read(length) if length else b""

        def _send_json(self, status: int, obj) -> None:
            data = json.dumps(obj).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(data)

        def _send_text(self, status: int, text: str, content_type: str) -> None:
            data = text.encode()
            self.send_response(status)
            self.send_header("Content-Type", content_type)
            self.send_header("Content-Length", str(len(data)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(data)

        def _send_sse(self, feed: deque, history: Optional[list] = None,
                      cleanup: Optional[Callable[[], None]] = None) -> None:
            import time as _time

            self.send_response(200)
            self.send_header("Content-Type", "text/event-stream")
            self.send_header("Cache-Control", "no-cache")
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            try:
                for record in history or []:
                    self.wfile.write(f"data: {json.dumps(record)}\n\n".encode())
                self.wfile.flush()
                idle = 0.0
                while True:
                    wrote = False
                    while feed:
                        record = feed.popleft()
                        self.wfile.write(f"data: {json.dumps(record)}\n\n".encode())
                        wrote = True
                    if wrote:
                        self.wfile.flush()
                        idle = 0.0
                    else:
                        _time.sleep(0.05)
                        idle += 0.05
                        if idle >= _SSE_HEARTBEAT_S:
                            self.wfile.write(b": keep-alive\n\n")
                            self.wfile.flush()
                            idle = 0.0
            except (BrokenPipeError, ConnectionResetError, OSError):
                pass
            finally:
                if cleanup is not None:
                    cleanup()

        def _dispatch(self, method: str) -> None:
            split = urlsplit(self.path)
            path = split.path
            params = dict(parse_qsl(split.query, keep_blank_values=True))
            try:
                handled = self._route(method, path, params)
                if not handled:
                    raise ApiError(404, f"no route {method} {path}")
            except Exception as exc:  # surface every failure as JSON
                err = _map_error(exc)
                try:
                    self._send_json(err.status, err.payload)
                except (BrokenPipeError, ConnectionResetError, OSError):
                    pass

        def do_GET(self) -> None:
            self._dispatch("GET")

        def do_POST(self) -> None:
            self._dispatch("POST")

        def do_PUT(self) -> None:
            self._dispatch("PUT")

        def do_DELETE(self) -> None:
            self._dispatch("DELETE")

        def do_OPTIONS(self) -> None:
            self.send_response(204)
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Methods", "GET, POST, PUT, DELETE")
            self.send_header("Access-Control-Allow-Headers", "Content-Type")
            self.end_headers()

        # ------------------------------------------------------------ routes

        def _route(self, method: str, path: str, params: dict[str, str]) -> bool:
            # admin / world
            if method == "GET" and path == "/health":
                self._send_json(200, bed.portal.health())
            elif method == "GET" and path == "/resources-summary":
                self._send_json(200, bed.portal.resources_summary())
            elif method == "POST" and path == "/timeouts":
                body = self._json_body()
                self._send_json(200, bed.portal.set_timeouts(**body))
            elif method == "GET" and path == "/audit":
                self._send_json(200, bed.portal.audit)
            elif method == "GET" and path == "/time":
                self._send_json(200, {"now": bed.kernel.now()})
            elif method == "POST" and path == "/advance":
                if bed.live:
                    raise ApiError(409, "kernel is free-running; cannot step")
                dt = int(self._json_body().get("dt-ms", 0))
                bed.run_for(dt)
                self._send_json(200, {"now": bed.kernel.now()})
            elif method == "POST" and path == "/faults":
                body = self._json_body()
                target = parse_urn(body["target"])
                kind = body["kind"]
                at = body.get("at")
                p = float(body.get("p", 1.0))
                bed.call(lambda: bed.world.inject_fault(target, kind, at=at, p=p))
                self._send_json(202, {"target": target.render(), "kind": kind})
            # directory (RPI + RLI)
            elif method == "POST" and path == "/resources":
                desc = description_from_json(self._raw_body().decode())
                uri = bed.call(lambda: bed.rd.register(desc))
                self._send_json(201, {"uri": uri})
            elif method == "GET" and path == "/resources":
                query = Query.from_params(params)
                docs = bed.rd.lookup(query)
                self._send_json(200, [d.to_doc() for d in docs])
            elif match := re.fullmatch(r"/resources/(urn:[^/]+)", path):
                urn = parse_urn(match.group(1))
                if method == "GET":
                    self._send_json(200, bed.rd.get(urn).to_doc())
                elif method == "PUT":
                    body = self._json_body()
                    bed.call(lambda: bed.rd.update(urn, body))
                    self._send_json(200, bed.rd.get(urn).to_doc())
                elif method == "DELETE":
                    bed.call(lambda: bed.rd.delete(urn))
                    self._send_json(200, {"deleted": urn.render()})
                else:
                    return False
            elif method == "POST" and path == "/subscriptions":
                body = self._json_body()
                query = Query.from_params(body.get("query", {}))
                feed: deque = deque(maxlen=10_000)
                sub_id = bed.rd.subscribe(
                    query,
                    lambda kind, urn: feed.append({"kind": kind, "urn": urn.render()}),
                )
                api._rd_streams[sub_id] = feed
                self._send_json(
                    201, {"id": sub_id, "stream": f"/subscriptions/{sub_id}/stream"}
                )
            elif match := re.fullmatch(r"/subscriptions/([\w-]+)/stream", path):
                feed = api._rd_streams.get(match.group(1))
                if feed is None:
                    raise ApiError(404, "no such subscription")
                self._send_sse(feed)
            # runtime: node set, reservations, sessions
            elif method == "GET" and path == "/nodes":
                self._send_json(200, bed.availability.node_set_document(bed.kernel.now()))
            elif method == "POST" and path == "/reservations":
                body = self._json_body()
                urns = [parse_urn(u) for u in body.get("urns", [])]
                reservation, key = bed.reservations.reserve(
                    body.get("user", ""),
                    body.get("token", ""),
                    urns,
                    int(body["from"]),
                    int(body["to"]),
                )
                doc = reservation.to_doc(bed.kernel.now())
                doc["key"] = key  # returned exactly once
                self._send_json(201, doc)
            elif method == "GET" and path == "/reservations":
                now = bed.kernel.now()
                self._send_json(200, [r.to_doc(now) for r in bed.reservations.calendar()])
            elif match := re.fullmatch(r"/reservations/([\w-]+)", path):
                if method != "DELETE":
                    return False
                bed.reservations.cancel(
                    match.group(1), params.get("user", ""), params.get("token", "")
                )
                self._send_json(200, {"cancelled": match.group(1)})
            elif method == "GET" and path == "/availability":
                start, end = int(params["from"]), int(params["to"])
                urns = bed.reservations.available_for(start, end)
                self._send_json(200, {"available": [u.render() for u in urns]})
            elif method == "POST" and path == "/sessions":
                body = self._json_body()
                session = bed.call(
                    lambda: bed.sessions.open_session(
                        body.get("key", ""), body.get("controller-url")
                    )
                )
                self._send_json(201, session.to_doc(bed.kernel.now()))
            elif match := re.fullmatch(r"/sessions/([0-9a-f]+)", path):
                session = bed.sessions.get_session(match.group(1))
                self._send_json(200, session.to_doc(bed.kernel.now()))
            elif match := re.fullmatch(r"/sessions/([0-9a-f]+)/send", path):
                session = bed.sessions.get_session(match.group(1))
                body = self._json_body()
                urn = parse_urn(body["urn"])
                if "b64" in body:
                    payload = base64.b64decode(body["b64"])
                else:
                    payload = str(body.get("text", "")).encode()
                seq = bed.call(lambda: bed.sessions.send(session, urn, payload))
                self._send_json(202, {"seq": seq})
            elif match := re.fullmatch(r"/sessions/([0-9a-f]+)/reset", path):
                session = bed.sessions.get_session(match.group(1))
                urn = parse_urn(self._json_body()["urn"])
                bed.call(lambda: bed.sessions.reset(session, urn))
                self._send_json(202, {"reset": urn.render()})
            elif match := re.fullmatch(r"/sessions/([0-9a-f]+)/flash", path):
                session = bed.sessions.get_session(match.group(1))
                image_bytes = self._raw_body()
                image = NodeImage(
                    params.get("image-id", "experiment-image"),
                    params.get("behavior", "default-sense"),
                    image_bytes,
                )
                mode = params.get("mode", "multicast")
                targets = [parse_urn(u) for u in params.get("targets", "").split(",") if u]
                transfer = bed.call(
                    lambda: bed.sessions.flash(session, targets, image, mode)
                )
                self._send_json(201, transfer.to_doc())
            elif match := re.fullmatch(r"/sessions/([0-9a-f]+)/flash/([\w-]+)", path):
                bed.sessions.get_session(match.group(1))
                transfer = bed.sessions.transfers.get(match.group(2))
                if transfer is None:
                    raise ApiError(404, "no such transfer")
                self._send_json(200, transfer.to_doc())
            elif match := re.fullmatch(r"/sessions/([0-9a-f]+)/trace", path):
                session = bed.sessions.get_session(match.group(1))
                if params.get("history") == "1":
                    self._send_json(200, list(session.trace))
                else:
                    feed = session.subscribe()
                    self._send_sse(
                        feed,
                        history=list(session.trace),
                        cleanup=lambda: session.unsubscribe(feed),
                    )
            # application support
            elif method == "GET" and path == "/observations":
                self._observations(params)
            elif method == "POST" and path == "/asi/subscriptions":
                body = self._json_body()
                flt = AsiFilter.from_params(body.get("filter", {}))
                feed = deque(maxlen=10_000)
                sub_id = bed.service.subscribe(flt, lambda obs: feed.append(obs.to_doc()))
                api._asi_streams[sub_id] = feed
                self._send_json(
                    201, {"id": sub_id, "stream": f"/asi/subscriptions/{sub_id}/stream"}
                )
            elif match := re.fullmatch(r"/asi/subscriptions/([\w-]+)/stream", path):
                feed = api._asi_streams.get(match.group(1))
                if feed is None:
                    raise ApiError(404, "no such subscription")
                self._send_sse(feed)
            elif method == "POST" and path == "/asi/observations":
                from .model import observation_from_json

                obs = observation_from_json(self._raw_body().decode())
                bed.call(lambda: bed.service.ingest(obs))
                self._send_json(202, {"stored": True})
            elif method == "GET" and path == "/heatmap":
                self._heatmap(params)
            # bus admin
            elif method == "GET" and path == "/bus/stream":
                feed = api.open_bus_feed()
                self._send_sse(feed, cleanup=lambda: api.close_bus_feed(feed))
            elif method == "GET" and path == "/bus/log":
                entries = []
                for seq, topic, offset, event in bed.broker.audit_log():
                    if "topic" in params and str(topic) != params["topic"]:
                        continue
                    entry = {
                        "seq": seq,
                        "topic": str(topic),
                        "offset": offset,
                        "type": event.event_type,
                        "at": event.published_at,
                        "correlation": event.correlation_id.hex(),
                    }
                    urn = event.get(TAG_URN) or event.get(TAG_GATEWAY)
                    if urn:
                        entry["urn"] = str(urn)
                    entries.append(entry)
                self._send_json(200, entries)
            # console static files
            elif path == "/" and api.console_dir is not None:
                self.send_response(302)
                self.send_header("Location", "/console/")
                self.send_header("Content-Length", "0")
                self.end_headers()
            elif path.startswith("/console") and api.console_dir is not None:
                rel = path[len("/console") :].lstrip("/") or "index.html"
                self._static(rel)
            else:
                return False
            return True

        # ----------------------------------------------------------- helpers

        def _observations(self, params: dict[str, str]) -> None:
            filter_params = {
                k: v for k, v in params.items() if k in ("phenomenon", "urn", "lat", "lon", "radius")
            }
            flt = AsiFilter.from_params(filter_params)
            t0 = int(params["from"]) if "from" in params else None
            t1 = int(params["to"]) if "to" in params else None
            aggregate = params.get("aggregate")
            if aggregate:
                if t0 is None or t1 is None:
                    raise ApiError(400, "aggregates need from and to")
                window = int(params["window"]) if "window" in params else None
                rows = bed.service.aggregate(flt, t0, t1, aggregate, window)
                self._send_json(200, rows)
                return
            series = bed.service.query(flt, t0, t1)
            if params.get("format") == "csv":
                self._send_text(200, bed.service.to_csv(series), "text/csv")
            else:
                self._send_json(200, [o.to_doc() for o in series])

        def _heatmap(self, params: dict[str, str]) -> None:
            phenomenon = params.get("phenomenon")
            if not phenomenon:
                raise ApiError(400, "phenomenon is required")
            try:
                bbox = tuple(float(x) for x in params["bbox"].split(","))
                cells_x, cells_y = (int(x) for x in params.get("cells", "20x20").split("x"))
            except (KeyError, ValueError):
                raise ApiError(400, "bbox=minlat,minlon,maxlat,maxlon and cells=WxH") from None
            if len(bbox) != 4:
                raise ApiError(400, "bbox needs four numbers")
            at = int(params.get("at", bed.kernel.now()))
            staleness = int(params.get("staleness", bed.config.heatmap_staleness_ms))
            latest = bed.service.latest_by_source(phenomenon, at - staleness, at)
            grid = heatmap_grid(
                list(latest.values()),
                bbox,  # type: ignore[arg-type]
                cells_x,
                cells_y,
                power=bed.config.heatmap_power,
                cutoff_m=bed.config.heatmap_cutoff_m,
            )
            grid["phenomenon"] = phenomenon
            grid["at"] = at
            self._send_json(200, grid)

        def _static(self, rel: str) -> None:
            assert api.console_dir is not None
            target = (api.console_dir / rel).resolve()
            if not str(target).startswith(str(api.console_dir.resolve())) or not target.is_file():
                raise ApiError(404, f"no such file {rel}")
            content_types = {
                ".html": "text/html",
                ".js": "application/javascript",
                ".css": "text/css",
                ".json": "application/json",
                ".svg": "image/svg+xml",
            }
            ctype = content_types.get(target.suffix, "application/octet-stream")
            self._send_text(200, target.read_text(encoding="utf-8"), ctype)

    return Handler
