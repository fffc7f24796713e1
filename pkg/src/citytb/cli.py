"""citytb: command-line client for testbed admins and experimenters.

Admin side: bring a world up (`up`), inspect the directory, inject faults.
Experimenter side: reserve, open a session, send/flash/reset, stream traces,
query the application-support plane. `scenario run` replays a scripted
scenario with inline assertions (exit 3 when one fails).

Exit codes: 0 ok, 1 usage, 2 remote/runtime error, 3 assertion failure.
Machine-readable mode (`-o json`) emits one JSON object per line with stable
key order.
"""

from __future__ import annotations

import argparse
import json
import os
import signal
import sys
import time
import urllib.error
import urllib.parse
import urllib.request
from pathlib import Path
from typing import Iterator, Optional

from .scenario import ScenarioAssertionFailure, ScenarioError, parse_time, resolve_topo

DEFAULT_HTTP = "127.0.0.1:7180"
HTTP_ENV = "CITYTB_HTTP_ADDR"
FORMAT_ENV = "CITYTB_FORMAT"


class UsageError(SystemExit):
    def __init__(self, message: str):
        print(f"error: {message}", file=sys.stderr)
        super().__init__(1)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage problems, not argparse's 2
        raise UsageError(message)


class RemoteError(Exception):
    pass


class HttpClient:
    def __init__(self, base: str):
        if not base.startswith("http"):
            base = f"http://{base}"
        self.base = base.rstrip("/")

    def request(self, method: str, path: str, body: Optional[object] = None,
                raw: Optional[bytes] = None, params: Optional[dict] = None):
        url = self.base + path
        if params:
            url += "?" + urllib.parse.urlencode(params)
        data = None
        headers = {}
        if raw is not None:
            data = raw
            headers["Content-Type"] = "application/octet-stream"
        elif body is not None:
            data = json.dumps(body).encode()
            headers["Content-Type"] = "application/json"
        req = urllib.request.Request(url, data=data, headers=headers, method=method)
        try:
            with urllib.request.urlopen(req, timeout=60) as resp:
                payload = resp.read()
                if resp.headers.get("Content-Type", "").startswith("application/json"):
                    return json.loads(payload)
                return payload.decode()
        except urllib.error.HTTPError as exc:
            try:
                detail = json.loads(exc.read()).get("error", str(exc))
            except Exception:
                detail = str(exc)
            raise RemoteError(f"{exc.code}: {detail}") from None
        except urllib.error.URLError as exc:
            raise RemoteError(f"cannot reach {self.base}: {exc.reason}") from None

    def stream(self, path: str, params: Optional[dict] = None) -> Iterator[dict]:
        url = self.base + path
        if params:
            url += "?" + urllib.parse.urlencode(params)
        try:
            resp = urllib.request.urlopen(url, timeout=3600)
        except urllib.error.URLError as exc:
            raise RemoteError(f"cannot reach {self.base}: {exc}") from None
        for line in resp:
            line = line.strip()
            if line.startswith(b"data: "):
                yield json.loads(line[len(b"data: ") :])


def emit(args, record: dict, human: str) -> None:
    if args.output == "json":
        print(json.dumps(record))
    else:
        print(human)


def emit_many(args, records: list[dict], humanize) -> None:
    for record in records:
        emit(args, record, humanize(record))


# ---------------------------------------------------------------- commands


def cmd_up(args) -> int:
    from .app import Testbed
    from .bus.netbus import BusServer, bus_address
    from .config import TestbedConfig
    from .httpd import ApiServer

    config = TestbedConfig.from_file(args.config) if args.config else TestbedConfig()
    bed = Testbed(
        resolve_topo(args.topo),
        config=config,
        seed=args.seed,
        persist_dir=args.persist,
    )
    bed.start()
    host, port = (args.http or os.environ.get(HTTP_ENV) or DEFAULT_HTTP).rsplit(":", 1)
    console_dir = args.console if args.console and Path(args.console).is_dir() else None
    api = ApiServer(bed, host=host, port=int(port), console_dir=console_dir)
    api.start()
    bus_host, bus_port = bus_address(args.bus)
    bus = BusServer(bed.broker, host=bus_host, port=bus_port,
                    now=bed.kernel.now, publish=lambda ev: bed.call(lambda: bed.broker.publish_event(ev)))
    bus.start()
    bed.run_live(pace=args.pace)
    print(f"testbed up: topo={args.topo} seed={args.seed} pace={args.pace}")
    print(f"http api on {api.base_url}  bus on {bus_host}:{bus.address[1]}")
    if console_dir:
        print(f"console at {api.base_url}/console/")
    print("press Ctrl-C to stop")
    stop = {"flag": False}

    def on_signal(_sig, _frame):
        stop["flag"] = True

    signal.signal(signal.SIGINT, on_signal)
    signal.signal(signal.SIGTERM, on_signal)
    try:
        while not stop["flag"]:
            time.sleep(0.2)
    finally:
        api.stop()
        bus.stop()
        bed.shutdown()
    return 0


def cmd_resources(args) -> int:
    client = HttpClient(args.endpoint)
    if args.action == "get":
        doc = client.request("GET", f"/resources/{args.urn}")
        emit(args, doc, json.dumps(doc, indent=2))
        return 0
    params = {}
    if args.role:
        if args.role == "gateway":  # operator sugar for the common filter
            params["role"] = "infrastructural"
            params["meta.kind"] = "gateway"
        else:
            params["role"] = args.role
    if args.phenomenon:
        params["phenomenon"] = args.phenomenon
    if args.state:
        params["state"] = args.state
    if args.prefix:
        params["urn-prefix"] = args.prefix
    for item in args.meta or []:
        key, value = item.split("=", 1)
        params[f"meta.{key}"] = value
    docs = client.request("GET", "/resources", params=params)
    emit_many(args, docs, lambda d: f"{d['urn']}  {d['role']}  {d['state']}")
    if args.output != "json":
        print(f"total: {len(docs)}")
    return 0


def cmd_nodes(args) -> int:
    doc = HttpClient(args.endpoint).request("GET", "/nodes")
    emit(args, doc, json.dumps(doc, indent=2))
    return 0


def cmd_fault(args) -> int:
    body = {"target": args.target, "kind": args.kind, "p": args.p}
    if args.at is not None:
        body["at"] = parse_time(args.at)
    result = HttpClient(args.endpoint).request("POST", "/faults", body=body)
    emit(args, result, f"fault {args.kind} scheduled for {args.target}")
    return 0


def _resolve_interval(client: HttpClient, from_text: str, dur_text: Optional[str],
                      to_text: Optional[str]) -> tuple[int, int]:
    now = int(client.request("GET", "/time")["now"])
    if from_text.startswith("+"):
        start = now + parse_time(from_text[1:])
    else:
        start = parse_time(from_text)
    start -= start % 1000
    if to_text:
        end = parse_time(to_text) if not to_text.startswith("+") else now + parse_time(to_text[1:])
    elif dur_text:
        end = start + parse_time(dur_text)
    else:
        raise UsageError("one of --dur or --to is required")
    return start, end - (end % 1000)


def cmd_reserve(args) -> int:
    client = HttpClient(args.endpoint)
    start, end = _resolve_interval(client, args.from_, args.dur, args.to)
    body = {
        "user": args.user,
        "token": args.token,
        "urns": args.urns.split(","),
        "from": start,
        "to": end,
    }
    doc = client.request("POST", "/reservations", body=body)
    emit(
        args,
        doc,
        f"reservation {doc['id']} [{doc['start']},{doc['end']}) key={doc['key']}",
    )
    return 0


def cmd_availability(args) -> int:
    client = HttpClient(args.endpoint)
    start, end = _resolve_interval(client, args.from_, args.dur, args.to)
    doc = client.request("GET", "/availability", params={"from": start, "to": end})
    emit(args, doc, "\n".join(doc["available"]) or "(nothing available)")
    return 0


def cmd_session(args) -> int:
    client = HttpClient(args.endpoint)
    if args.action == "open":
        body = {"key": args.key}
        if args.controller:
            body["controller-url"] = args.controller
        doc = client.request("POST", "/sessions", body=body)
        emit(args, doc, f"session {doc['session']} endpoint={doc['endpoint']} "
                        f"nodes={len(doc['nodes'])}")
        return 0
    if args.action == "send":
        body = {"urn": args.urn}
        if args.b64:
            body["b64"] = args.b64
        else:
            body["text"] = args.text or ""
        doc = client.request("POST", f"/sessions/{args.session}/send", body=body)
        emit(args, doc, f"sent seq={doc['seq']}")
        return 0
    if args.action == "reset":
        doc = client.request("POST", f"/sessions/{args.session}/reset", body={"urn": args.urn})
        emit(args, doc, f"reset sent to {args.urn}")
        return 0
    if args.action == "flash":
        data = Path(args.image).read_bytes() if args.image else bytes(args.size)
        params = {
            "behavior": args.behavior,
            "mode": args.mode,
            "targets": args.targets,
            "image-id": args.image_id,
        }
        doc = client.request(
            "POST", f"/sessions/{args.session}/flash", raw=data, params=params
        )
        emit(args, doc, f"transfer {doc['id']} status={doc['status']} chunks={doc['chunks']}")
        return 0
    if args.action == "trace":
        if args.follow:
            for record in client.stream(f"/sessions/{args.session}/trace"):
                emit(args, record, _trace_line(record))
        else:
            records = client.request(
                "GET", f"/sessions/{args.session}/trace", params={"history": "1"}
            )
            emit_many(args, records, _trace_line)
        return 0
    raise UsageError(f"unknown session action {args.action}")


def _trace_line(record: dict) -> str:
    t = record.get("t", 0)
    if record.get("kind") == "output":
        payload = record.get("payload", {})
        body = payload.get("text", payload.get("b64", ""))
        return f"[{t}] {record.get('urn')} #{record.get('seq')}: {body}"
    detail = {k: v for k, v in record.items() if k not in ("t", "kind")}
    return f"[{t}] {record.get('kind')}: {detail}"


def cmd_asi(args) -> int:
    client = HttpClient(args.endpoint)
    if args.action == "query":
        params = {}
        if args.phenomenon:
            params["phenomenon"] = args.phenomenon
        if args.urn:
            params["urn"] = args.urn
        if args.from_:
            params["from"] = parse_time(args.from_)
        if args.to:
            params["to"] = parse_time(args.to)
        if args.aggregate:
            params["aggregate"] = args.aggregate
            if args.window:
                params["window"] = parse_time(args.window)
        if args.csv:
            params["format"] = "csv"
            print(client.request("GET", "/observations", params=params), end="")
            return 0
        rows = client.request("GET", "/observations", params=params)
        emit_many(
            args,
            rows,
            lambda r: (
                f"{r.get('timestamp', r.get('window-start'))} "
                f"{r.get('source', '')} {r.get('phenomenon', '')} {r.get('value')}"
            ),
        )
        return 0
    if args.action == "subscribe":
        flt = {}
        if args.phenomenon:
            flt["phenomenon"] = args.phenomenon
        if args.urn:
            flt["urn"] = args.urn
        doc = client.request("POST", "/asi/subscriptions", body={"filter": flt})
        for record in client.stream(doc["stream"]):
            emit(args, record, f"{record['timestamp']} {record['source']} "
                               f"{record['phenomenon']}={record['value']}")
        return 0
    if args.action == "heatmap":
        params = {"phenomenon": args.phenomenon, "bbox": args.bbox, "cells": args.cells}
        doc = client.request("GET", "/heatmap", params=params)
        emit(args, doc, json.dumps(doc, indent=2))
        return 0
    raise UsageError(f"unknown asi action {args.action}")


def cmd_bus(args) -> int:
    client = HttpClient(args.endpoint)
    if args.action == "log":
        params = {"topic": args.topic} if args.topic else None
        rows = client.request("GET", "/bus/log", params=params)
        emit_many(args, rows, lambda r: f"{r['at']} {r['topic']} {r['type']} {r.get('urn', '')}")
        return 0
    if args.action == "stream":
        for record in client.stream("/bus/stream"):
            emit(args, record, f"{record['at']} {record['topic']} {record['type']} "
                               f"{record.get('urn', '')}")
        return 0
    raise UsageError(f"unknown bus action {args.action}")


def cmd_scenario(args) -> int:
    from .scenario import run_file

    path = Path(args.file)
    if not path.exists():
        from .seeds import seed_path

        try:
            path = seed_path(args.file)
        except FileNotFoundError:
            raise UsageError(f"no scenario file {args.file}")
    try:
        bed = run_file(path)
        bed.shutdown()
        return 0
    except ScenarioAssertionFailure as exc:
        print(f"assertion failed: {exc}", file=sys.stderr)
        return 3
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return 2


def cmd_seeds(args) -> int:
    from .seeds import list_seeds, seed_path

    if args.action == "list":
        for name in list_seeds():
            print(name)
        return 0
    print(seed_path(args.name))
    return 0


# ----------------------------------------------------------------- parser


def build_parser() -> _Parser:
    parser = _Parser(prog="citytb", description=__doc__)
    parser.add_argument(
        "-e", "--endpoint",
        default=os.environ.get(HTTP_ENV, DEFAULT_HTTP),
        help="http api address (env CITYTB_HTTP_ADDR)",
    )
    parser.add_argument(
        "-o", "--output",
        choices=("human", "json"),
        default=os.environ.get(FORMAT_ENV, "human"),
        help="output format: human text or JSON lines",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("up", help="launch the world and all services")
    p.add_argument("--topo", default="santander.topo")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pace", type=float, default=1.0,
                   help="wall pacing: 1 = real time, 0 = fast-forward")
    p.add_argument("--http", help="api bind address host:port")
    p.add_argument("--bus", help="bus bind address host:port (env CITYTB_BUS_ADDR)")
    p.add_argument("--persist", help="directory for bus/directory persistence")
    p.add_argument("--config", help="TestbedConfig JSON file")
    p.add_argument("--console", help="serve the web console from this directory")
    p.set_defaults(func=cmd_up)

    p = sub.add_parser("resources", help="query the resource directory")
    p.add_argument("action", choices=("list", "get"))
    p.add_argument("urn", nargs="?")
    p.add_argument("--role")
    p.add_argument("--phenomenon")
    p.add_argument("--state")
    p.add_argument("--prefix")
    p.add_argument("--meta", action="append", metavar="K=V")
    p.set_defaults(func=cmd_resources)

    p = sub.add_parser("nodes", help="export the reservable node-set document")
    p.set_defaults(func=cmd_nodes)

    p = sub.add_parser("fault", help="inject a failure into the world")
    p.add_argument("action", choices=("inject",))
    p.add_argument("--target", required=True)
    p.add_argument("--kind", required=True,
                   choices=("node-death", "gw-death", "link-degrade", "revive"))
    p.add_argument("--p", type=float, default=1.0)
    p.add_argument("--at")
    p.set_defaults(func=cmd_fault)

    p = sub.add_parser("reserve", help="reserve a node set")
    p.add_argument("--urns", required=True)
    p.add_argument("--from", dest="from_", default="+10s")
    p.add_argument("--dur")
    p.add_argument("--to")
    p.add_argument("--user", default="alice")
    p.add_argument("--token", default="wonderland")
    p.set_defaults(func=cmd_reserve)

    p = sub.add_parser("availability", help="which nodes are free for an interval")
    p.add_argument("--from", dest="from_", default="+10s")
    p.add_argument("--dur")
    p.add_argument("--to")
    p.set_defaults(func=cmd_availability)

    p = sub.add_parser("session", help="experiment session control")
    p.add_argument("action", choices=("open", "send", "flash", "reset", "trace"))
    p.add_argument("--key")
    p.add_argument("--controller")
    p.add_argument("--session")
    p.add_argument("--urn")
    p.add_argument("--text")
    p.add_argument("--b64")
    p.add_argument("--targets", default="")
    p.add_argument("--image", help="image file (omit to send --size zero bytes)")
    p.add_argument("--size", type=int, default=1024)
    p.add_argument("--image-id", default="experiment-image")
    p.add_argument("--behavior", default="echo")
    p.add_argument("--mode", default="multicast",
                   choices=("unicast", "multicast", "broadcast"))
    p.add_argument("--follow", action="store_true")
    p.set_defaults(func=cmd_session)

    p = sub.add_parser("asi", help="application-support queries and streams")
    p.add_argument("action", choices=("query", "subscribe", "heatmap"))
    p.add_argument("--phenomenon")
    p.add_argument("--urn")
    p.add_argument("--from", dest="from_")
    p.add_argument("--to")
    p.add_argument("--aggregate", choices=("min", "max", "mean"))
    p.add_argument("--window")
    p.add_argument("--csv", action="store_true")
    p.add_argument("--bbox", help="minlat,minlon,maxlat,maxlon")
    p.add_argument("--cells", default="20x20")
    p.set_defaults(func=cmd_asi)

    p = sub.add_parser("bus", help="management event bus feed")
    p.add_argument("action", choices=("log", "stream"))
    p.add_argument("--topic")
    p.set_defaults(func=cmd_bus)

    p = sub.add_parser("scenario", help="replay a scripted scenario")
    p.add_argument("action", choices=("run",))
    p.add_argument("file")
    p.set_defaults(func=cmd_scenario)

    p = sub.add_parser("seeds", help="bundled seed files")
    p.add_argument("action", choices=("list", "path"))
    p.add_argument("name", nargs="?")
    p.set_defaults(func=cmd_seeds)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return exc.code  # type: ignore[return-value]
    try:
        return args.func(args)
    except UsageError as exc:
        return exc.code  # type: ignore[return-value]
    except RemoteError as exc:
        print(f"remote error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 0


if __name__ == "__main__":
    raise SystemExit(main())
